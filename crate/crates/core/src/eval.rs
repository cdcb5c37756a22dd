//! Class-level and instance-level precision, recall and IoU.

use std::fmt::{self, Write as _};

use crate::class::{Class, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::instance::InstanceSet;
use crate::projection::LabelGrid;

/// A ratio that may be undefined because its denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined(&'static str),
}

impl Metric {
    fn ratio(num: u64, den: u64, reason: &'static str) -> Metric {
        if den == 0 {
            Metric::Undefined(reason)
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined(_) => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.4}"),
            Metric::Undefined(_) => f.write_str("n/a"),
        }
    }
}

/// Set cardinalities for one class: predicted, ground truth and the
/// intersection numerator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub pred: u64,
    pub gt: u64,
    pub inter: u64,
}

impl Counts {
    pub fn union(&self) -> u64 {
        self.pred + self.gt - self.inter
    }

    pub fn precision(&self) -> Metric {
        Metric::ratio(self.inter, self.pred, "no predicted points")
    }

    pub fn recall(&self) -> Metric {
        Metric::ratio(self.inter, self.gt, "no ground-truth points")
    }

    pub fn iou(&self) -> Metric {
        Metric::ratio(self.inter, self.union(), "class absent from both")
    }

    pub fn metrics(&self) -> ClassMetrics {
        self.scores(self.inter)
    }

    /// Ratios of `numerator` against this class's point sets; `inter` here
    /// only fixes the union.
    pub fn scores(&self, numerator: u64) -> ClassMetrics {
        ClassMetrics {
            precision: Metric::ratio(numerator, self.pred, "no predicted points"),
            recall: Metric::ratio(numerator, self.gt, "no ground-truth points"),
            iou: Metric::ratio(numerator, self.union(), "class absent from both"),
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.pred += o.pred;
        self.gt += o.gt;
        self.inter += o.inter;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: Metric,
    pub recall: Metric,
    pub iou: Metric,
}

fn check_aligned(pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() || pred.mask() != gt.mask() {
        return Err(Error::shape(
            "eval",
            format!(
                "prediction {}x{} and ground truth {}x{} differ in shape or occupancy",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    Ok(())
}

/// Per-class counts over occupied cells, indexed by class id.
pub fn class_counts(pred: &LabelGrid, gt: &LabelGrid) -> Result<[Counts; NUM_CLASSES]> {
    check_aligned(pred, gt)?;
    let mut out = [Counts::default(); NUM_CLASSES];
    for ((&p, &g), &m) in pred.classes().iter().zip(gt.classes()).zip(gt.mask()) {
        if !m {
            continue;
        }
        out[p as usize].pred += 1;
        out[g as usize].gt += 1;
        if p == g {
            out[p as usize].inter += 1;
        }
    }
    Ok(out)
}

pub fn class_metrics(pred: &LabelGrid, gt: &LabelGrid) -> Result<[ClassMetrics; NUM_CLASSES]> {
    Ok(class_counts(pred, gt)?.map(|c| c.metrics()))
}

/// Predicted instance index to ground-truth instance index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub pred_to_gt: Vec<Option<usize>>,
}

fn intersection(a: &[usize], b: &[usize]) -> u64 {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Greedy matching: ground-truth instances claim predictions largest first.
pub fn match_instances(pred: &InstanceSet, gt: &InstanceSet, class: Class) -> Matching {
    let p = pred.instances(class);
    let g = gt.instances(class);
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].len().cmp(&g[a].len()).then(a.cmp(&b)));
    let mut pred_to_gt = vec![None; p.len()];
    for j in order {
        let mut best: Option<(usize, f64)> = None;
        for (i, pi) in p.iter().enumerate() {
            if pred_to_gt[i].is_some() {
                continue;
            }
            let inter = intersection(pi, &g[j]);
            if inter == 0 {
                continue;
            }
            let iou = inter as f64 / (pi.len() as u64 + g[j].len() as u64 - inter) as f64;
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        if let Some((i, _)) = best {
            pred_to_gt[i] = Some(j);
        }
    }
    Matching { pred_to_gt }
}

/// `Σ_i |P_i ∩ G_M(i)|` for one class.
pub fn matched_intersection(pred: &InstanceSet, gt: &InstanceSet, matching: &Matching, class: Class) -> u64 {
    let p = pred.instances(class);
    let g = gt.instances(class);
    matching
        .pred_to_gt
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| intersection(&p[i], &g[j])))
        .sum()
}

/// Instance-level scores; denominators are the class-level point sets in
/// `class_counts`.
pub fn instance_metrics(
    pred: &InstanceSet,
    gt: &InstanceSet,
    matching: &Matching,
    class: Class,
    class_counts: Counts,
) -> ClassMetrics {
    class_counts.scores(matched_intersection(pred, gt, matching, class))
}

/// One evaluated frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameEval<'a> {
    pub pred_labels: &'a LabelGrid,
    pub gt_labels: &'a LabelGrid,
    pub pred_instances: &'a InstanceSet,
    pub gt_instances: &'a InstanceSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassReport {
    pub class_level: Counts,
    /// `Σ_i |P_i ∩ G_M(i)|`, scored against the `class_level` sets.
    pub matched: u64,
}

impl ClassReport {
    pub fn class_metrics(&self) -> ClassMetrics {
        self.class_level.metrics()
    }

    pub fn instance_metrics(&self) -> ClassMetrics {
        self.class_level.scores(self.matched)
    }
}

/// Micro-averaged results over a set of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    /// Indexed by class id.
    pub classes: [ClassReport; NUM_CLASSES],
}

pub fn report(frames: &[FrameEval<'_>]) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Empty("evaluation frames"));
    }
    let mut classes = [ClassReport::default(); NUM_CLASSES];
    for f in frames {
        let counts = class_counts(f.pred_labels, f.gt_labels)?;
        for class in Class::ALL {
            let c = counts[class.index()];
            let r = &mut classes[class.index()];
            r.class_level += c;
            let inter = if class == Class::Background {
                0
            } else {
                let m = match_instances(f.pred_instances, f.gt_instances, class);
                matched_intersection(f.pred_instances, f.gt_instances, &m, class)
            };
            r.matched += inter;
        }
    }
    Ok(EvalReport {
        frames: frames.len(),
        classes,
    })
}

impl EvalReport {
    pub fn class(&self, class: Class) -> &ClassReport {
        &self.classes[class.index()]
    }

    /// Flat `key=value` lines; undefined ratios read `undefined (<reason>)`.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("frames={}\n", self.frames);
        for class in Class::OBJECTS {
            let r = self.class(class);
            let n = class.name();
            writeln!(s, "{n}.support.pred={}", r.class_level.pred).unwrap();
            writeln!(s, "{n}.support.gt={}", r.class_level.gt).unwrap();
            for (level, c) in [("class", r.class_metrics()), ("instance", r.instance_metrics())] {
                for (name, m) in [("precision", c.precision), ("recall", c.recall), ("iou", c.iou)] {
                    match m {
                        Metric::Value(v) => writeln!(s, "{n}.{level}.{name}={v:.6}").unwrap(),
                        Metric::Undefined(why) => writeln!(s, "{n}.{level}.{name}=undefined ({why})").unwrap(),
                    }
                }
            }
        }
        s
    }

    /// Rows per class, precision/recall/IoU at class and instance level.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<11} {:>9} {:>9} {:>9}   {:>9} {:>9} {:>9}\n",
            "", "class P", "class R", "class IoU", "inst P", "inst R", "inst IoU"
        );
        for class in Class::OBJECTS {
            let r = self.class(class);
            let (a, b) = (r.class_metrics(), r.instance_metrics());
            writeln!(
                s,
                "{:<11} {:>9} {:>9} {:>9}   {:>9} {:>9} {:>9}",
                class.name(),
                a.precision.to_string(),
                a.recall.to_string(),
                a.iou.to_string(),
                b.precision.to_string(),
                b.recall.to_string(),
                b.iou.to_string()
            )
            .unwrap();
        }
        s
    }
}
