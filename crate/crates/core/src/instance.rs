//! Per-class instance extraction by density clustering in 3D.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::class::{Class, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::projection::{LabelGrid, SphericalGrid};

/// Cluster id per point; `None` is noise.
pub type Assignment = Vec<Option<usize>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    /// Neighborhood size, the point itself included, that makes a core point.
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() || self.min_pts == 0 {
            return Err(Error::InvalidArgument(format!(
                "dbscan needs eps > 0 and min_pts >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

struct GridIndex<'a> {
    points: &'a [[f64; 3]],
    eps: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    fn new(points: &'a [[f64; 3]], eps: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, eps)).or_default().push(i);
        }
        GridIndex { points, eps, cells }
    }

    fn key(p: &[f64; 3], eps: f64) -> [i64; 3] {
        [0, 1, 2].map(|d| (p[d] / eps).floor() as i64)
    }

    /// Indices within `eps` of point `i`, itself included, ascending.
    fn region(&self, i: usize) -> Vec<usize> {
        let p = &self.points[i];
        let k = Self::key(p, self.eps);
        let e2 = self.eps * self.eps;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(list.iter().copied().filter(|&j| {
                            let q = &self.points[j];
                            (0..3).map(|d| (p[d] - q[d]).powi(2)).sum::<f64>() <= e2
                        }));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Density-based clustering. Seeds are visited in index order and a border
/// point joins the first cluster that reaches it.
pub fn dbscan(points: &[[f64; 3]], params: DbscanParams) -> Result<Assignment> {
    params.validate()?;
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "dbscan" });
    }
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unvisited,
        Noise,
        Cluster(usize),
    }
    let index = GridIndex::new(points, params.eps);
    let mut state = vec![State::Unvisited; points.len()];
    let mut next = 0;
    for p in 0..points.len() {
        if state[p] != State::Unvisited {
            continue;
        }
        let region = index.region(p);
        if region.len() < params.min_pts {
            state[p] = State::Noise;
            continue;
        }
        let c = next;
        next += 1;
        state[p] = State::Cluster(c);
        let mut queue: std::collections::VecDeque<usize> = region.into_iter().filter(|&q| q != p).collect();
        while let Some(q) = queue.pop_front() {
            match state[q] {
                State::Noise => state[q] = State::Cluster(c),
                State::Unvisited => {
                    state[q] = State::Cluster(c);
                    let rq = index.region(q);
                    if rq.len() >= params.min_pts {
                        queue.extend(rq);
                    }
                }
                State::Cluster(_) => {}
            }
        }
    }
    Ok(state
        .into_iter()
        .map(|s| match s {
            State::Cluster(c) => Some(c),
            _ => None,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Indexed by class id; the background entry is unused.
    pub params: [DbscanParams; NUM_CLASSES],
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let p = |eps, min_pts| DbscanParams { eps, min_pts };
        ClusterConfig {
            params: [p(1.0, 5), p(1.0, 5), p(0.5, 5), p(0.5, 5)],
        }
    }
}

impl ClusterConfig {
    pub fn get(&self, class: Class) -> DbscanParams {
        self.params[class.index()]
    }

    pub fn validate(&self) -> Result<()> {
        Class::OBJECTS.iter().try_for_each(|&c| self.get(c).validate())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassInstances {
    /// Each instance is an ascending list of cell indices.
    pub instances: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// Instances per class over a grid of `height × width` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    height: usize,
    width: usize,
    classes: Vec<ClassInstances>,
}

fn sort_instances(list: &mut [Vec<usize>]) {
    for i in list.iter_mut() {
        i.sort_unstable();
    }
    list.sort_by(|a, b| b.len().cmp(&a.len()).then(a.first().cmp(&b.first())));
}

impl InstanceSet {
    pub fn empty(height: usize, width: usize) -> Self {
        InstanceSet {
            height,
            width,
            classes: vec![ClassInstances::default(); NUM_CLASSES],
        }
    }

    /// Checks disjointness, bounds and non-emptiness, and puts instances in
    /// canonical order.
    pub fn new(height: usize, width: usize, mut classes: Vec<ClassInstances>) -> Result<Self> {
        if classes.len() != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("{} class entries", classes.len())));
        }
        let mut seen = vec![false; height * width];
        for (c, ci) in classes.iter_mut().enumerate() {
            if c == Class::Background.index() && !ci.instances.is_empty() {
                return Err(Error::InvalidArgument("background cannot have instances".into()));
            }
            sort_instances(&mut ci.instances);
            ci.noise.sort_unstable();
            for &cell in ci.instances.iter().flatten().chain(&ci.noise) {
                if cell >= seen.len() || std::mem::replace(&mut seen[cell], true) {
                    return Err(Error::InvalidArgument(format!("cell {cell} out of range or claimed twice")));
                }
            }
            if ci.instances.iter().any(|i| i.is_empty()) {
                return Err(Error::InvalidArgument("empty instance".into()));
            }
        }
        Ok(InstanceSet { height, width, classes })
    }

    /// Groups cells by `(class, id)`; id 0 means "no instance" and is skipped.
    pub fn from_ids(labels: &LabelGrid, ids: &[u16]) -> Result<Self> {
        if ids.len() != labels.classes().len() {
            return Err(Error::shape("InstanceSet::from_ids", format!("{} ids for {} cells", ids.len(), labels.classes().len())));
        }
        let mut groups: Vec<HashMap<u16, Vec<usize>>> = vec![HashMap::new(); NUM_CLASSES];
        for (cell, (&id, &m)) in ids.iter().zip(labels.mask()).enumerate() {
            let c = labels.class_at(cell) as usize;
            if m && id != 0 && c != Class::Background.index() {
                groups[c].entry(id).or_default().push(cell);
            }
        }
        let classes = groups
            .into_iter()
            .map(|g| ClassInstances {
                instances: g.into_values().collect(),
                noise: Vec::new(),
            })
            .collect();
        InstanceSet::new(labels.height(), labels.width(), classes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class(&self, class: Class) -> &ClassInstances {
        &self.classes[class.index()]
    }

    pub fn instances(&self, class: Class) -> &[Vec<usize>] {
        &self.classes[class.index()].instances
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|c| c.instances.is_empty())
    }

    pub fn count(&self) -> usize {
        self.classes.iter().map(|c| c.instances.len()).sum()
    }

    /// One line per instance: `class id count r,c ...`, ids running from 1.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut id = 1;
        for class in Class::OBJECTS {
            for inst in self.instances(class) {
                write!(s, "{} {} {}", class.name(), id, inst.len()).unwrap();
                for &cell in inst {
                    write!(s, " {},{}", cell / self.width, cell % self.width).unwrap();
                }
                s.push('\n');
                id += 1;
            }
        }
        s
    }

    pub fn from_text(height: usize, width: usize, text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Format(format!("instance dump line {}: {what}", line + 1));
        let mut classes = vec![ClassInstances::default(); NUM_CLASSES];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let class = it
                .next()
                .and_then(|c| Class::ALL.into_iter().find(|k| k.name() == c))
                .ok_or_else(|| bad(n, "unknown class"))?;
            let _id: u64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "bad id"))?;
            let count: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "bad count"))?;
            let mut cells = Vec::with_capacity(count);
            for rc in it {
                let (r, c) = rc.split_once(',').ok_or_else(|| bad(n, "bad cell"))?;
                let (r, c): (usize, usize) = match (r.parse(), c.parse()) {
                    (Ok(r), Ok(c)) if r < height && c < width => (r, c),
                    _ => return Err(bad(n, "cell out of range")),
                };
                cells.push(r * width + c);
            }
            if cells.len() != count {
                return Err(bad(n, "count does not match cell list"));
            }
            classes[class.index()].instances.push(cells);
        }
        InstanceSet::new(height, width, classes)
    }
}

/// Clusters the occupied cells of each object class in Cartesian space.
pub fn extract_instances(labels: &LabelGrid, grid: &SphericalGrid, cfg: &ClusterConfig) -> Result<InstanceSet> {
    if labels.height() != grid.height() || labels.width() != grid.width() {
        return Err(Error::shape(
            "extract_instances",
            format!(
                "labels {}x{} vs grid {}x{}",
                labels.height(),
                labels.width(),
                grid.height(),
                grid.width()
            ),
        ));
    }
    cfg.validate()?;
    let mut classes = vec![ClassInstances::default(); NUM_CLASSES];
    for class in Class::OBJECTS {
        let cells: Vec<usize> = (0..grid.mask.len())
            .filter(|&i| grid.mask[i] && labels.mask()[i] && labels.class_at(i) == class.id())
            .collect();
        if cells.is_empty() {
            continue;
        }
        let pts: Vec<[f64; 3]> = cells.iter().map(|&i| grid.position(i)).collect();
        let ids = dbscan(&pts, cfg.get(class))?;
        let n = ids.iter().flatten().max().map_or(0, |m| m + 1);
        let entry = &mut classes[class.index()];
        entry.instances = vec![Vec::new(); n];
        for (&cell, id) in cells.iter().zip(ids) {
            match id {
                Some(k) => entry.instances[k].push(cell),
                None => entry.noise.push(cell),
            }
        }
    }
    InstanceSet::new(grid.height(), grid.width(), classes)
}

/// Per-cell instance id taken from each cell's source point.
pub fn project_instances(ids: &[u16], grid: &SphericalGrid) -> Result<Vec<u16>> {
    grid.point_index
        .iter()
        .map(|pi| match pi {
            None => Ok(0),
            Some(i) => ids
                .get(*i as usize)
                .copied()
                .ok_or_else(|| Error::shape("project_instances", format!("point {i} beyond {} ids", ids.len()))),
        })
        .collect()
}

/// Per-point instance ids for a cloud of `n_points`: instances are numbered
/// from 1 in class order, then size order; points without a surviving cell
/// or outside every instance get 0.
pub fn point_instances(set: &InstanceSet, grid: &SphericalGrid, n_points: usize) -> Result<Vec<u16>> {
    if set.height() != grid.height() || set.width() != grid.width() {
        return Err(Error::shape("point_instances", "instance set and grid differ in size"));
    }
    let mut ids = vec![0u16; n_points];
    let mut next: u32 = 1;
    for class in Class::OBJECTS {
        for inst in set.instances(class) {
            let id = u16::try_from(next).map_err(|_| Error::InvalidArgument("more than 65535 instances".into()))?;
            for &cell in inst {
                if let Some(p) = grid.point_index[cell] {
                    let p = p as usize;
                    if p >= n_points {
                        return Err(Error::shape("point_instances", format!("point {p} beyond {n_points}")));
                    }
                    ids[p] = id;
                }
            }
            next += 1;
        }
    }
    Ok(ids)
}
