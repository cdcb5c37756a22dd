//! Spherical projection of point clouds into dense `H x W x 5` grids, label
//! transfer, and the per-cell dropout noise model.
//!
//! A point at `(x, y, z)` has zenith `asin(z / r)` and azimuth
//! `asin(y / sqrt(x^2 + y^2))`. Row 0 holds the highest zenith bin and column
//! 0 the leftmost azimuth (`-fov / 2`). Only the forward hemisphere (`x > 0`)
//! is projected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::class::{Class, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Feature channels per cell: x, y, z, intensity, range.
pub const CHANNELS: usize = 5;
pub const CH_X: usize = 0;
pub const CH_Y: usize = 1;
pub const CH_Z: usize = 2;
pub const CH_INTENSITY: usize = 3;
pub const CH_RANGE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Normalized to `[0, 1]`.
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }
}

/// An ordered LiDAR frame, optionally with one class id per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidArgument(format!("point {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&p.intensity) {
                return Err(Error::InvalidArgument(format!(
                    "point {i} intensity {} outside [0, 1]",
                    p.intensity
                )));
            }
        }
        Ok(PointCloud {
            points,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::shape(
                "PointCloud::with_labels",
                format!("{} labels for {} points", labels.len(), self.points.len()),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| Class::from_id(l).is_none()) {
            return Err(Error::InvalidArgument(format!("point {i} has unknown class {l}")));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Grid geometry. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub azimuth_fov: f64,
    pub zenith_min: f64,
    pub zenith_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            height: 64,
            width: 512,
            azimuth_fov: 90.0,
            zenith_min: -24.8,
            zenith_max: 2.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("grid height and width must be >= 1".into()));
        }
        if !(self.zenith_min < self.zenith_max) {
            return Err(Error::InvalidArgument("zenith_min must be below zenith_max".into()));
        }
        if !(self.azimuth_fov > 0.0 && self.azimuth_fov <= 360.0) {
            return Err(Error::InvalidArgument("azimuth_fov must lie in (0, 360]".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Zenith bin size in degrees.
    pub fn zenith_step(&self) -> f64 {
        (self.zenith_max - self.zenith_min) / self.height as f64
    }

    /// Azimuth bin size in degrees.
    pub fn azimuth_step(&self) -> f64 {
        self.azimuth_fov / self.width as f64
    }

    /// Zenith and azimuth of a sensor-frame point, in degrees. `None` for the
    /// rear hemisphere (`x <= 0`), where the azimuth formula is ambiguous.
    pub fn angles(x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
        if !(x > 0.0) {
            return None;
        }
        let r = (x * x + y * y + z * z).sqrt();
        let zenith = (z / r).clamp(-1.0, 1.0).asin().to_degrees();
        let azimuth = (y / (x * x + y * y).sqrt()).clamp(-1.0, 1.0).asin().to_degrees();
        Some((zenith, azimuth))
    }

    /// `(row, col)` of a sensor-frame point, or `None` outside the field of view.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        let (zenith, azimuth) = Self::angles(x, y, z)?;
        let row = ((self.zenith_max - zenith) * self.height as f64
            / (self.zenith_max - self.zenith_min))
            .floor();
        let col = ((azimuth + self.azimuth_fov / 2.0) * self.width as f64 / self.azimuth_fov).floor();
        if row < 0.0 || col < 0.0 || row >= self.height as f64 || col >= self.width as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Zenith and azimuth at the center of a cell, in degrees.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.zenith_max - (row as f64 + 0.5) * self.zenith_step(),
            -self.azimuth_fov / 2.0 + (col as f64 + 0.5) * self.azimuth_step(),
        )
    }
}

/// Dense projected frame: 5 feature channels plus occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalGrid {
    pub config: GridConfig,
    pub features: Tensor<f32>,
    pub mask: Vec<bool>,
    /// Index of the source point in each occupied cell.
    pub point_index: Vec<Option<u32>>,
}

impl SphericalGrid {
    pub fn empty(config: GridConfig) -> Self {
        SphericalGrid {
            config,
            features: Tensor::zeros(&[config.height, config.width, CHANNELS]),
            mask: vec![false; config.cells()],
            point_index: vec![None; config.cells()],
        }
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn occupied(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn cell(&self, idx: usize) -> &[f32] {
        &self.features.data()[idx * CHANNELS..][..CHANNELS]
    }

    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.cell(idx);
        [c[CH_X] as f64, c[CH_Y] as f64, c[CH_Z] as f64]
    }

    /// Writes a point into a cell and marks it occupied.
    pub fn set_cell(&mut self, idx: usize, p: &Point, source: Option<u32>) {
        let r = p.range() as f32;
        let c = &mut self.features.data_mut()[idx * CHANNELS..][..CHANNELS];
        c.copy_from_slice(&[p.x, p.y, p.z, p.intensity, r]);
        self.mask[idx] = true;
        self.point_index[idx] = source;
    }

    pub fn clear_cell(&mut self, idx: usize) {
        self.features.data_mut()[idx * CHANNELS..][..CHANNELS].fill(0.0);
        self.mask[idx] = false;
        self.point_index[idx] = None;
    }

    /// Rebuilds a grid from its feature tensor and occupancy (no source indices).
    pub fn from_parts(config: GridConfig, features: Tensor<f32>, mask: Vec<bool>) -> Result<Self> {
        if features.dims() != [config.height, config.width, CHANNELS] || mask.len() != config.cells() {
            return Err(Error::shape(
                "SphericalGrid::from_parts",
                format!("features {:?} for {}x{} grid", features.dims(), config.height, config.width),
            ));
        }
        for (i, &m) in mask.iter().enumerate() {
            if !m && features.data()[i * CHANNELS..][..CHANNELS].iter().any(|&v| v != 0.0) {
                return Err(Error::Format(format!("unoccupied cell {i} carries features")));
            }
        }
        Ok(SphericalGrid {
            config,
            features,
            mask,
            point_index: vec![None; config.cells()],
        })
    }
}

/// Per-cell class assignment sharing a grid's occupancy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    classes: Vec<u8>,
    mask: Vec<bool>,
}

impl LabelGrid {
    /// Fails if a class id is unknown or an unoccupied cell is not background.
    pub fn new(height: usize, width: usize, classes: Vec<u8>, mask: Vec<bool>) -> Result<Self> {
        if classes.len() != height * width || mask.len() != height * width {
            return Err(Error::shape(
                "LabelGrid::new",
                format!("{} classes / {} mask for {height}x{width}", classes.len(), mask.len()),
            ));
        }
        for (i, (&c, &m)) in classes.iter().zip(&mask).enumerate() {
            if Class::from_id(c).is_none() {
                return Err(Error::InvalidArgument(format!("cell {i} has unknown class {c}")));
            }
            if !m && c != 0 {
                return Err(Error::InvalidArgument(format!("unoccupied cell {i} labeled {c}")));
            }
        }
        Ok(LabelGrid {
            height,
            width,
            classes,
            mask,
        })
    }

    /// All-background labels over the given occupancy.
    pub fn background(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        Self::new(height, width, vec![0; height * width], mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn class_at(&self, idx: usize) -> u8 {
        self.classes[idx]
    }

    /// Sets an occupied cell's class; unoccupied cells stay background.
    pub fn set(&mut self, idx: usize, class: Class) {
        if self.mask[idx] {
            self.classes[idx] = class.id();
        }
    }

    /// Cell-wise accuracy against another grid, over occupied cells.
    pub fn accuracy(&self, other: &LabelGrid) -> Option<f64> {
        let mut hit = 0usize;
        let mut n = 0usize;
        for i in 0..self.classes.len() {
            if self.mask[i] {
                n += 1;
                hit += (self.classes[i] == other.classes[i]) as usize;
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }

    /// Most probable class of each occupied cell of an `[H, W, K]` map; ties
    /// go to the lower class id.
    pub fn from_probs<T: Scalar>(probs: &Tensor<T>, mask: &[bool]) -> Result<Self> {
        let (h, w, k) = probs.hwc("LabelGrid::from_probs")?;
        if k != NUM_CLASSES || mask.len() != h * w {
            return Err(Error::shape(
                "LabelGrid::from_probs",
                format!("{h}x{w}x{k} map with {} mask cells", mask.len()),
            ));
        }
        let classes = probs
            .data()
            .chunks(k)
            .zip(mask)
            .map(|(p, &m)| {
                if !m {
                    return 0;
                }
                let mut best = 0;
                for c in 1..k {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelGrid::new(h, w, classes, mask.to_vec())
    }

    /// Per-point labels for the cloud `grid` was projected from; points
    /// that did not survive projection read as background.
    pub fn point_labels(&self, grid: &SphericalGrid, n_points: usize) -> Result<Vec<u8>> {
        if grid.height() != self.height || grid.width() != self.width {
            return Err(Error::shape("LabelGrid::point_labels", "grid and labels differ in size"));
        }
        let mut out = vec![Class::Background.id(); n_points];
        for (cell, pi) in grid.point_index.iter().enumerate() {
            if let Some(p) = *pi {
                let slot = out
                    .get_mut(p as usize)
                    .ok_or_else(|| Error::shape("LabelGrid::point_labels", format!("point {p} beyond {n_points}")))?;
                *slot = self.classes[cell];
            }
        }
        Ok(out)
    }
}

/// Projects a cloud; on a cell collision the nearer point wins (first point on
/// exact ties).
pub fn project(cloud: &PointCloud, cfg: &GridConfig) -> Result<SphericalGrid> {
    cfg.validate()?;
    let mut grid = SphericalGrid::empty(*cfg);
    let mut best = vec![f64::INFINITY; cfg.cells()];
    for (i, p) in cloud.points().iter().enumerate() {
        let Some((row, col)) = cfg.cell_of(p.x as f64, p.y as f64, p.z as f64) else {
            continue;
        };
        let idx = row * cfg.width + col;
        let r = p.range();
        if r < best[idx] {
            best[idx] = r;
            grid.set_cell(idx, p, Some(i as u32));
        }
    }
    Ok(grid)
}

/// Carries per-point labels onto the grid through `point_index`.
pub fn project_labels(cloud: &PointCloud, grid: &SphericalGrid) -> Result<LabelGrid> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::InvalidArgument("point cloud has no labels".into()))?;
    let mut classes = vec![0u8; grid.config.cells()];
    for (idx, (&occ, src)) in grid.mask.iter().zip(&grid.point_index).enumerate() {
        match (occ, src) {
            (true, Some(i)) => {
                classes[idx] = *labels.get(*i as usize).ok_or_else(|| {
                    Error::shape("project_labels", format!("cell {idx} points at {i}, cloud has {}", labels.len()))
                })?;
            }
            (false, None) => {}
            _ => {
                return Err(Error::shape(
                    "project_labels",
                    format!("cell {idx} has no source point index"),
                ))
            }
        }
    }
    LabelGrid::new(grid.height(), grid.width(), classes, grid.mask.clone())
}

/// Per-cell empirical frequency of missing returns.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub height: usize,
    pub width: usize,
    pub eps: Vec<f64>,
    pub n_frames: usize,
}

impl NoiseModel {
    pub fn uniform(height: usize, width: usize, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!("noise frequency {eps} outside [0, 1]")));
        }
        Ok(NoiseModel {
            height,
            width,
            eps: vec![eps; height * width],
            n_frames: 0,
        })
    }
}

/// `eps[cell] = (1/n) * #{frames where the cell is empty}`.
pub fn estimate_noise(height: usize, width: usize, masks: &[&[bool]]) -> Result<NoiseModel> {
    if masks.is_empty() {
        return Err(Error::Empty("estimate_noise needs at least one mask"));
    }
    let n = height * width;
    let mut empty = vec![0u64; n];
    for (f, m) in masks.iter().enumerate() {
        if m.len() != n {
            return Err(Error::shape(
                "estimate_noise",
                format!("mask {f} has {} cells, expected {n}", m.len()),
            ));
        }
        for (e, &occ) in empty.iter_mut().zip(m.iter()) {
            *e += (!occ) as u64;
        }
    }
    let frames = masks.len() as f64;
    Ok(NoiseModel {
        height,
        width,
        eps: empty.into_iter().map(|e| e as f64 / frames).collect(),
        n_frames: masks.len(),
    })
}

/// Zeroes each occupied cell independently with probability `eps[cell]`.
/// One uniform draw is consumed per cell (occupied or not), so the outcome for
/// a cell depends only on the seed and its position.
pub fn inject_noise(grid: &SphericalGrid, model: &NoiseModel, seed: u64) -> Result<SphericalGrid> {
    if (model.height, model.width) != (grid.height(), grid.width()) {
        return Err(Error::shape(
            "inject_noise",
            format!(
                "model {}x{} vs grid {}x{}",
                model.height,
                model.width,
                grid.height(),
                grid.width()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = grid.clone();
    for idx in 0..grid.config.cells() {
        let u: f64 = rng.gen();
        if grid.mask[idx] && u < model.eps[idx] {
            out.clear_cell(idx);
        }
    }
    Ok(out)
}
