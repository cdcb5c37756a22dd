//! Ray-cast LiDAR over procedural scenes of boxes and vertical cylinders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::class::Class;
use crate::error::{Error, Result};
use crate::projection::{project, project_labels, GridConfig, LabelGrid, Point, PointCloud, SphericalGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder with flat caps.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

const SURFACE_EPS: f64 = 1e-9;

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Box { min, max } => (0..3).all(|d| max[d] > min[d] && min[d].is_finite() && max[d].is_finite()),
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => radius > 0.0 && z_max > z_min && center.iter().all(|v| v.is_finite()) && z_min.is_finite() && z_max.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate shape {self:?}")))
        }
    }

    /// Smallest `t > SURFACE_EPS` with `o + t·d` on the surface.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|&t| t > SURFACE_EPS)
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let mut best: Option<f64> = None;
                let mut take = |t: f64| {
                    if t > SURFACE_EPS && best.map_or(true, |b| t < b) {
                        best = Some(t);
                    }
                };
                let (px, py) = (o[0] - center[0], o[1] - center[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 0.0 {
                    let b = px * d[0] + py * d[1];
                    let c = px * px + py * py - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let z = o[2] + t * d[2];
                            if z >= z_min && z <= z_max {
                                take(t);
                            }
                        }
                    }
                }
                if d[2] != 0.0 {
                    for zc in [z_min, z_max] {
                        let t = (zc - o[2]) / d[2];
                        let (x, y) = (px + t * d[0], py + t * d[1]);
                        if x * x + y * y <= radius * radius {
                            take(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Distance from `p` to the surface (zero on it).
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Box { min, max } => {
                let mut outside = 0.0;
                let mut inside = f64::INFINITY;
                for a in 0..3 {
                    let e = (min[a] - p[a]).max(p[a] - max[a]);
                    if e > 0.0 {
                        outside += e * e;
                    }
                    inside = inside.min((p[a] - min[a]).min(max[a] - p[a]));
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let rho = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                let dr = rho - radius;
                let dz = (z_min - p[2]).max(p[2] - z_max);
                if dr <= 0.0 && dz <= 0.0 {
                    (-dr).min(-dz)
                } else {
                    (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
                }
            }
        }
    }

    /// Ground footprint as `[xmin, ymin, xmax, ymax]`.
    pub fn footprint(&self) -> [f64; 4] {
        match *self {
            Shape::Box { min, max } => [min[0], min[1], max[0], max[1]],
            Shape::Cylinder { center, radius, .. } => [
                center[0] - radius,
                center[1] - radius,
                center[0] + radius,
                center[1] + radius,
            ],
        }
    }

    pub fn center(&self) -> [f64; 3] {
        match *self {
            Shape::Box { min, max } => [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0, (min[2] + max[2]) / 2.0],
            Shape::Cylinder {
                center, z_min, z_max, ..
            } => [center[0], center[1], (z_min + z_max) / 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub class: Class,
    /// Nonzero; 0 is reserved for ground and misses.
    pub instance: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<Object>,
    /// Whether the plane `z = 0` is present.
    pub ground: bool,
}

impl Scene {
    pub fn new(objects: Vec<Object>, ground: bool) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for o in &objects {
            o.shape.validate()?;
            if o.class == Class::Background || o.instance == 0 {
                return Err(Error::InvalidArgument(format!(
                    "object {} of class {} needs a nonzero id and an object class",
                    o.instance, o.class
                )));
            }
            if !ids.insert(o.instance) {
                return Err(Error::InvalidArgument(format!("duplicate instance id {}", o.instance)));
            }
        }
        Ok(Scene { objects, ground })
    }

    /// One line per object: id, class, shape, center and bounding box.
    pub fn dump(&self) -> String {
        let mut s = format!("scene objects={} ground={}\n", self.objects.len(), self.ground);
        for o in &self.objects {
            let c = o.shape.center();
            let (kind, lo, hi) = match o.shape {
                Shape::Box { min, max } => ("box", min, max),
                Shape::Cylinder {
                    center,
                    radius,
                    z_min,
                    z_max,
                } => (
                    "cylinder",
                    [center[0] - radius, center[1] - radius, z_min],
                    [center[0] + radius, center[1] + radius, z_max],
                ),
            };
            s.push_str(&format!(
                "{} {} {} center {:.3},{:.3},{:.3} bbox {:.3},{:.3},{:.3} {:.3},{:.3},{:.3}\n",
                o.instance, o.class, kind, c[0], c[1], c[2], lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarConfig {
    pub rows: usize,
    pub cols: usize,
    pub zenith_min: f64,
    pub zenith_max: f64,
    pub azimuth_fov: f64,
    /// Sensor position in the scene frame.
    pub origin: [f64; 3],
    /// Downward tilt about the sensor's y axis, degrees.
    pub pitch: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig::from_grid(&GridConfig::default())
    }
}

impl LidarConfig {
    /// One ray through the center of every cell of `grid`.
    pub fn from_grid(grid: &GridConfig) -> Self {
        LidarConfig {
            rows: grid.height,
            cols: grid.width,
            zenith_min: grid.zenith_min,
            zenith_max: grid.zenith_max,
            azimuth_fov: grid.azimuth_fov,
            origin: [0.0, 0.0, 1.73],
            pitch: 0.0,
            max_range: 80.0,
        }
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            height: self.rows,
            width: self.cols,
            azimuth_fov: self.azimuth_fov,
            zenith_min: self.zenith_min,
            zenith_max: self.zenith_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        if !(self.max_range > 0.0) || !self.pitch.is_finite() || self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("lidar needs finite pose and positive max range".into()));
        }
        Ok(())
    }

    /// Unit ray direction in the sensor frame.
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        let (theta, phi) = self.grid().cell_center(row, col);
        let (t, p) = (theta.to_radians(), phi.to_radians());
        [t.cos() * p.cos(), t.cos() * p.sin(), t.sin()]
    }

    pub fn sensor_to_scene_dir(&self, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.pitch.to_radians().sin_cos();
        [c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]]
    }

    pub fn sensor_to_scene(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.sensor_to_scene_dir(p);
        [r[0] + self.origin[0], r[1] + self.origin[1], r[2] + self.origin[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: [f64; 3],
    /// Index into `scene.objects`, or `None` for ground.
    pub object: Option<usize>,
}

/// Nearest hit along `o + t·d` with `t <= max_t`.
pub fn cast_ray(scene: &Scene, o: [f64; 3], d: [f64; 3], max_t: f64) -> Option<Hit> {
    let mut best: Option<(f64, Option<usize>)> = None;
    for (i, obj) in scene.objects.iter().enumerate() {
        if let Some(t) = obj.shape.intersect(o, d) {
            if best.map_or(true, |(b, _)| t < b) {
                best = Some((t, Some(i)));
            }
        }
    }
    if scene.ground && d[2] < 0.0 {
        let t = -o[2] / d[2];
        if t > SURFACE_EPS && best.map_or(true, |(b, _)| t < b) {
            best = Some((t, None));
        }
    }
    let (t, object) = best.filter(|&(t, _)| t <= max_t)?;
    let point = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    Some(Hit { t, point, object })
}

pub fn intensity_of(class: Class) -> f32 {
    match class {
        Class::Car => 0.5,
        Class::Pedestrian => 0.3,
        Class::Cyclist => 0.4,
        Class::Background => 0.1,
    }
}

/// A simulated frame. Points are in the sensor frame.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Carries per-point class labels.
    pub cloud: PointCloud,
    /// Per-point instance id; 0 for ground.
    pub instances: Vec<u16>,
    /// Per-point `(row, col)` of the ray that produced it.
    pub rays: Vec<(usize, usize)>,
}

pub fn raycast(scene: &Scene, cfg: &LidarConfig) -> Result<Frame> {
    cfg.validate()?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    let mut rays = Vec::new();
    for row in 0..cfg.rows {
        for col in 0..cfg.cols {
            let ds = cfg.ray(row, col);
            let Some(hit) = cast_ray(scene, cfg.origin, cfg.sensor_to_scene_dir(ds), cfg.max_range) else {
                continue;
            };
            let (class, id) = match hit.object {
                Some(i) => (scene.objects[i].class, scene.objects[i].instance),
                None => (Class::Background, 0),
            };
            let p = [hit.t * ds[0], hit.t * ds[1], hit.t * ds[2]];
            points.push(Point::new(p[0] as f32, p[1] as f32, p[2] as f32, intensity_of(class)));
            labels.push(class.id());
            instances.push(id);
            rays.push((row, col));
        }
    }
    let cloud = PointCloud::new(points)?.with_labels(labels)?;
    Ok(Frame { cloud, instances, rays })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub cars: usize,
    pub pedestrians: usize,
    pub cyclists: usize,
    /// Ground distance range of object centers from the sensor.
    pub min_distance: f64,
    pub max_distance: f64,
    /// Half-angle of the placement wedge, degrees.
    pub half_angle: f64,
    /// Minimum clearance between footprints.
    pub gap: f64,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            cars: 4,
            pedestrians: 2,
            cyclists: 1,
            min_distance: 6.0,
            max_distance: 30.0,
            half_angle: 40.0,
            gap: 0.5,
            max_attempts: 1000,
        }
    }
}

fn overlaps(a: [f64; 4], b: [f64; 4], gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

/// Seeded scene with ground and non-overlapping objects in the forward wedge.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    if !(cfg.min_distance > 0.0 && cfg.max_distance > cfg.min_distance && cfg.half_angle > 0.0 && cfg.half_angle <= 45.0) {
        return Err(Error::InvalidArgument(format!("bad placement ranges {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = std::iter::repeat(Class::Car)
        .take(cfg.cars)
        .chain(std::iter::repeat(Class::Pedestrian).take(cfg.pedestrians))
        .chain(std::iter::repeat(Class::Cyclist).take(cfg.cyclists));
    let mut objects: Vec<Object> = Vec::new();
    for (n, class) in kinds.enumerate() {
        let instance = u16::try_from(n + 1).map_err(|_| Error::InvalidArgument("too many objects".into()))?;
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let r = rng.gen_range(cfg.min_distance..cfg.max_distance);
            let a = rng.gen_range(-cfg.half_angle..cfg.half_angle).to_radians();
            let (cx, cy) = (r * a.cos(), r * a.sin());
            let along_x = rng.gen_bool(0.5);
            let shape = match class {
                Class::Pedestrian => Shape::Cylinder {
                    center: [cx, cy],
                    radius: 0.3,
                    z_min: 0.0,
                    z_max: 1.7,
                },
                _ => {
                    let (l, w, h) = if class == Class::Car { (4.5, 1.8, 1.5) } else { (1.8, 0.6, 1.7) };
                    let (ex, ey) = if along_x { (l / 2.0, w / 2.0) } else { (w / 2.0, l / 2.0) };
                    Shape::Box {
                        min: [cx - ex, cy - ey, 0.0],
                        max: [cx + ex, cy + ey, h],
                    }
                }
            };
            let fp = shape.footprint();
            if objects.iter().all(|o| !overlaps(o.shape.footprint(), fp, cfg.gap)) {
                placed = Some(shape);
                break;
            }
        }
        let shape = placed.ok_or(Error::Placement(n))?;
        objects.push(Object { shape, class, instance });
    }
    Scene::new(objects, true)
}

/// A generated scene, its raycast and the projected grid with labels.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub scene: Scene,
    pub frame: Frame,
    pub grid: SphericalGrid,
    pub labels: LabelGrid,
    /// Per-cell instance id; 0 for ground and empty cells.
    pub instances: Vec<u16>,
}

pub fn synth_frame(seed: u64, gen: &GenConfig, lidar: &LidarConfig) -> Result<SynthFrame> {
    let scene = generate_scene(seed, gen)?;
    let frame = raycast(&scene, lidar)?;
    let grid = project(&frame.cloud, &lidar.grid())?;
    let labels = project_labels(&frame.cloud, &grid)?;
    let instances = crate::instance::project_instances(&frame.instances, &grid)?;
    Ok(SynthFrame {
        scene,
        frame,
        grid,
        labels,
        instances,
    })
}
