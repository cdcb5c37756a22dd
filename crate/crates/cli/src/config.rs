//! `key = value` configuration with a fixed key registry.

use std::fmt;
use std::path::Path;

use squeezeseg::crf::CrfParams;
use squeezeseg::instance::{ClusterConfig, DbscanParams};
use squeezeseg::network::Profile;
use squeezeseg::projection::GridConfig;
use squeezeseg::simulator::{GenConfig, LidarConfig};
use squeezeseg::{Class, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeights {
    /// Inverse class frequency over the training split, clamped.
    Inverse,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub class_weights: ClassWeights,
    /// Standardize input channels with statistics of the training split.
    pub input_norm: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 1,
            epochs: 30,
            class_weights: ClassWeights::Inverse,
            input_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub grid: GridConfig,
    pub profile: Profile,
    pub crf: CrfParams,
    pub cluster: ClusterConfig,
    pub train: TrainSettings,
    pub scene: GenConfig,
    pub sensor_height: f64,
    pub pitch: f64,
    pub max_range: f64,
}

impl Default for Config {
    fn default() -> Self {
        let lidar = LidarConfig::default();
        Config {
            grid: GridConfig::default(),
            profile: Profile::Toy,
            crf: CrfParams::new(NUM_CLASSES),
            cluster: ClusterConfig::default(),
            train: TrainSettings::default(),
            scene: GenConfig::default(),
            sensor_height: lidar.origin[2],
            pitch: lidar.pitch,
            max_range: lidar.max_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "config line {n}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("grid.height", "zenith bins, 1..=1024"),
    ("grid.width", "azimuth bins, 1..=8192"),
    ("grid.azimuth_fov", "horizontal field of view in degrees, (0, 360]"),
    ("grid.zenith_min", "lowest zenith angle in degrees"),
    ("grid.zenith_max", "highest zenith angle in degrees"),
    ("net.profile", "toy | paper-like"),
    ("crf.w1", "bilateral kernel weight, >= 0"),
    ("crf.w2", "spatial kernel weight, >= 0"),
    ("crf.sigma_alpha", "bilateral angular bandwidth in bins, > 0"),
    ("crf.sigma_beta", "bilateral distance bandwidth in meters, > 0"),
    ("crf.sigma_gamma", "spatial bandwidth in bins, > 0"),
    ("crf.iterations", "mean-field iterations, 1..=50"),
    ("cluster.car.eps", "DBSCAN radius for cars in meters, > 0"),
    ("cluster.car.min_pts", "DBSCAN density for cars, >= 1"),
    ("cluster.pedestrian.eps", "DBSCAN radius for pedestrians in meters, > 0"),
    ("cluster.pedestrian.min_pts", "DBSCAN density for pedestrians, >= 1"),
    ("cluster.cyclist.eps", "DBSCAN radius for cyclists in meters, > 0"),
    ("cluster.cyclist.min_pts", "DBSCAN density for cyclists, >= 1"),
    ("train.lr", "learning rate, > 0"),
    ("train.momentum", "heavy-ball momentum, [0, 1)"),
    ("train.batch_size", "frames per update, >= 1"),
    ("train.epochs", "passes over the training split, >= 1"),
    ("train.class_weights", "inverse | uniform"),
    ("train.input_norm", "true | false"),
    ("sim.cars", "cars per scene"),
    ("sim.pedestrians", "pedestrians per scene"),
    ("sim.cyclists", "cyclists per scene"),
    ("sim.min_distance", "nearest object distance in meters, > 0"),
    ("sim.max_distance", "farthest object distance in meters"),
    ("sim.half_angle", "placement wedge half-angle in degrees, (0, 90]"),
    ("sim.gap", "minimum clearance between objects in meters, >= 0"),
    ("sim.sensor_height", "sensor height above ground in meters"),
    ("sim.pitch", "downward sensor tilt in degrees, [-45, 45]"),
    ("sim.max_range", "maximum return range in meters, > 0"),
];

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn check<T: PartialOrd + fmt::Display + Copy>(v: T, ok: bool, rule: &str) -> Result<T, String> {
    if ok {
        Ok(v)
    } else {
        Err(format!("{v} violates {rule}"))
    }
}

fn positive(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    check(x, x.is_finite() && x > 0.0, "> 0")
}

fn non_negative(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    check(x, x.is_finite() && x >= 0.0, ">= 0")
}

fn finite(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    check(x, x.is_finite(), "finiteness")
}

fn count(v: &str, min: usize, max: usize) -> Result<usize, String> {
    let x: usize = num(v)?;
    check(x, (min..=max).contains(&x), &format!("range {min}..={max}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

impl Config {
    /// Defaults overridden by a config file (if any) and then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError {
                line: None,
                message: format!("{}: {e}", p.display()),
            })?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError {
                line: None,
                message: format!("override {o:?} is not key=value"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|message| ConfigError { line: None, message })?;
        }
        cfg.validate().map_err(|message| ConfigError { line: None, message })?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message| ConfigError { line: Some(n + 1), message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let r = |e: String| format!("{key}: {e}");
        match key {
            "grid.height" => self.grid.height = count(v, 1, 1024).map_err(r)?,
            "grid.width" => self.grid.width = count(v, 1, 8192).map_err(r)?,
            "grid.azimuth_fov" => {
                let x = positive(v).map_err(r)?;
                self.grid.azimuth_fov = check(x, x <= 360.0, "<= 360").map_err(r)?;
            }
            "grid.zenith_min" => self.grid.zenith_min = finite(v).map_err(r)?,
            "grid.zenith_max" => self.grid.zenith_max = finite(v).map_err(r)?,
            "net.profile" => self.profile = v.parse().map_err(|_| r(format!("unknown profile {v:?}")))?,
            "crf.w1" => self.crf.w1 = non_negative(v).map_err(r)?,
            "crf.w2" => self.crf.w2 = non_negative(v).map_err(r)?,
            "crf.sigma_alpha" => self.crf.sigma_alpha = positive(v).map_err(r)?,
            "crf.sigma_beta" => self.crf.sigma_beta = positive(v).map_err(r)?,
            "crf.sigma_gamma" => self.crf.sigma_gamma = positive(v).map_err(r)?,
            "crf.iterations" => self.crf.iterations = count(v, 1, 50).map_err(r)?,
            "train.lr" => self.train.lr = positive(v).map_err(r)? as f32,
            "train.momentum" => {
                let x = non_negative(v).map_err(r)?;
                self.train.momentum = check(x, x < 1.0, "< 1").map_err(r)? as f32;
            }
            "train.batch_size" => self.train.batch_size = count(v, 1, 1 << 20).map_err(r)?,
            "train.epochs" => self.train.epochs = count(v, 1, 1 << 20).map_err(r)?,
            "train.class_weights" => {
                self.train.class_weights = match v {
                    "inverse" => ClassWeights::Inverse,
                    "uniform" => ClassWeights::Uniform,
                    _ => return Err(r(format!("expected inverse or uniform, got {v:?}"))),
                }
            }
            "train.input_norm" => self.train.input_norm = boolean(v).map_err(r)?,
            "sim.cars" => self.scene.cars = count(v, 0, 100).map_err(r)?,
            "sim.pedestrians" => self.scene.pedestrians = count(v, 0, 100).map_err(r)?,
            "sim.cyclists" => self.scene.cyclists = count(v, 0, 100).map_err(r)?,
            "sim.min_distance" => self.scene.min_distance = positive(v).map_err(r)?,
            "sim.max_distance" => self.scene.max_distance = positive(v).map_err(r)?,
            "sim.half_angle" => {
                let x = positive(v).map_err(r)?;
                self.scene.half_angle = check(x, x <= 90.0, "<= 90").map_err(r)?;
            }
            "sim.gap" => self.scene.gap = non_negative(v).map_err(r)?,
            "sim.sensor_height" => self.sensor_height = finite(v).map_err(r)?,
            "sim.pitch" => {
                let x = finite(v).map_err(r)?;
                self.pitch = check(x, x.abs() <= 45.0, "[-45, 45]").map_err(r)?;
            }
            "sim.max_range" => self.max_range = positive(v).map_err(r)?,
            _ => return self.set_cluster(key, v),
        }
        Ok(())
    }

    fn set_cluster(&mut self, key: &str, v: &str) -> Result<(), String> {
        let unknown = || {
            let names: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
            format!("unknown key {key:?}; valid keys: {}", names.join(", "))
        };
        let rest = key.strip_prefix("cluster.").ok_or_else(unknown)?;
        let (class, field) = rest.split_once('.').ok_or_else(unknown)?;
        let class = Class::OBJECTS.into_iter().find(|c| c.name() == class).ok_or_else(unknown)?;
        let p: &mut DbscanParams = &mut self.cluster.params[class.index()];
        let r = |e: String| format!("{key}: {e}");
        match field {
            "eps" => p.eps = positive(v).map_err(r)?,
            "min_pts" => p.min_pts = count(v, 1, 1 << 20).map_err(r)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Cross-key checks, run after all keys are applied.
    pub fn validate(&self) -> Result<(), String> {
        self.grid.validate().map_err(|e| e.to_string())?;
        self.crf.validate().map_err(|e| e.to_string())?;
        self.lidar().validate().map_err(|e| e.to_string())?;
        if self.scene.min_distance > self.scene.max_distance {
            return Err("sim.min_distance exceeds sim.max_distance".into());
        }
        let down = squeezeseg::network::DOWNSAMPLE;
        if self.grid.width % down != 0 {
            return Err(format!("grid.width must be a multiple of {down} for the network"));
        }
        Ok(())
    }

    pub fn lidar(&self) -> LidarConfig {
        let mut l = LidarConfig::from_grid(&self.grid);
        l.origin = [0.0, 0.0, self.sensor_height];
        l.pitch = self.pitch;
        l.max_range = self.max_range;
        l
    }
}
