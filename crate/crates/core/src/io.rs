//! On-disk formats: point clouds, per-point labels, grids and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::class::NUM_CLASSES;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::network::{InputNorm, NetworkParams, Profile};
use crate::projection::{GridConfig, LabelGrid, NoiseModel, Point, PointCloud, SphericalGrid, CHANNELS};
use crate::tensor::{tnsr, Tensor};

/// Little-endian `f32 x, y, z, intensity` per point.
pub fn cloud_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn cloud_from_bytes(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!("point file of {} bytes is not a multiple of 16", bytes.len())));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let points = bytes
        .chunks_exact(16)
        .map(|c| Point::new(f(&c[0..]), f(&c[4..]), f(&c[8..]), f(&c[12..])))
        .collect();
    PointCloud::new(points)
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    cloud_from_bytes(&fs::read(path)?)
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    Ok(fs::write(path, cloud_to_bytes(cloud))?)
}

/// One class byte per point.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    Ok(fs::write(path, labels)?)
}

/// Little-endian u16 per point.
pub fn instances_from_bytes(bytes: &[u8]) -> Result<Vec<u16>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Format("instance file has an odd byte count".into()));
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

pub fn instances_to_bytes(ids: &[u16]) -> Vec<u8> {
    ids.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    instances_from_bytes(&fs::read(path)?)
}

pub fn write_instances(path: impl AsRef<Path>, ids: &[u16]) -> Result<()> {
    Ok(fs::write(path, instances_to_bytes(ids))?)
}

/// `[H, W, 6]`: the five feature channels followed by occupancy.
pub fn grid_to_tensor(grid: &SphericalGrid) -> Tensor<f32> {
    let mut data = Vec::with_capacity(grid.mask.len() * (CHANNELS + 1));
    for (i, &m) in grid.mask.iter().enumerate() {
        data.extend_from_slice(grid.cell(i));
        data.push(if m { 1.0 } else { 0.0 });
    }
    Tensor::from_vec(&[grid.height(), grid.width(), CHANNELS + 1], data).expect("grid dims are positive")
}

/// Inverse of [`grid_to_tensor`]; the angular layout comes from `config`.
pub fn grid_from_tensor(t: &Tensor<f32>, config: &GridConfig) -> Result<SphericalGrid> {
    let d = t.dims();
    if d.len() != 3 || d[2] != CHANNELS + 1 {
        return Err(Error::Format(format!("grid tensor has dims {d:?}")));
    }
    let cfg = GridConfig {
        height: d[0],
        width: d[1],
        ..*config
    };
    let mut features = Vec::with_capacity(d[0] * d[1] * CHANNELS);
    let mut mask = Vec::with_capacity(d[0] * d[1]);
    for cell in t.data().chunks_exact(CHANNELS + 1) {
        features.extend_from_slice(&cell[..CHANNELS]);
        mask.push(match cell[CHANNELS] {
            v if v == 1.0 => true,
            v if v == 0.0 => false,
            v => return Err(Error::Format(format!("occupancy value {v}"))),
        });
    }
    SphericalGrid::from_parts(cfg, Tensor::from_vec(&[d[0], d[1], CHANNELS], features)?, mask)
}

pub fn save_grid(path: impl AsRef<Path>, grid: &SphericalGrid) -> Result<()> {
    tnsr::save(path, &grid_to_tensor(grid))
}

pub fn load_grid(path: impl AsRef<Path>, config: &GridConfig) -> Result<SphericalGrid> {
    grid_from_tensor(&tnsr::load(path)?, config)
}

/// `[H, W, 2]`: class id and occupancy.
pub fn label_grid_to_tensor(labels: &LabelGrid) -> Tensor<f32> {
    let data = labels
        .classes()
        .iter()
        .zip(labels.mask())
        .flat_map(|(&c, &m)| [c as f32, if m { 1.0 } else { 0.0 }])
        .collect();
    Tensor::from_vec(&[labels.height(), labels.width(), 2], data).expect("label grid dims are positive")
}

pub fn label_grid_from_tensor(t: &Tensor<f32>) -> Result<LabelGrid> {
    let d = t.dims();
    if d.len() != 3 || d[2] != 2 {
        return Err(Error::Format(format!("label tensor has dims {d:?}")));
    }
    let mut classes = Vec::with_capacity(d[0] * d[1]);
    let mut mask = Vec::with_capacity(d[0] * d[1]);
    for cell in t.data().chunks_exact(2) {
        if cell[0].fract() != 0.0 || !(0.0..NUM_CLASSES as f32).contains(&cell[0]) || (cell[1] != 0.0 && cell[1] != 1.0) {
            return Err(Error::Format(format!("label cell {cell:?}")));
        }
        classes.push(cell[0] as u8);
        mask.push(cell[1] == 1.0);
    }
    LabelGrid::new(d[0], d[1], classes, mask)
}

pub fn save_label_grid(path: impl AsRef<Path>, labels: &LabelGrid) -> Result<()> {
    tnsr::save(path, &label_grid_to_tensor(labels))
}

pub fn load_label_grid(path: impl AsRef<Path>) -> Result<LabelGrid> {
    label_grid_from_tensor(&tnsr::load(path)?)
}

/// Two records: `eps` as `[H, W]`, then the frame count as `[1]`.
pub fn save_noise_model(path: impl AsRef<Path>, model: &NoiseModel) -> Result<()> {
    let mut out = Vec::new();
    let eps = Tensor::from_vec(&[model.height, model.width], model.eps.iter().map(|&v| v as f32).collect())?;
    tnsr::write(&mut out, &eps)?;
    tnsr::write(&mut out, &Tensor::from_vec(&[1], vec![model.n_frames as f32])?)?;
    Ok(fs::write(path, out)?)
}

pub fn load_noise_model(path: impl AsRef<Path>) -> Result<NoiseModel> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let eps = tnsr::read(&mut r)?;
    let n = tnsr::read(&mut r)?;
    if eps.rank() != 2 || n.len() != 1 {
        return Err(Error::Format("noise model records have the wrong shape".into()));
    }
    if eps.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("noise frequency outside [0, 1]".into()));
    }
    Ok(NoiseModel {
        height: eps.dims()[0],
        width: eps.dims()[1],
        eps: eps.data().iter().map(|&v| v as f64).collect(),
        n_frames: n.data()[0] as usize,
    })
}

pub const CHECKPOINT_MAGIC: &str = "SQUEEZESEG-CHECKPOINT 1";

/// Trained network weights plus the CRF settings used with them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: NetworkParams<f32>,
    pub crf: CrfParams,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let mut head = String::new();
        writeln!(head, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(head, "profile {}", net.profile).unwrap();
        writeln!(head, "num_classes {}", net.num_classes).unwrap();
        writeln!(head, "input_mean {}", join(&net.input_norm.mean)).unwrap();
        writeln!(head, "input_std {}", join(&net.input_norm.std)).unwrap();
        let c = &self.crf;
        writeln!(head, "crf.w1 {}", c.w1).unwrap();
        writeln!(head, "crf.w2 {}", c.w2).unwrap();
        writeln!(head, "crf.sigma_alpha {}", c.sigma_alpha).unwrap();
        writeln!(head, "crf.sigma_beta {}", c.sigma_beta).unwrap();
        writeln!(head, "crf.sigma_gamma {}", c.sigma_gamma).unwrap();
        writeln!(head, "crf.iterations {}", c.iterations).unwrap();
        writeln!(head, "crf.compat {}", join(&c.compat)).unwrap();
        let mut payload = Vec::new();
        for (name, t) in net.params() {
            let bytes = tnsr::to_bytes(t);
            let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
            writeln!(head, "tensor {name} {} {} {}", dims.join(","), payload.len(), bytes.len()).unwrap();
            payload.extend_from_slice(&bytes);
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(format!("checkpoint: {m}"));
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| fmt("missing end line".into()))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt("header is not utf-8".into()))?;
        let payload = &bytes[end + 5..];
        let mut lines = head.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(fmt("bad magic line".into()));
        }
        let mut meta = std::collections::HashMap::new();
        let mut tensors = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').ok_or_else(|| fmt(format!("bad line {line:?}")))?;
            if key == "tensor" {
                tensors.push(rest.to_string());
            } else if meta.insert(key.to_string(), rest.to_string()).is_some() {
                return Err(fmt(format!("duplicate key {key}")));
            }
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| fmt(format!("missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.trim().parse().map_err(|_| fmt(format!("bad number for {k}"))) };
        let nums = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| fmt(format!("bad number in {k}"))))
                .collect()
        };
        let profile: Profile = get("profile")?.parse().map_err(|_| fmt("bad profile".into()))?;
        let k = num("num_classes")? as usize;
        let arr5 = |k: &str| -> Result<[f64; CHANNELS]> {
            nums(k)?.try_into().map_err(|_| fmt(format!("{k} needs {CHANNELS} values")))
        };
        let mut network = NetworkParams::<f32>::init(profile, k, 0)?;
        network.input_norm = InputNorm {
            mean: arr5("input_mean")?,
            std: arr5("input_std")?,
        };
        let crf = CrfParams {
            w1: num("crf.w1")?,
            w2: num("crf.w2")?,
            sigma_alpha: num("crf.sigma_alpha")?,
            sigma_beta: num("crf.sigma_beta")?,
            sigma_gamma: num("crf.sigma_gamma")?,
            num_classes: k,
            compat: nums("crf.compat")?,
            iterations: num("crf.iterations")? as usize,
        };
        crf.validate()?;

        let mut slots = network.params_mut();
        if tensors.len() != slots.len() {
            return Err(fmt(format!("{} tensors, network has {}", tensors.len(), slots.len())));
        }
        for line in &tensors {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [name, _dims, off, len] = f[..] else {
                return Err(fmt(format!("bad tensor line {line:?}")));
            };
            let (off, len): (usize, usize) = match (off.parse(), len.parse()) {
                (Ok(o), Ok(l)) => (o, l),
                _ => return Err(fmt(format!("bad tensor extent in {line:?}"))),
            };
            let bytes = payload
                .get(off..off.saturating_add(len))
                .ok_or_else(|| fmt(format!("tensor {name} past end of file")))?;
            let t = tnsr::from_bytes(bytes)?;
            let slot = slots
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| fmt(format!("unknown tensor {name}")))?;
            if slot.1.dims() != t.dims() {
                return Err(fmt(format!("tensor {name} has dims {:?}, expected {:?}", t.dims(), slot.1.dims())));
            }
            slot.1.data_mut().copy_from_slice(t.data());
        }
        drop(slots);
        Ok(Checkpoint { network, crf })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
