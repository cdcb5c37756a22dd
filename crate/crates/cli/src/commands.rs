use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use squeezeseg::crf;
use squeezeseg::eval::{self, FrameEval};
use squeezeseg::instance::{extract_instances, point_instances, project_instances, InstanceSet};
use squeezeseg::io::{self, Checkpoint};
use squeezeseg::network::{
    evaluate_loss, inverse_frequency_weights, InputNorm, NetworkParams, TrainConfig, TrainFrame, Trainer,
};
use squeezeseg::projection::{self, LabelGrid, PointCloud, SphericalGrid};
use squeezeseg::render;
use squeezeseg::simulator::synth_frame;
use squeezeseg::tensor::{tnsr, Tensor};
use squeezeseg::{Class, NUM_CLASSES};

use crate::config::{ClassWeights, Config};
use crate::manifest::{Entry, Manifest, Sample, Split};
use crate::{CliError, CliResult};

pub struct Context {
    cfg: Config,
    workers: usize,
    pool: rayon::ThreadPool,
}

fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn with_path<T>(p: &Path, r: squeezeseg::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let msg = format!("{}: {e}", p.display());
        if e.is_numeric() {
            CliError::Numeric(msg)
        } else {
            CliError::Data(msg)
        }
    })
}

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| data(format!("{}: {e}", p.display())))
}

fn write(p: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(p, bytes).map_err(|e| data(format!("{}: {e}", p.display())))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn f32_bytes(t: &Tensor<f32>) -> impl Iterator<Item = [u8; 4]> + '_ {
    t.data().iter().map(|v| v.to_le_bytes())
}

impl Context {
    pub fn new(cfg: Config, workers: usize) -> CliResult<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
        Ok(Context { cfg, workers, pool })
    }

    /// Order-preserving parallel map over frames.
    fn par_map<I: Sync, R: Send>(&self, items: &[I], f: impl Fn(&I) -> CliResult<R> + Sync + Send) -> CliResult<Vec<R>> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    fn project_cloud(&self, cloud: &PointCloud) -> squeezeseg::Result<SphericalGrid> {
        projection::project(cloud, &self.cfg.grid)
    }

    fn load_frame(&self, e: &Entry) -> CliResult<(Sample, SphericalGrid, LabelGrid)> {
        let sample = with_path(&e.cloud, e.load())?;
        let grid = self.project_cloud(&sample.cloud)?;
        let labels = projection::project_labels(&sample.cloud, &grid)?;
        Ok((sample, grid, labels))
    }

    fn load_manifest(&self, path: &Path, split: Option<Split>) -> CliResult<Vec<Entry>> {
        let m = Manifest::load(path)?;
        let entries: Vec<Entry> = m.select(split).into_iter().cloned().collect();
        if entries.is_empty() {
            return Err(data(format!("{}: no frames selected", path.display())));
        }
        Ok(entries)
    }

    pub fn project(&self, cloud: &Path, labels: Option<&Path>, out: &Path, labels_out: Option<&Path>) -> CliResult<()> {
        let mut c = with_path(cloud, io::read_cloud(cloud))?;
        if let Some(l) = labels {
            c = with_path(l, io::read_labels(l).and_then(|v| c.with_labels(v)))?;
        }
        let grid = self.project_cloud(&c)?;
        with_path(out, io::save_grid(out, &grid))?;
        if let Some(lo) = labels_out {
            let lg = projection::project_labels(&c, &grid)?;
            with_path(lo, io::save_label_grid(lo, &lg))?;
        }
        println!(
            "projected {} of {} points into {}x{} cells",
            grid.occupied(),
            c.len(),
            grid.height(),
            grid.width()
        );
        Ok(())
    }

    pub fn estimate_noise(&self, manifest: &Path, out: &Path) -> CliResult<()> {
        let entries = self.load_manifest(manifest, None)?;
        let masks = self.par_map(&entries, |e| {
            let cloud = with_path(&e.cloud, io::read_cloud(&e.cloud))?;
            Ok(self.project_cloud(&cloud)?.mask)
        })?;
        let refs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
        let model = projection::estimate_noise(self.cfg.grid.height, self.cfg.grid.width, &refs)?;
        with_path(out, io::save_noise_model(out, &model))?;
        let mean = model.eps.iter().sum::<f64>() / model.eps.len() as f64;
        println!("noise model from {} frames, mean empty fraction {mean:.4}", model.n_frames);
        Ok(())
    }

    pub fn synth(&self, out: &Path, frames: usize, val: usize, seed: u64) -> CliResult<()> {
        if frames + val == 0 {
            return Err(CliError::Usage("synth needs at least one frame".into()));
        }
        create_dir(out)?;
        let jobs: Vec<(Split, u64)> = (0..frames)
            .map(|i| (Split::Train, seed + i as u64))
            .chain((0..val).map(|i| (Split::Val, seed + (frames + i) as u64)))
            .collect();
        let lidar = self.cfg.lidar();
        let entries = self.par_map(&jobs, |&(split, s)| {
            let f = synth_frame(s, &self.cfg.scene, &lidar)?;
            let stem = format!("{}_{s:06}", split.name());
            let path = |ext: &str| out.join(format!("{stem}.{ext}"));
            write(&path("bin"), &io::cloud_to_bytes(&f.frame.cloud))?;
            write(&path("labels"), f.frame.cloud.labels().unwrap_or(&[]))?;
            write(&path("instances"), &io::instances_to_bytes(&f.frame.instances))?;
            write(&path("scene"), f.scene.dump().as_bytes())?;
            Ok(Entry {
                split,
                cloud: path("bin"),
                labels: path("labels"),
                instances: Some(path("instances")),
            })
        })?;
        let manifest = Manifest { entries };
        let mpath = out.join("manifest.tsv");
        manifest.save(&mpath)?;
        println!("wrote {frames} train and {val} val frames to {}", mpath.display());
        Ok(())
    }

    fn train_frames(&self, entries: &[Entry]) -> CliResult<Vec<TrainFrame>> {
        self.par_map(entries, |e| {
            let (_, grid, labels) = self.load_frame(e)?;
            Ok(TrainFrame { grid, labels })
        })
    }

    pub fn train(
        &self,
        manifest: &Path,
        out: &Path,
        seed: u64,
        epochs: Option<usize>,
        noise: Option<&Path>,
    ) -> CliResult<()> {
        let m = Manifest::load(manifest)?;
        let pick = |s| m.select(Some(s)).into_iter().cloned().collect::<Vec<_>>();
        let train = self.train_frames(&pick(Split::Train))?;
        let val = self.train_frames(&pick(Split::Val))?;
        if train.is_empty() {
            return Err(data(format!("{}: no training frames", manifest.display())));
        }
        let t = &self.cfg.train;
        let epochs = epochs.unwrap_or(t.epochs);
        if epochs == 0 {
            return Err(CliError::Usage("--epochs must be at least 1".into()));
        }
        let mut net = NetworkParams::<f32>::init(self.cfg.profile, NUM_CLASSES, seed)?;
        if t.input_norm {
            let grids: Vec<&SphericalGrid> = train.iter().map(|f| &f.grid).collect();
            net.input_norm = InputNorm::fit(&grids)?;
        }
        let class_weights = match t.class_weights {
            ClassWeights::Inverse => inverse_frequency_weights(&train.iter().map(|f| &f.labels).collect::<Vec<_>>()),
            ClassWeights::Uniform => [1.0; NUM_CLASSES],
        };
        let noise = match noise {
            Some(p) => Some(with_path(p, io::load_noise_model(p))?),
            None => None,
        };
        let mut trainer = Trainer::new(TrainConfig {
            lr: t.lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            class_weights,
            noise,
        })?;
        println!(
            "training {} profile on {} frames ({} val), weights {:?}",
            self.cfg.profile,
            train.len(),
            val.len(),
            class_weights
        );
        for epoch in 0..epochs {
            let loss = trainer.train_epoch(&train, &mut net, seed.wrapping_add(epoch as u64))?;
            if val.is_empty() {
                println!("epoch {epoch} train_loss {loss:.6}");
            } else {
                let v = evaluate_loss(&val, &net, &class_weights)?;
                println!("epoch {epoch} train_loss {loss:.6} val_loss {v:.6}");
            }
        }
        let ckpt = Checkpoint {
            network: net,
            crf: self.cfg.crf.clone(),
        };
        with_path(out, ckpt.save(out))?;
        println!("saved {}", out.display());
        Ok(())
    }

    pub fn infer(
        &self,
        manifest: &Path,
        checkpoint: &Path,
        out: &Path,
        split: Option<Split>,
        use_crf: bool,
        save_logits: bool,
    ) -> CliResult<()> {
        let ckpt = with_path(checkpoint, Checkpoint::load(checkpoint))?;
        let entries = self.load_manifest(manifest, split)?;
        create_dir(out)?;
        let done = self.par_map(&entries, |e| {
            let sample = with_path(&e.cloud, e.load())?;
            let grid = self.project_cloud(&sample.cloud)?;
            let (logits, probs) = ckpt.network.forward(&grid)?;
            let probs = if use_crf { crf::refine(&logits, &grid, &ckpt.crf)? } else { probs };
            let labels = LabelGrid::from_probs(&probs, &grid.mask)?;
            let stem = e.stem();
            let lpath = out.join(format!("{stem}.labels"));
            write(&lpath, &labels.point_labels(&grid, sample.cloud.len())?)?;
            if save_logits {
                let p = out.join(format!("{stem}.logits.tnsr"));
                with_path(&p, tnsr::save(&p, &logits))?;
            }
            Ok(Entry {
                split: e.split,
                cloud: e.cloud.clone(),
                labels: lpath,
                instances: None,
            })
        })?;
        Manifest { entries: done }.save(&out.join("manifest.tsv"))?;
        println!(
            "labeled {} frames{} into {}",
            entries.len(),
            if use_crf { " with CRF" } else { "" },
            out.display()
        );
        Ok(())
    }

    pub fn refine(&self, cloud: &Path, logits: &Path, out: &Path, probs_out: Option<&Path>) -> CliResult<()> {
        let c = with_path(cloud, io::read_cloud(cloud))?;
        let grid = self.project_cloud(&c)?;
        let z = with_path(logits, tnsr::load(logits))?;
        if z.dims() != [grid.height(), grid.width(), NUM_CLASSES] {
            return Err(data(format!(
                "{}: logits {:?} do not match a {}x{}x{NUM_CLASSES} grid",
                logits.display(),
                z.dims(),
                grid.height(),
                grid.width()
            )));
        }
        let probs = crf::refine(&z, &grid, &self.cfg.crf)?;
        let labels = LabelGrid::from_probs(&probs, &grid.mask)?;
        write(out, &labels.point_labels(&grid, c.len())?)?;
        if let Some(p) = probs_out {
            with_path(p, tnsr::save(p, &probs))?;
        }
        Ok(())
    }

    pub fn cluster(&self, manifest: &Path, out: &Path, split: Option<Split>) -> CliResult<()> {
        let entries = self.load_manifest(manifest, split)?;
        create_dir(out)?;
        let done = self.par_map(&entries, |e| {
            let (sample, grid, labels) = self.load_frame(e)?;
            let set = extract_instances(&labels, &grid, &self.cfg.cluster)?;
            let ids = point_instances(&set, &grid, sample.cloud.len())?;
            let ipath = out.join(format!("{}.instances", e.stem()));
            write(&ipath, &io::instances_to_bytes(&ids))?;
            let counts = Class::OBJECTS.map(|c| set.instances(c).len());
            Ok((
                Entry {
                    instances: Some(ipath),
                    ..e.clone()
                },
                counts,
            ))
        })?;
        let mut totals = [0usize; 3];
        for (_, c) in &done {
            for k in 0..3 {
                totals[k] += c[k];
            }
        }
        let entries = done.into_iter().map(|(e, _)| e).collect();
        Manifest { entries }.save(&out.join("manifest.tsv"))?;
        println!("instances: car {} pedestrian {} cyclist {}", totals[0], totals[1], totals[2]);
        Ok(())
    }

    pub fn eval(&self, gt: &Path, pred: &Path, split: Option<Split>, out: Option<&Path>) -> CliResult<()> {
        let g = self.load_manifest(gt, split)?;
        let p = self.load_manifest(pred, split)?;
        if g.len() != p.len() {
            return Err(data(format!("{} ground-truth frames but {} predictions", g.len(), p.len())));
        }
        let pairs: Vec<(Entry, Entry)> = g.into_iter().zip(p).collect();
        let frames = self.par_map(&pairs, |(ge, pe)| {
            let (gs, grid, gl) = self.load_frame(ge)?;
            let ps = with_path(&pe.cloud, pe.load())?;
            if ps.cloud.points() != gs.cloud.points() {
                return Err(data(format!(
                    "{} and {} are different clouds",
                    ge.cloud.display(),
                    pe.cloud.display()
                )));
            }
            let pl = projection::project_labels(&ps.cloud, &grid)?;
            let inst = |labels: &LabelGrid, ids: &Option<Vec<u16>>| -> CliResult<InstanceSet> {
                Ok(match ids {
                    Some(ids) => InstanceSet::from_ids(labels, &project_instances(ids, &grid)?)?,
                    None => InstanceSet::empty(grid.height(), grid.width()),
                })
            };
            let gi = inst(&gl, &gs.instances)?;
            let pi = inst(&pl, &ps.instances)?;
            Ok((pl, gl, pi, gi))
        })?;
        let views: Vec<FrameEval> = frames
            .iter()
            .map(|(pl, gl, pi, gi)| FrameEval {
                pred_labels: pl,
                gt_labels: gl,
                pred_instances: pi,
                gt_instances: gi,
            })
            .collect();
        let report = eval::report(&views)?;
        print!("{}", report.to_table());
        if let Some(o) = out {
            write(o, report.to_key_values().as_bytes())?;
        }
        Ok(())
    }

    pub fn bench(&self, frames: usize, seed: u64, checkpoint: Option<&Path>) -> CliResult<()> {
        if frames == 0 {
            return Err(CliError::Usage("--frames must be at least 1".into()));
        }
        let lidar = self.cfg.lidar();
        let seeds: Vec<u64> = (0..frames as u64).map(|i| seed + i).collect();
        let grids = self.par_map(&seeds, |&s| Ok(synth_frame(s, &self.cfg.scene, &lidar)?.grid))?;
        let (net, crf_params) = match checkpoint {
            Some(p) => {
                let c = with_path(p, Checkpoint::load(p))?;
                (c.network, c.crf)
            }
            None => {
                let mut net = NetworkParams::<f32>::init(self.cfg.profile, NUM_CLASSES, seed)?;
                net.input_norm = InputNorm::fit(&grids.iter().collect::<Vec<_>>())?;
                (net, self.cfg.crf.clone())
            }
        };
        let runs = self.par_map(&grids, |g| {
            let t0 = Instant::now();
            let (logits, probs) = net.forward(g)?;
            let t1 = Instant::now();
            let refined = crf::refine(&logits, g, &crf_params)?;
            let t2 = Instant::now();
            let mut h = Sha256::new();
            for b in f32_bytes(&probs).chain(f32_bytes(&refined)) {
                h.update(b);
            }
            let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
            Ok((ms(t1 - t0), ms(t2 - t0), h.finalize()))
        })?;
        let mut digest = Sha256::new();
        for (_, _, d) in &runs {
            digest.update(d);
        }
        let digest: String = digest.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let forward: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let total: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let (fm, fs) = mean_std(&forward);
        let (tm, ts) = mean_std(&total);
        println!(
            "bench frames={frames} workers={} profile={} grid={}x{}",
            self.workers, net.profile, self.cfg.grid.height, self.cfg.grid.width
        );
        println!("{:<12} {:>12} {:>12}", "stage", "mean_ms", "std_ms");
        println!("{:<12} {fm:>12.3} {fs:>12.3}", "forward");
        println!("{:<12} {tm:>12.3} {ts:>12.3}", "forward+crf");
        println!("digest {digest}");
        Ok(())
    }

    pub fn viz(&self, cloud: &Path, labels: Option<&Path>, out: &Path) -> CliResult<()> {
        let mut c = with_path(cloud, io::read_cloud(cloud))?;
        let grid;
        let img = match labels {
            Some(l) => {
                c = with_path(l, io::read_labels(l).and_then(|v| c.with_labels(v)))?;
                grid = self.project_cloud(&c)?;
                render::label_ppm(&projection::project_labels(&c, &grid)?)
            }
            None => {
                grid = self.project_cloud(&c)?;
                render::range_ppm(&grid, self.cfg.max_range as f32)
            }
        };
        write(out, &img)?;
        println!("wrote {}x{} image to {}", grid.width(), grid.height(), out.display());
        Ok(())
    }
}
