//! Browser bindings: simulate a scan, corrupt its labels, refine them with
//! the CRF and knock out returns. Images come back as RGBA bytes for a
//! canvas `ImageData`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use squeezeseg::crf::{self, CrfParams};
use squeezeseg::projection::{inject_noise, GridConfig, LabelGrid, NoiseModel, SphericalGrid};
use squeezeseg::render;
use squeezeseg::simulator::{synth_frame, GenConfig, LidarConfig};
use squeezeseg::{Tensor, NUM_CLASSES};

/// Probability kept on the assigned class of every corrupted-map cell.
const CONFIDENCE: f64 = 0.6;

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn msg(e: squeezeseg::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    lidar: LidarConfig,
    /// Scan as simulated, before any dropout.
    clean: SphericalGrid,
    clean_truth: LabelGrid,
    grid: SphericalGrid,
    truth: LabelGrid,
    logits: Tensor<f64>,
    noisy: LabelGrid,
    refined: LabelGrid,
}

#[wasm_bindgen]
impl Demo {
    /// Simulated scene `seed` seen by a 64-row sensor `width` bins wide.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, width: u32) -> Result<Demo, String> {
        let grid = GridConfig {
            width: width as usize,
            ..GridConfig::default()
        };
        grid.validate().map_err(msg)?;
        let lidar = LidarConfig::from_grid(&grid);
        let f = synth_frame(seed as u64, &GenConfig::default(), &lidar).map_err(msg)?;
        let mut d = Demo {
            lidar,
            clean: f.grid.clone(),
            clean_truth: f.labels.clone(),
            grid: f.grid,
            truth: f.labels.clone(),
            logits: Tensor::zeros(&[1, 1, NUM_CLASSES]),
            noisy: f.labels.clone(),
            refined: f.labels,
        };
        d.corrupt(0.0, 0)?;
        Ok(d)
    }

    pub fn width(&self) -> u32 {
        self.grid.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.grid.height() as u32
    }

    pub fn occupied(&self) -> u32 {
        self.grid.occupied() as u32
    }

    pub fn range_image(&self) -> Vec<u8> {
        rgba(&render::range_rgb(&self.grid, self.lidar.max_range as f32))
    }

    pub fn truth_image(&self) -> Vec<u8> {
        rgba(&render::label_rgb(&self.truth))
    }

    pub fn noisy_image(&self) -> Vec<u8> {
        rgba(&render::label_rgb(&self.noisy))
    }

    pub fn refined_image(&self) -> Vec<u8> {
        rgba(&render::label_rgb(&self.refined))
    }

    /// Drops each return of the clean scan with probability `eps`; the
    /// label map is re-corrupted with `fraction` afterwards.
    pub fn drop_returns(&mut self, eps: f64, seed: u32, fraction: f64) -> Result<u32, String> {
        let model = NoiseModel::uniform(self.clean.height(), self.clean.width(), eps).map_err(msg)?;
        self.grid = inject_noise(&self.clean, &model, seed as u64).map_err(msg)?;
        let classes = self
            .clean_truth
            .classes()
            .iter()
            .zip(&self.grid.mask)
            .map(|(&c, &m)| if m { c } else { 0 })
            .collect();
        let mask = self.grid.mask.clone();
        self.truth = LabelGrid::new(self.grid.height(), self.grid.width(), classes, mask).map_err(msg)?;
        self.corrupt(fraction, seed)?;
        Ok(self.occupied())
    }

    /// Reassigns `fraction` of the occupied cells to a random wrong class
    /// and builds a probability map that puts 0.6 on each cell's assigned
    /// class. Returns the accuracy of its argmax.
    pub fn corrupt(&mut self, fraction: f64, seed: u32) -> Result<f64, String> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(format!("fraction {fraction} outside [0, 1]"));
        }
        let (h, w) = (self.grid.height(), self.grid.width());
        let mut r = ChaCha8Rng::seed_from_u64(seed as u64);
        let other = ((1.0 - CONFIDENCE) / (NUM_CLASSES - 1) as f64).ln();
        let mut logits = vec![0.0; h * w * NUM_CLASSES];
        for i in 0..h * w {
            if !self.truth.mask()[i] {
                continue;
            }
            let mut c = self.truth.class_at(i) as usize;
            if r.gen_bool(fraction) {
                c = (c + r.gen_range(1..NUM_CLASSES)) % NUM_CLASSES;
            }
            for k in 0..NUM_CLASSES {
                logits[i * NUM_CLASSES + k] = if k == c { CONFIDENCE.ln() } else { other };
            }
        }
        self.logits = Tensor::from_vec(&[h, w, NUM_CLASSES], logits).map_err(msg)?;
        let probs = Tensor::from_vec(
            &[h, w, NUM_CLASSES],
            self.logits.data().iter().map(|z| z.exp()).collect(),
        )
        .map_err(msg)?;
        self.noisy = LabelGrid::from_probs(&probs, &self.grid.mask).map_err(msg)?;
        self.refined = self.noisy.clone();
        Ok(self.noisy_accuracy())
    }

    /// Mean-field refinement of the corrupted map; returns its accuracy.
    pub fn refine(
        &mut self,
        w1: f64,
        w2: f64,
        sigma_alpha: f64,
        sigma_beta: f64,
        sigma_gamma: f64,
        iterations: u32,
    ) -> Result<f64, String> {
        let mut p = CrfParams::new(NUM_CLASSES);
        p.w1 = w1;
        p.w2 = w2;
        p.sigma_alpha = sigma_alpha;
        p.sigma_beta = sigma_beta;
        p.sigma_gamma = sigma_gamma;
        p.iterations = iterations as usize;
        p.validate().map_err(msg)?;
        let q = crf::refine(&self.logits, &self.grid, &p).map_err(msg)?;
        self.refined = LabelGrid::from_probs(&q, &self.grid.mask).map_err(msg)?;
        Ok(self.refined_accuracy())
    }

    pub fn noisy_accuracy(&self) -> f64 {
        self.noisy.accuracy(&self.truth).unwrap_or(1.0)
    }

    pub fn refined_accuracy(&self) -> f64 {
        self.refined.accuracy(&self.truth).unwrap_or(1.0)
    }
}
