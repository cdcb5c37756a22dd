use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::loss;
use super::model::NetworkParams;
use crate::class::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::projection::{inject_noise, LabelGrid, NoiseModel, SphericalGrid};
use crate::tensor::{sgd_step, Tensor};

/// A projected frame with its ground-truth labels.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub grid: SphericalGrid,
    pub labels: LabelGrid,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f32,
    /// Heavy-ball coefficient; 0 gives plain gradient descent.
    pub momentum: f32,
    pub batch_size: usize,
    pub class_weights: [f64; NUM_CLASSES],
    /// Dropout noise applied to each frame before it is seen.
    pub noise: Option<NoiseModel>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.0,
            batch_size: 1,
            class_weights: [1.0; NUM_CLASSES],
            noise: None,
        }
    }
}

/// Optimizer state carried across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    velocity: Vec<Vec<f32>>,
}

fn frame_seed(seed: u64, epoch_pos: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch_pos as u64).wrapping_add(1)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {}", config.momentum)));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Trainer {
            config,
            velocity: Vec::new(),
        })
    }

    /// One shuffled pass over `dataset`. Returns the mean per-frame loss, each
    /// measured before the update of its batch.
    pub fn train_epoch(
        &mut self,
        dataset: &[TrainFrame],
        params: &mut NetworkParams<f32>,
        seed: u64,
    ) -> Result<f32> {
        if dataset.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        params.zero_grads();
        let mut total = 0f64;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            for (j, &i) in batch.iter().enumerate() {
                let frame = &dataset[i];
                let noisy;
                let grid = match &self.config.noise {
                    Some(model) => {
                        noisy = inject_noise(&frame.grid, model, frame_seed(seed, b * self.config.batch_size + j))?;
                        &noisy
                    }
                    None => &frame.grid,
                };
                let labels = mask_labels(&frame.labels, grid)?;
                let trace = params.forward_traced(&grid.features, &grid.mask)?;
                let (l, g) = loss(&trace.logits, &labels, &self.config.class_weights)?;
                total += l as f64;
                params.backward(&trace, &g)?;
            }
            let lr = self.config.lr / batch.len() as f32;
            self.step(params, lr)?;
        }
        Ok((total / dataset.len() as f64) as f32)
    }

    fn step(&mut self, params: &mut NetworkParams<f32>, lr: f32) -> Result<()> {
        let mut ps: Vec<&mut Tensor<f32>> = params.params_mut().into_iter().map(|(_, p)| p).collect();
        if self.config.momentum == 0.0 {
            return sgd_step(&mut ps, lr);
        }
        if self.velocity.is_empty() {
            self.velocity = ps.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let mu = self.config.momentum;
        for (p, v) in ps.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.grad().ok_or(Error::MissingGrad)?.to_vec();
            for ((x, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *x -= lr * *vi;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Plain-SGD epoch with batch size 1 and unit class weights.
pub fn train_epoch(
    dataset: &[TrainFrame],
    params: &mut NetworkParams<f32>,
    lr: f32,
    seed: u64,
) -> Result<f32> {
    Trainer::new(TrainConfig {
        lr,
        ..Default::default()
    })?
    .train_epoch(dataset, params, seed)
}

/// Mean loss over `dataset` without updating anything.
pub fn evaluate_loss(
    dataset: &[TrainFrame],
    params: &NetworkParams<f32>,
    class_weights: &[f64],
) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut total = 0f64;
    for f in dataset {
        let (logits, _) = params.forward(&f.grid)?;
        total += loss(&logits, &f.labels, class_weights)?.0 as f64;
    }
    Ok((total / dataset.len() as f64) as f32)
}

/// Labels restricted to the (possibly noise-thinned) grid occupancy.
fn mask_labels(labels: &LabelGrid, grid: &SphericalGrid) -> Result<LabelGrid> {
    if labels.mask() == grid.mask.as_slice() {
        return Ok(labels.clone());
    }
    let classes = labels
        .classes()
        .iter()
        .zip(&grid.mask)
        .map(|(&c, &m)| if m { c } else { 0 })
        .collect();
    LabelGrid::new(labels.height(), labels.width(), classes, grid.mask.clone())
}
