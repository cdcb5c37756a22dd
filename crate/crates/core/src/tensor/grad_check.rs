use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Central finite-difference gradient checker (64-bit only).
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per input, drawn without
    /// replacement; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        GradCheck {
            step,
            ..Default::default()
        }
    }

    pub fn sampled(mut self, max_coords: usize, seed: u64) -> Self {
        self.max_coords = Some(max_coords);
        self.seed = seed;
        self
    }

    /// Worst relative error `|a - n| / max(|a|, |n|, floor)` between the
    /// analytic gradients and `(f(x+h) - f(x-h)) / 2h`.
    pub fn run<F>(&self, mut loss: F, inputs: &[Tensor<f64>], analytic: &[Tensor<f64>]) -> f64
    where
        F: FnMut(&[Tensor<f64>]) -> f64,
    {
        assert_eq!(inputs.len(), analytic.len(), "one gradient per input");
        let mut probe = inputs.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut worst = 0.0f64;
        for (t, grad) in analytic.iter().enumerate() {
            assert_eq!(grad.len(), inputs[t].len(), "gradient shape for input {t}");
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < grad.len() => sample(&mut rng, grad.len(), m).into_vec(),
                _ => (0..grad.len()).collect(),
            };
            for i in coords {
                let x0 = inputs[t].data()[i];
                probe[t].data_mut()[i] = x0 + self.step;
                let up = loss(&probe);
                probe[t].data_mut()[i] = x0 - self.step;
                let down = loss(&probe);
                probe[t].data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * self.step);
                let a = grad.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                worst = worst.max(err);
            }
        }
        worst
    }
}

/// [`GradCheck`] with all coordinates and step `h`.
pub fn grad_check<F>(loss: F, inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], h: f64) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    GradCheck::with_step(h).run(loss, inputs, analytic)
}
