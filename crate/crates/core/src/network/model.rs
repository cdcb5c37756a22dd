use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, FireCache, FireDeconv, FireDeconvCache, FireModule, LayerCount};
use crate::class::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::projection::{SphericalGrid, CHANNELS};
use crate::tensor::{
    maxpool_width, maxpool_width_backward, softmax_channels, Activation, ConvSpec, Pooled, Scalar,
    Tensor, DECONV_STRIDE_W,
};

/// Width pooling: window 3, stride 2, pad 1 halves any even width.
const POOL_WINDOW: usize = 3;
const POOL_STRIDE: usize = 2;
const POOL_PAD: usize = 1;

/// Total width reduction between input and bottleneck.
pub const DOWNSAMPLE: usize = 16;

/// Channel-width table of the encoder/decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Stem 64, fire stages 128 / 256 / 512.
    PaperLike,
    /// Same topology at 1/8 widths.
    Toy,
}

impl Profile {
    pub fn stem_width(self) -> usize {
        match self {
            Profile::PaperLike => 64,
            Profile::Toy => 8,
        }
    }

    pub fn stage_widths(self) -> [usize; 3] {
        match self {
            Profile::PaperLike => [128, 256, 512],
            Profile::Toy => [16, 32, 64],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::PaperLike => "paper-like",
            Profile::Toy => "toy",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-like" => Ok(Profile::PaperLike),
            "toy" => Ok(Profile::Toy),
            _ => Err(Error::InvalidArgument(format!("unknown profile `{s}`"))),
        }
    }
}

/// Per-channel standardization applied to occupied cells before the stem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for InputNorm {
    fn default() -> Self {
        // Rough statistics of a forward-facing 64-beam frame.
        InputNorm {
            mean: [12.0, 0.0, -1.0, 0.25, 12.5],
            std: [10.0, 7.0, 1.0, 0.15, 10.0],
        }
    }
}

impl InputNorm {
    /// Statistics over the occupied cells of the given grids.
    pub fn fit(grids: &[&SphericalGrid]) -> Result<Self> {
        let mut n = 0f64;
        let mut sum = [0f64; CHANNELS];
        let mut sq = [0f64; CHANNELS];
        for g in grids {
            for (i, &m) in g.mask.iter().enumerate() {
                if m {
                    n += 1.0;
                    for (c, &v) in g.cell(i).iter().enumerate() {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
            }
        }
        if n == 0.0 {
            return Err(Error::Empty("no occupied cells to fit input statistics"));
        }
        let mut norm = InputNorm {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        };
        for c in 0..CHANNELS {
            let m = sum[c] / n;
            norm.mean[c] = m;
            norm.std[c] = (sq[c] / n - m * m).max(0.0).sqrt().max(1e-3);
        }
        Ok(norm)
    }

    pub fn apply<T: Scalar>(&self, features: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
        let (h, w, c) = features.hwc("normalize")?;
        if c != CHANNELS || mask.len() != h * w {
            return Err(Error::shape(
                "normalize",
                format!("features {:?}, mask of {}", features.dims(), mask.len()),
            ));
        }
        let mut out = features.clone();
        for (cell, &m) in out.data_mut().chunks_exact_mut(CHANNELS).zip(mask) {
            if m {
                for (ch, v) in cell.iter_mut().enumerate() {
                    *v = (*v - T::of(self.mean[ch])) / T::of(self.std[ch]);
                }
            } else {
                cell.fill(T::zero());
            }
        }
        Ok(out)
    }
}

/// Full set of trainable layers.
///
/// Layout: `conv1a` (3x3, width stride 2) and the parallel full-width 1x1
/// `conv1b`; three encoder stages of two fire modules, each preceded by a
/// width pool; four fire-deconv stages whose outputs are added to the
/// encoder features of matching width; the 1x1 `conv14` head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub profile: Profile,
    pub num_classes: usize,
    pub input_norm: InputNorm,
    pub conv1a: Conv<T>,
    pub conv1b: Conv<T>,
    pub encoder: Vec<FireModule<T>>,
    pub decoder: Vec<FireDeconv<T>>,
    pub conv14: Conv<T>,
}

const ENCODER_NAMES: [&str; 6] = ["fire2", "fire3", "fire4", "fire5", "fire6", "fire7"];
const DECODER_NAMES: [&str; 4] = ["fire_deconv10", "fire_deconv11", "fire_deconv12", "fire_deconv13"];

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    input: Tensor<T>,
    conv1a: Tensor<T>,
    conv1b: Tensor<T>,
    pools: Vec<(Tensor<T>, Pooled<T>)>,
    /// Input and cache of each encoder module.
    encoder: Vec<(Tensor<T>, FireCache<T>)>,
    /// Input and cache of each decoder module.
    decoder: Vec<(Tensor<T>, FireDeconvCache<T>)>,
    head_input: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn init(profile: Profile, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = profile.stem_width();
        let [c1, c2, c3] = profile.stage_widths();
        let conv1a = Conv::init(
            CHANNELS,
            s0,
            ConvSpec::same(3, 3, Activation::Relu).with_stride(1, 2),
            &mut rng,
        );
        let conv1b = Conv::init(CHANNELS, s0, ConvSpec::same(1, 1, Activation::Relu), &mut rng);
        let encoder = vec![
            FireModule::init(s0, c1, &mut rng)?,
            FireModule::init(c1, c1, &mut rng)?,
            FireModule::init(c1, c2, &mut rng)?,
            FireModule::init(c2, c2, &mut rng)?,
            FireModule::init(c2, c3, &mut rng)?,
            FireModule::init(c3, c3, &mut rng)?,
        ];
        let decoder = vec![
            FireDeconv::init(c3, c2, &mut rng)?,
            FireDeconv::init(c2, c1, &mut rng)?,
            FireDeconv::init(c1, s0, &mut rng)?,
            FireDeconv::init(s0, s0, &mut rng)?,
        ];
        let conv14 = Conv::init(s0, num_classes, ConvSpec::same(1, 1, Activation::None), &mut rng);
        Ok(NetworkParams {
            profile,
            num_classes,
            input_norm: InputNorm::default(),
            conv1a,
            conv1b,
            encoder,
            decoder,
            conv14,
        })
    }

    pub fn default_classes(profile: Profile, seed: u64) -> Result<Self> {
        Self::init(profile, NUM_CLASSES, seed)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, w, c) = x.hwc("network forward")?;
        if c != CHANNELS {
            return Err(Error::shape("network forward", format!("{c} channels, expected {CHANNELS}")));
        }
        if w % DOWNSAMPLE != 0 {
            return Err(Error::shape(
                "network forward",
                format!("width {w} is not a multiple of {DOWNSAMPLE}"),
            ));
        }
        Ok(())
    }

    /// Forward pass over raw features; returns logits and the backward trace.
    pub fn forward_traced(&self, features: &Tensor<T>, mask: &[bool]) -> Result<Trace<T>> {
        self.check_input(features)?;
        let input = self.input_norm.apply(features, mask)?;
        let conv1a = self.conv1a.forward(&input)?;
        let conv1b = self.conv1b.forward(&input)?;

        let mut pools = Vec::with_capacity(3);
        let mut encoder = Vec::with_capacity(6);
        let mut encoder_outputs = Vec::with_capacity(6);
        let mut current = conv1a.clone();
        for stage in 0..3 {
            let pooled = maxpool_width(&current, POOL_WINDOW, POOL_STRIDE, POOL_PAD)?;
            let pool_in = std::mem::replace(&mut current, pooled.output.clone());
            pools.push((pool_in, pooled));
            for m in &self.encoder[2 * stage..2 * stage + 2] {
                let (out, cache) = m.forward_cached(&current)?;
                encoder.push((current, cache));
                encoder_outputs.push(out.clone());
                current = out;
            }
        }

        let skips = [&encoder_outputs[3], &encoder_outputs[1], &conv1a, &conv1b];
        let mut decoder = Vec::with_capacity(4);
        for (m, skip) in self.decoder.iter().zip(skips) {
            let (out, cache) = m.forward_cached(&current)?;
            if out.dims() != skip.dims() {
                return Err(Error::shape(
                    "skip connection",
                    format!("{:?} vs {:?}", out.dims(), skip.dims()),
                ));
            }
            decoder.push((current, cache));
            current = out.add(skip)?;
        }
        let logits = self.conv14.forward(&current)?;
        Ok(Trace {
            input,
            conv1a,
            conv1b,
            pools,
            encoder,
            decoder,
            head_input: current,
            logits,
        })
    }

    /// Logits and per-cell class probabilities.
    pub fn forward_tensor(&self, features: &Tensor<T>, mask: &[bool]) -> Result<(Tensor<T>, Tensor<T>)> {
        let logits = self.forward_traced(features, mask)?.logits;
        let probs = softmax_channels(&logits)?;
        Ok((logits, probs))
    }

    /// Backpropagates `grad_logits`, accumulating into every parameter's
    /// gradient buffer.
    pub fn backward(&mut self, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<()> {
        let g_head = self.conv14.backward(&trace.head_input, &trace.logits, grad_logits)?;

        // Decoder in reverse; each stage output was `deconv(x) + skip`, so the
        // same gradient reaches both branches.
        let mut g = g_head;
        let mut skip_grads = Vec::with_capacity(4);
        for i in (0..4).rev() {
            skip_grads.push(g.clone());
            let (x, cache) = &trace.decoder[i];
            let deconv_out_grad = g;
            g = self.decoder[i].backward(x, cache, &deconv_out_grad)?;
        }
        // skip_grads now holds the gradients for conv1b, conv1a, fire3, fire5.
        let g_conv1b = skip_grads[0].clone();
        let mut g_conv1a = skip_grads[1].clone();
        let mut enc_grads: Vec<Option<Tensor<T>>> = vec![None; 6];
        enc_grads[1] = Some(skip_grads[2].clone());
        enc_grads[3] = Some(skip_grads[3].clone());
        // Bottleneck output feeds only the first decoder stage.
        enc_grads[5] = Some(g);

        for i in (0..6).rev() {
            let gy = enc_grads[i].take().ok_or_else(|| Error::shape("network backward", "missing gradient"))?;
            let (x, cache) = &trace.encoder[i];
            let gx = self.encoder[i].backward(x, cache, &gy)?;
            if i % 2 == 1 {
                // Input of the second module of a stage is the first's output.
                enc_grads[i - 1] = Some(gx);
            } else {
                let stage = i / 2;
                let (pool_in, pooled) = &trace.pools[stage];
                let gp = maxpool_width_backward(pool_in.dims(), pooled, &gx)?;
                if stage == 0 {
                    g_conv1a = g_conv1a.add(&gp)?;
                } else {
                    let j = 2 * stage - 1;
                    enc_grads[j] = Some(match enc_grads[j].take() {
                        Some(acc) => acc.add(&gp)?,
                        None => gp,
                    });
                }
            }
        }
        self.conv1a.backward(&trace.input, &trace.conv1a, &g_conv1a)?;
        self.conv1b.backward(&trace.input, &trace.conv1b, &g_conv1b)?;
        Ok(())
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.conv1a.params("conv1a", &mut out);
        self.conv1b.params("conv1b", &mut out);
        for (m, name) in self.encoder.iter().zip(ENCODER_NAMES) {
            m.params(name, &mut out);
        }
        for (m, name) in self.decoder.iter().zip(DECODER_NAMES) {
            m.params(name, &mut out);
        }
        self.conv14.params("conv14", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.conv1a.params_mut("conv1a", &mut out);
        self.conv1b.params_mut("conv1b", &mut out);
        for (m, name) in self.encoder.iter_mut().zip(ENCODER_NAMES) {
            m.params_mut_into(name, &mut out);
        }
        for (m, name) in self.decoder.iter_mut().zip(DECODER_NAMES) {
            m.params_mut_into(name, &mut out);
        }
        self.conv14.params_mut("conv14", &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let mut out = NetworkParams::<U>::init(self.profile, self.num_classes, 0)
            .expect("profile already validated");
        out.input_norm = self.input_norm;
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    /// Per-layer weight and multiply counts for an `h x w` input.
    pub fn count_params(&self, h: usize, w: usize) -> ParamCounts {
        let mut layers = Vec::new();
        layers.push(self.conv1a.count("conv1a", h, w / 2));
        layers.push(self.conv1b.count("conv1b", h, w));
        let mut width = w / 2;
        for stage in 0..3 {
            width /= POOL_STRIDE;
            for i in 2 * stage..2 * stage + 2 {
                layers.extend(self.encoder[i].counts(ENCODER_NAMES[i], h, width));
            }
        }
        for (m, name) in self.decoder.iter().zip(DECODER_NAMES) {
            layers.extend(m.counts(name, h, width));
            width *= DECONV_STRIDE_W;
        }
        layers.push(self.conv14.count("conv14", h, w));
        ParamCounts::new(layers)
    }
}

impl NetworkParams<f32> {
    /// Logits and probabilities for a projected frame.
    pub fn forward(&self, grid: &SphericalGrid) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.forward_tensor(&grid.features, &grid.mask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub layers: Vec<LayerCount>,
    pub total_weights: u64,
    pub total_multiplies: u64,
}

impl ParamCounts {
    pub fn new(layers: Vec<LayerCount>) -> Self {
        let total_weights = layers.iter().map(|l| l.weights).sum();
        let total_multiplies = layers.iter().map(|l| l.multiplies).sum();
        ParamCounts {
            layers,
            total_weights,
            total_multiplies,
        }
    }
}
