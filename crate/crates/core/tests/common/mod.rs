//! Naive reference implementations and the measurements behind the
//! integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use squeezeseg::class::{Class, NUM_CLASSES};
use squeezeseg::crf::{self, CrfParams};
use squeezeseg::eval::{self, Counts};
use squeezeseg::instance::{dbscan, ClassInstances, DbscanParams, InstanceSet};
use squeezeseg::network::{
    self, inverse_frequency_weights, plain_conv_count, plain_deconv_count, FireDeconv, FireModule, InputNorm,
    NetworkParams, Profile, TrainConfig, TrainFrame, Trainer,
};
use squeezeseg::projection::{
    estimate_noise, inject_noise, GridConfig, LabelGrid, NoiseModel, SphericalGrid, CHANNELS,
};
use squeezeseg::simulator::{self, cast_ray, GenConfig, LidarConfig, Object, Scene, Shape};
use squeezeseg::tensor::{self, Activation, ConvSpec, GradCheck, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- tensor ops

pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec) -> Vec<f64> {
    let (h, wd, cin) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let cout = w.dims()[3];
    let (ho, wo) = s.output_dims(h, wd).unwrap();
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ky in 0..s.kernel_h {
                    for kx in 0..s.kernel_w {
                        let iy = (oy * s.stride_h + ky) as isize - s.pad_h as isize;
                        let ix = (ox * s.stride_w + kx) as isize - s.pad_w as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(iy as usize * wd + ix as usize) * cin + ci]
                                * w.data()[((ky * s.kernel_w + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                if s.activation == Activation::Relu {
                    acc = acc.max(0.0);
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    out
}

/// Gather form: output column `ox` collects every input column `ix` and tap
/// `k` with `2*ix + k - 1 == ox`.
pub fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (h, wd, cin) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let cout = w.dims()[3];
    let wo = 2 * wd;
    let mut out = vec![0.0; h * wo * cout];
    for y in 0..h {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ix in 0..wd {
                    for k in 0..4 {
                        if 2 * ix + k == ox + 1 {
                            for ci in 0..cin {
                                acc += x.data()[(y * wd + ix) * cin + ci] * w.data()[(k * cin + ci) * cout + co];
                            }
                        }
                    }
                }
                out[(y * wo + ox) * cout + co] = acc.max(0.0);
            }
        }
    }
    out
}

pub fn naive_maxpool(x: &Tensor<f64>, window: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let wo = (w + 2 * pad - window) / stride + 1;
    let mut out = Vec::new();
    for y in 0..h {
        for ox in 0..wo {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for k in 0..window {
                    let ix = (ox * stride + k) as isize - pad as isize;
                    if ix >= 0 && (ix as usize) < w {
                        m = m.max(x.data()[(y * w + ix as usize) * c + ch]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Worst deviation of the tensor kernels from the loops above over a batch
/// of random shapes.
pub fn tensor_oracle_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (h, w) = (r.gen_range(1..6), r.gen_range(2..10));
        let (cin, cout) = (r.gen_range(1..5), r.gen_range(1..5));
        let x = random_tensor(&[h, w, cin], &mut r);
        let (kh, kw) = ([1, 3][r.gen_range(0..2)], [1, 3, 4][r.gen_range(0..3)]);
        let spec = ConvSpec {
            kernel_h: kh,
            kernel_w: kw,
            stride_h: 1,
            stride_w: r.gen_range(1..3),
            pad_h: kh / 2,
            pad_w: r.gen_range(0..kw.min(2) + 1).min(kw - 1),
            activation: if r.gen_bool(0.5) { Activation::Relu } else { Activation::None },
        };
        if spec.output_dims(h, w).is_err() {
            continue;
        }
        let wt = random_tensor(&[kh, kw, cin, cout], &mut r);
        let b = random_tensor(&[cout], &mut r);
        let y = tensor::conv2d(&x, &wt, &b, &spec).unwrap();
        worst = worst.max(max_abs_diff(y.data(), &naive_conv2d(&x, &wt, &b, &spec)));

        let wd = random_tensor(&[1, 4, cin, cout], &mut r);
        let y = tensor::deconv2d_width(&x, &wd, &b, Activation::Relu).unwrap();
        worst = worst.max(max_abs_diff(y.data(), &naive_deconv(&x, &wd, &b)));

        let p = tensor::maxpool_width(&x, 3, 2, 1).unwrap();
        worst = worst.max(max_abs_diff(p.output.data(), &naive_maxpool(&x, 3, 2, 1)));

        let sm = tensor::softmax_channels(&x).unwrap();
        let want: Vec<f64> = x.data().chunks(cin).flat_map(naive_softmax).collect();
        worst = worst.max(max_abs_diff(sm.data(), &want));
    }
    worst
}

// ---------------------------------------------------------------- gradients

fn ce_loss(logits: &Tensor<f64>, labels: &[u8], mask: &[bool]) -> (f64, Tensor<f64>) {
    let k = logits.dims()[2];
    network::softmax_cross_entropy(logits, labels, mask, &vec![1.0; k]).unwrap()
}

fn random_labels(n: usize, k: usize, r: &mut ChaCha8Rng) -> (Vec<u8>, Vec<bool>) {
    let labels = (0..n).map(|_| r.gen_range(0..k) as u8).collect();
    let mask = (0..n).map(|_| r.gen_bool(0.85)).collect();
    (labels, mask)
}

/// Zero-initialized biases put units exactly on the ReLU kink; move every
/// parameter off it before checking.
fn jitter<'a>(slots: impl IntoIterator<Item = (String, &'a mut Tensor<f64>)>, r: &mut ChaCha8Rng) {
    for (_, t) in slots {
        for v in t.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
}

/// Random weighting tensor so that `sum(g * y)` exercises every output.
fn projection_loss(y: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
    y.dot(g).unwrap()
}

/// Worst relative error per component, 64-bit, `h = 1e-5`, on `8 x 16 x C`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let h = 1e-5;
    let mut out = Vec::new();

    // conv2d, 3x3 with relu and column stride 2.
    {
        let spec = ConvSpec::same(3, 3, Activation::Relu).with_stride(1, 2);
        let x = random_tensor(&[8, 16, 3], &mut r);
        let w = random_tensor(&[3, 3, 3, 4], &mut r);
        let b = random_tensor(&[4], &mut r);
        let y = tensor::conv2d(&x, &w, &b, &spec).unwrap();
        let g = random_tensor(y.dims(), &mut r);
        let grads = tensor::conv2d_backward(&x, &w, &y, &g, &spec).unwrap();
        let e = tensor::grad_check(
            |p| projection_loss(&tensor::conv2d(&p[0], &p[1], &p[2], &spec).unwrap(), &g),
            &[x, w, b],
            &[grads.input, grads.weights, grads.bias],
            h,
        );
        out.push(("conv2d", e));
    }
    // deconv2d_width.
    {
        let x = random_tensor(&[8, 16, 3], &mut r);
        let w = random_tensor(&[1, 4, 3, 4], &mut r);
        let b = random_tensor(&[4], &mut r);
        let y = tensor::deconv2d_width(&x, &w, &b, Activation::Relu).unwrap();
        let g = random_tensor(y.dims(), &mut r);
        let grads = tensor::deconv2d_width_backward(&x, &w, &y, &g, Activation::Relu).unwrap();
        let e = tensor::grad_check(
            |p| projection_loss(&tensor::deconv2d_width(&p[0], &p[1], &p[2], Activation::Relu).unwrap(), &g),
            &[x, w, b],
            &[grads.input, grads.weights, grads.bias],
            h,
        );
        out.push(("deconv2d_width", e));
    }
    // maxpool_width.
    {
        let x = random_tensor(&[8, 16, 3], &mut r);
        let p = tensor::maxpool_width(&x, 3, 2, 1).unwrap();
        let g = random_tensor(p.output.dims(), &mut r);
        let gx = tensor::maxpool_width_backward(x.dims(), &p, &g).unwrap();
        let e = tensor::grad_check(
            |q| projection_loss(&tensor::maxpool_width(&q[0], 3, 2, 1).unwrap().output, &g),
            &[x],
            &[gx],
            h,
        );
        out.push(("maxpool_width", e));
    }
    // softmax + cross-entropy.
    {
        let z = random_tensor(&[8, 16, 4], &mut r);
        let (labels, mask) = random_labels(8 * 16, 4, &mut r);
        let (_, gz) = ce_loss(&z, &labels, &mask);
        let e = tensor::grad_check(|p| ce_loss(&p[0], &labels, &mask).0, &[z], &[gz], h);
        out.push(("softmax_cross_entropy", e));
    }
    // Fire module.
    {
        let mut f = FireModule::<f64>::init(8, 16, &mut r).unwrap();
        jitter(f.params_mut(""), &mut r);
        let x = random_tensor(&[8, 16, 8], &mut r);
        let (y, cache) = f.forward_cached(&x).unwrap();
        let g = random_tensor(y.dims(), &mut r);
        let gx = f.backward(&x, &cache, &g).unwrap();
        let mut inputs = vec![x];
        let mut analytic = vec![gx];
        let mut ps = Vec::new();
        f.params("", &mut ps);
        for (_, t) in &ps {
            inputs.push((*t).clone());
            analytic.push(Tensor::from_vec(t.dims(), t.grad().unwrap().to_vec()).unwrap());
        }
        let template = f.clone();
        let e = tensor::grad_check(
            |p| {
                let mut m = template.clone();
                let mut slots = m.params_mut("");
                for ((_, s), v) in slots.iter_mut().zip(&p[1..]) {
                    s.data_mut().copy_from_slice(v.data());
                }
                drop(slots);
                projection_loss(&m.forward(&p[0]).unwrap(), &g)
            },
            &inputs,
            &analytic,
            h,
        );
        out.push(("fire_module", e));
    }
    // Fire deconvolution module.
    {
        let mut f = FireDeconv::<f64>::init(8, 16, &mut r).unwrap();
        let mut slots = Vec::new();
        f.params_mut_into("", &mut slots);
        jitter(slots, &mut r);
        let x = random_tensor(&[8, 8, 8], &mut r);
        let (y, cache) = f.forward_cached(&x).unwrap();
        let g = random_tensor(y.dims(), &mut r);
        let gx = f.backward(&x, &cache, &g).unwrap();
        let mut inputs = vec![x];
        let mut analytic = vec![gx];
        let mut ps = Vec::new();
        f.params("", &mut ps);
        for (_, t) in &ps {
            inputs.push((*t).clone());
            analytic.push(Tensor::from_vec(t.dims(), t.grad().unwrap().to_vec()).unwrap());
        }
        let template = f.clone();
        let e = tensor::grad_check(
            |p| {
                let mut m = template.clone();
                let mut slots = Vec::new();
                m.params_mut_into("", &mut slots);
                for ((_, s), v) in slots.iter_mut().zip(&p[1..]) {
                    s.data_mut().copy_from_slice(v.data());
                }
                drop(slots);
                projection_loss(&m.forward(&p[0]).unwrap(), &g)
            },
            &inputs,
            &analytic,
            h,
        );
        out.push(("fire_deconv", e));
    }
    // CRF refine, gradients for logits and compatibility.
    {
        let grid = random_grid(8, 16, 0.8, &mut r);
        let mut params = CrfParams::new(4);
        for c in params.compat.iter_mut() {
            *c += r.gen_range(-0.3..0.3);
        }
        let z = random_tensor(&[8, 16, 4], &mut r);
        let g = random_tensor(&[8, 16, 4], &mut r);
        let tape = crf::refine_traced(&z, &grid, &params).unwrap();
        let grads = crf::refine_backward(&tape, &params, &g).unwrap();
        let compat = Tensor::from_vec(&[4, 4], params.compat.clone()).unwrap();
        let e = tensor::grad_check(
            |p| {
                let mut q = params.clone();
                q.compat = p[1].data().to_vec();
                projection_loss(&crf::refine(&p[0], &grid, &q).unwrap(), &g)
            },
            &[z, compat],
            &[grads.logits, Tensor::from_vec(&[4, 4], grads.compat).unwrap()],
            h,
        );
        out.push(("crf_refine", e));
    }
    // Full toy network: every parameter tensor, sampled coordinates.
    {
        let mut net = NetworkParams::<f64>::init(Profile::Toy, 4, seed).unwrap();
        jitter(net.params_mut(), &mut r);
        let grid = random_grid(8, 16, 0.85, &mut r);
        let features = grid.features.cast::<f64>();
        let (labels, _) = random_labels(8 * 16, 4, &mut r);
        let trace = net.forward_traced(&features, &grid.mask).unwrap();
        let (_, gl) = ce_loss(&trace.logits, &labels, &grid.mask);
        net.zero_grads();
        net.backward(&trace, &gl).unwrap();
        let ps = net.params();
        let inputs: Vec<Tensor<f64>> = ps.iter().map(|(_, t)| (*t).clone()).collect();
        let analytic: Vec<Tensor<f64>> = ps
            .iter()
            .map(|(_, t)| Tensor::from_vec(t.dims(), t.grad().unwrap().to_vec()).unwrap())
            .collect();
        drop(ps);
        let template = net.clone();
        let e = GradCheck::with_step(h).sampled(12, seed).run(
            |p| {
                let mut m = template.clone();
                for ((_, s), v) in m.params_mut().into_iter().zip(p) {
                    s.data_mut().copy_from_slice(v.data());
                }
                let logits = m.forward_traced(&features, &grid.mask).unwrap().logits;
                ce_loss(&logits, &labels, &grid.mask).0
            },
            &inputs,
            &analytic,
        );
        out.push(("toy_network", e));
    }
    out
}

// ---------------------------------------------------------------- CRF

/// Grid with random occupancy and positions on a jittered sphere patch.
pub fn random_grid(h: usize, w: usize, occupancy: f64, r: &mut ChaCha8Rng) -> SphericalGrid {
    let cfg = GridConfig {
        height: h,
        width: w,
        ..GridConfig::default()
    };
    let mut f = vec![0f32; h * w * CHANNELS];
    let mut mask = vec![false; h * w];
    for i in 0..h * w {
        if r.gen_bool(occupancy) {
            mask[i] = true;
            let (row, col) = (i / w, i % w);
            let range: f32 = r.gen_range(5.0..15.0);
            let c = &mut f[i * CHANNELS..][..CHANNELS];
            c[0] = range;
            c[1] = 0.2 * col as f32 + r.gen_range(-0.3..0.3);
            c[2] = -0.2 * row as f32 + r.gen_range(-0.3..0.3);
            c[3] = r.gen_range(0.0..1.0);
            c[4] = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        }
    }
    SphericalGrid::from_parts(cfg, Tensor::from_vec(&[h, w, CHANNELS], f).unwrap(), mask).unwrap()
}

/// Mean-field refinement written out over all cell pairs.
pub fn naive_crf(logits: &[f64], grid: &SphericalGrid, p: &CrfParams) -> Vec<f64> {
    let (h, w, k) = (grid.height(), grid.width(), p.num_classes);
    let n = h * w;
    let softmax_masked = |z: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        for i in 0..n {
            if grid.mask[i] {
                out[i * k..(i + 1) * k].copy_from_slice(&naive_softmax(&z[i * k..(i + 1) * k]));
            }
        }
        out
    };
    let mut q = softmax_masked(logits);
    for _ in 0..p.iterations {
        let mut m = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..n {
                if i == j || !grid.mask[i] || !grid.mask[j] {
                    continue;
                }
                let dr = (i / w) as f64 - (j / w) as f64;
                let dc = (i % w) as f64 - (j % w) as f64;
                if dr.abs() > 1.0 || dc.abs() > 2.0 {
                    continue;
                }
                let (a, b) = (grid.position(i), grid.position(j));
                let dx2: f64 = (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum();
                let dp2 = dr * dr + dc * dc;
                let k1 = (-dp2 / (2.0 * p.sigma_alpha.powi(2)) - dx2 / (2.0 * p.sigma_beta.powi(2))).exp();
                let k2 = (-dp2 / (2.0 * p.sigma_gamma.powi(2))).exp();
                for c in 0..k {
                    m[i * k + c] += (p.w1 * k1 + p.w2 * k2) * q[j * k + c];
                }
            }
        }
        let mut z = logits.to_vec();
        for i in 0..n {
            for a in 0..k {
                for b in 0..k {
                    z[i * k + a] += p.compat[a * k + b] * m[i * k + b];
                }
            }
        }
        q = softmax_masked(&z);
    }
    q
}

pub fn crf_oracle_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let grid = random_grid(8, 8, r.gen_range(0.5..1.0), &mut r);
        let mut p = CrfParams::new(4);
        p.w1 = r.gen_range(0.0..2.0);
        p.w2 = r.gen_range(0.0..1.0);
        p.sigma_alpha = r.gen_range(0.5..4.0);
        p.sigma_beta = r.gen_range(0.2..2.0);
        p.sigma_gamma = r.gen_range(0.5..3.0);
        p.iterations = r.gen_range(1..5);
        for c in p.compat.iter_mut() {
            *c += r.gen_range(-0.5..0.5);
        }
        let z = random_tensor(&[8, 8, 4], &mut r);
        let z = Tensor::from_vec(&[8, 8, 4], z.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let fast = crf::refine(&z, &grid, &p).unwrap();
        worst = worst.max(max_abs_diff(fast.data(), &naive_crf(z.data(), &grid, &p)));
    }
    worst
}

/// `(identity error, worst per-iteration normalization error)`.
pub fn crf_identity_and_normalization(trials: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut ident, mut norm) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let grid = random_grid(8, 16, 0.8, &mut r);
        let z = random_tensor(&[8, 16, 4], &mut r);
        let out = crf::refine(&z, &grid, &CrfParams::identity(4)).unwrap();
        for i in 0..8 * 16 {
            let want = if grid.mask[i] {
                naive_softmax(&z.data()[i * 4..(i + 1) * 4])
            } else {
                vec![0.0; 4]
            };
            ident = ident.max(max_abs_diff(&out.data()[i * 4..(i + 1) * 4], &want));
        }
        let tape = crf::refine_traced(&z, &grid, &CrfParams::new(4)).unwrap();
        for q in &tape.probs {
            for (i, cell) in q.data().chunks(4).enumerate() {
                if grid.mask[i] {
                    norm = norm.max((cell.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    (ident, norm)
}

fn window(h: usize, w: usize, i: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((i / w) as isize, (i % w) as isize);
    (-1..=1isize).flat_map(move |dr| (-2..=2isize).map(move |dc| (r + dr, c + dc))).filter_map(move |(rr, cc)| {
        (rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize).then(|| rr as usize * w + cc as usize)
    })
}

pub struct Corrupted {
    pub grid: SphericalGrid,
    pub truth: LabelGrid,
    pub logits: Tensor<f64>,
    pub flipped: usize,
}

/// Ground truth from a simulated frame; 5% of the interior cells of
/// homogeneous regions are reassigned to a wrong class. Every cell carries
/// 0.6 probability on its (possibly wrong) assigned class.
pub fn corrupted_map(seed: u64) -> Corrupted {
    let gen = GenConfig {
        cars: 6,
        pedestrians: 3,
        cyclists: 2,
        max_distance: 25.0,
        ..GenConfig::default()
    };
    let f = simulator::synth_frame(seed, &gen, &LidarConfig::default()).unwrap();
    let (h, w) = (f.grid.height(), f.grid.width());
    let truth = f.labels;
    let interior: Vec<usize> = (0..h * w)
        .filter(|&i| {
            truth.mask()[i]
                && window(h, w, i).count() == 15
                && window(h, w, i).all(|j| truth.mask()[j] && truth.class_at(j) == truth.class_at(i))
        })
        .collect();
    let mut r = rng(seed ^ 0xC0FFEE);
    let n_flip = (interior.len() as f64 * 0.05).round() as usize;
    let chosen = rand::seq::index::sample(&mut r, interior.len(), n_flip);
    let mut assigned: Vec<u8> = truth.classes().to_vec();
    for idx in chosen {
        let cell = interior[idx];
        let c = assigned[cell];
        let shift = r.gen_range(1..NUM_CLASSES as u8);
        assigned[cell] = (c + shift) % NUM_CLASSES as u8;
    }
    let mut logits = vec![0.0; h * w * NUM_CLASSES];
    let other = (0.4f64 / (NUM_CLASSES - 1) as f64).ln();
    for i in 0..h * w {
        if truth.mask()[i] {
            for c in 0..NUM_CLASSES {
                logits[i * NUM_CLASSES + c] = if c == assigned[i] as usize { 0.6f64.ln() } else { other };
            }
        }
    }
    Corrupted {
        grid: f.grid,
        truth,
        logits: Tensor::from_vec(&[h, w, NUM_CLASSES], logits).unwrap(),
        flipped: n_flip,
    }
}

pub fn argmax_labels(probs: &Tensor<f64>, mask: &[bool]) -> LabelGrid {
    let (h, w, k) = (probs.dims()[0], probs.dims()[1], probs.dims()[2]);
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
    LabelGrid::new(h, w, classes, mask.to_vec()).unwrap()
}

/// `(accuracy before, accuracy after)` of default-parameter refinement.
pub fn crf_direction(seed: u64) -> (f64, f64) {
    let c = corrupted_map(seed);
    let before = argmax_labels(&c.logits, &c.grid.mask).accuracy(&c.truth).unwrap();
    let refined = crf::refine(&c.logits, &c.grid, &CrfParams::new(NUM_CLASSES)).unwrap();
    let after = argmax_labels(&refined, &c.grid.mask).accuracy(&c.truth).unwrap();
    (before, after)
}

// ---------------------------------------------------------------- DBSCAN

/// Brute-force neighbors; clusters are connected components of core points
/// numbered by their smallest core index, and a border point joins the
/// lowest-numbered cluster among its core neighbors.
pub fn naive_dbscan(pts: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = pts.len();
    let near = |i: usize, j: usize| (0..3).map(|d| (pts[i][d] - pts[j][d]).powi(2)).sum::<f64>() <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut comp: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = Some(next);
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if core[j] && comp[j].is_none() && near(i, j) {
                    comp[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                (0..n).filter(|&j| core[j] && near(i, j)).filter_map(|j| comp[j]).min()
            }
        })
        .collect()
}

/// Same grouping and same noise set, ignoring cluster numbering.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (None, None) => true,
            (Some(x), Some(y)) => *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x,
            _ => false,
        })
}

/// Number of mismatching partitions over random point sets.
pub fn dbscan_mismatches(trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let n = r.gen_range(0..=200);
        let blobs: Vec<[f64; 3]> = (0..r.gen_range(1..6))
            .map(|_| [r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0), r.gen_range(-2.0..2.0)])
            .collect();
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                if r.gen_bool(0.8) {
                    let b = blobs[r.gen_range(0..blobs.len())];
                    [0, 1, 2].map(|d| b[d] + r.gen_range(-1.0..1.0))
                } else {
                    [r.gen_range(-12.0..12.0), r.gen_range(-12.0..12.0), r.gen_range(-3.0..3.0)]
                }
            })
            .collect();
        let eps = r.gen_range(0.3..1.5);
        let min_pts = r.gen_range(1..8);
        let fast = dbscan(&pts, DbscanParams { eps, min_pts }).unwrap();
        if !same_partition(&fast, &naive_dbscan(&pts, eps, min_pts)) {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------- metrics

fn random_label_grid(r: &mut ChaCha8Rng, mask: &[bool]) -> (LabelGrid, Vec<u16>) {
    let classes: Vec<u8> = mask.iter().map(|&m| if m { r.gen_range(0..4) } else { 0 }).collect();
    let ids: Vec<u16> = classes.iter().map(|&c| if c == 0 { 0 } else { r.gen_range(0..4) }).collect();
    (LabelGrid::new(8, 8, classes, mask.to_vec()).unwrap(), ids)
}

fn set_of(l: &LabelGrid, c: u8) -> HashSet<usize> {
    (0..64).filter(|&i| l.mask()[i] && l.class_at(i) == c).collect()
}

fn groups(l: &LabelGrid, ids: &[u16], c: u8) -> Vec<HashSet<usize>> {
    let mut by_id: std::collections::BTreeMap<u16, HashSet<usize>> = Default::default();
    for i in 0..64 {
        if l.mask()[i] && l.class_at(i) == c && ids[i] != 0 {
            by_id.entry(ids[i]).or_default().insert(i);
        }
    }
    // Instance sets list larger instances first, then by first cell.
    let mut v: Vec<HashSet<usize>> = by_id.into_values().collect();
    v.sort_by_key(|g| (std::cmp::Reverse(g.len()), *g.iter().min().unwrap()));
    v
}

/// Literal set-based matching: GT by size (descending, stable), each claims
/// the unclaimed prediction with the largest IoU compared as exact fractions.
fn brute_match(pred: &[HashSet<usize>], gt: &[HashSet<usize>]) -> u64 {
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(gt[j].len()));
    let mut taken = vec![false; pred.len()];
    let mut total = 0;
    for j in order {
        let mut best: Option<(usize, u64, u64)> = None;
        for (i, p) in pred.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let inter = p.intersection(&gt[j]).count() as u64;
            let union = p.union(&gt[j]).count() as u64;
            if inter == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bi, bu)) => inter * bu > bi * union,
            };
            if better {
                best = Some((i, inter, union));
            }
        }
        if let Some((i, inter, _)) = best {
            taken[i] = true;
            total += inter;
        }
    }
    total
}

/// Number of random 8x8 frame pairs where any metric differs from set counting.
pub fn metrics_mismatches(trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let mask: Vec<bool> = (0..64).map(|_| r.gen_bool(0.8)).collect();
        let (pl, pid) = random_label_grid(&mut r, &mask);
        let (gl, gid) = random_label_grid(&mut r, &mask);
        let pi = InstanceSet::from_ids(&pl, &pid).unwrap();
        let gi = InstanceSet::from_ids(&gl, &gid).unwrap();
        let rep = eval::report(&[eval::FrameEval {
            pred_labels: &pl,
            gt_labels: &gl,
            pred_instances: &pi,
            gt_instances: &gi,
        }])
        .unwrap();
        let metrics = eval::class_metrics(&pl, &gl).unwrap();
        for class in Class::ALL {
            let c = class.id();
            let (p, g) = (set_of(&pl, c), set_of(&gl, c));
            let want = Counts {
                pred: p.len() as u64,
                gt: g.len() as u64,
                inter: p.intersection(&g).count() as u64,
            };
            let got = rep.class(class).class_level;
            let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
            let inter = p.intersection(&g).count();
            let ok_metrics = metrics[class.index()].precision.value() == frac(inter, p.len())
                && metrics[class.index()].recall.value() == frac(inter, g.len())
                && metrics[class.index()].iou.value() == frac(inter, p.union(&g).count());
            let mut ok = got == want && ok_metrics;
            if class != Class::Background {
                let m = brute_match(&groups(&pl, &pid, c), &groups(&gl, &gid, c));
                let inst = rep.class(class).instance_metrics();
                ok &= rep.class(class).matched == m && inst.iou.value() == frac(m as usize, p.union(&g).count());
                let single = eval::match_instances(&pi, &gi, class);
                let im = eval::instance_metrics(&pi, &gi, &single, class, want);
                ok &= im.iou.value() == frac(m as usize, p.union(&g).count());
            }
            if !ok {
                bad += 1;
                break;
            }
        }
    }
    bad
}

// ---------------------------------------------------------------- noise

/// `(worst estimate error, worst re-estimate error after injection)`.
pub fn noise_transfer(frames: usize, seed: u64) -> (f64, f64) {
    let (h, w) = (8, 8);
    let mut r = rng(seed);
    let eps: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.0..0.5)).collect();
    let masks: Vec<Vec<bool>> = (0..frames)
        .map(|_| eps.iter().map(|&e| r.gen::<f64>() >= e).collect())
        .collect();
    let refs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
    let est = estimate_noise(h, w, &refs).unwrap();
    let e1 = max_abs_diff(&est.eps, &eps);

    let truth = NoiseModel {
        height: h,
        width: w,
        eps: eps.clone(),
        n_frames: frames,
    };
    let full = random_grid(h, w, 1.0, &mut r);
    let injected: Vec<Vec<bool>> = (0..frames)
        .map(|k| inject_noise(&full, &truth, seed.wrapping_add(k as u64)).unwrap().mask)
        .collect();
    let refs: Vec<&[bool]> = injected.iter().map(|m| m.as_slice()).collect();
    let re = estimate_noise(h, w, &refs).unwrap();
    (e1, max_abs_diff(&re.eps, &eps))
}

// ---------------------------------------------------------------- simulator

/// Every crossing of the ray with the shape's boundary, from face planes.
fn oracle_crossings(shape: &Shape, o: [f64; 3], d: [f64; 3]) -> Vec<f64> {
    let tol = 1e-9;
    let mut ts = Vec::new();
    match *shape {
        Shape::Box { min, max } => {
            for a in 0..3 {
                if d[a] == 0.0 {
                    continue;
                }
                for plane in [min[a], max[a]] {
                    let t = (plane - o[a]) / d[a];
                    let p = [0, 1, 2].map(|k| o[k] + t * d[k]);
                    if (0..3).filter(|&k| k != a).all(|k| p[k] >= min[k] - tol && p[k] <= max[k] + tol) {
                        ts.push(t);
                    }
                }
            }
        }
        Shape::Cylinder {
            center,
            radius,
            z_min,
            z_max,
        } => {
            // Side: |(o + t d)_xy - c|^2 = r^2.
            let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
            let qa = d[0].powi(2) + d[1].powi(2);
            let qb = 2.0 * (ox * d[0] + oy * d[1]);
            let qc = ox * ox + oy * oy - radius * radius;
            let disc = qb * qb - 4.0 * qa * qc;
            if qa > 0.0 && disc >= 0.0 {
                for s in [-1.0, 1.0] {
                    let t = (-qb + s * disc.sqrt()) / (2.0 * qa);
                    let z = o[2] + t * d[2];
                    if z >= z_min - tol && z <= z_max + tol {
                        ts.push(t);
                    }
                }
            }
            if d[2] != 0.0 {
                for zc in [z_min, z_max] {
                    let t = (zc - o[2]) / d[2];
                    let (x, y) = (ox + t * d[0], oy + t * d[1]);
                    if x * x + y * y <= radius * radius + tol {
                        ts.push(t);
                    }
                }
            }
        }
    }
    ts.retain(|&t| t > 1e-9);
    ts
}

fn random_shape(r: &mut ChaCha8Rng) -> Shape {
    let c = [r.gen_range(2.0..20.0), r.gen_range(-8.0..8.0), r.gen_range(-1.0..2.0)];
    if r.gen_bool(0.5) {
        let e = [r.gen_range(0.2..3.0), r.gen_range(0.2..3.0), r.gen_range(0.2..2.0)];
        Shape::Box {
            min: [c[0] - e[0], c[1] - e[1], c[2] - e[2]],
            max: [c[0] + e[0], c[1] + e[1], c[2] + e[2]],
        }
    } else {
        Shape::Cylinder {
            center: [c[0], c[1]],
            radius: r.gen_range(0.2..2.0),
            z_min: c[2] - r.gen_range(0.2..2.0),
            z_max: c[2] + r.gen_range(0.2..2.0),
        }
    }
}

pub struct Geometry {
    pub rays: usize,
    pub hits: usize,
    pub worst_surface: f64,
    pub not_nearest: usize,
    pub label_mismatches: usize,
}

pub fn simulator_geometry(rays: usize, seed: u64) -> Geometry {
    let mut r = rng(seed);
    let (mut hits, mut worst, mut not_nearest) = (0, 0.0f64, 0);
    for _ in 0..rays {
        let k = r.gen_range(1..5);
        let objects: Vec<Object> = (0..k)
            .map(|i| Object {
                shape: random_shape(&mut r),
                class: Class::OBJECTS[i % 3],
                instance: i as u16 + 1,
            })
            .collect();
        let scene = Scene::new(objects, r.gen_bool(0.5)).unwrap();
        let o = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.5..2.5)];
        let target = [r.gen_range(2.0..20.0), r.gen_range(-8.0..8.0), r.gen_range(-2.0..2.0)];
        let mut d: [f64; 3] = [0, 1, 2].map(|a| target[a] - o[a]);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d = d.map(|v| v / n);
        let mut candidates: Vec<f64> = scene.objects.iter().flat_map(|ob| oracle_crossings(&ob.shape, o, d)).collect();
        if scene.ground && d[2] < 0.0 {
            candidates.push(-o[2] / d[2]);
        }
        let nearest = candidates.iter().cloned().filter(|&t| t <= 80.0).fold(f64::INFINITY, f64::min);
        match cast_ray(&scene, o, d, 80.0) {
            Some(hit) => {
                hits += 1;
                let surf = match hit.object {
                    Some(i) => scene.objects[i].shape.surface_distance(hit.point),
                    None => hit.point[2].abs(),
                };
                worst = worst.max(surf);
                if hit.t > nearest + 1e-9 || (hit.t - nearest).abs() > 1e-6 {
                    not_nearest += 1;
                }
            }
            None => {
                if nearest.is_finite() {
                    not_nearest += 1;
                }
            }
        }
    }
    let mut label_mismatches = 0;
    for s in 0..3 {
        let f = simulator::synth_frame(s, &GenConfig::default(), &LidarConfig::default()).unwrap();
        let labels = f.frame.cloud.labels().unwrap();
        if f.grid.occupied() != f.frame.cloud.len() {
            label_mismatches += f.frame.cloud.len().abs_diff(f.grid.occupied());
        }
        for (i, &(row, col)) in f.frame.rays.iter().enumerate() {
            let idx = row * f.grid.width() + col;
            if f.grid.point_index[idx] != Some(i as u32) || f.labels.class_at(idx) != labels[i] {
                label_mismatches += 1;
            }
        }
    }
    Geometry {
        rays,
        hits,
        worst_surface: worst,
        not_nearest,
        label_mismatches,
    }
}

// ---------------------------------------------------------------- counts

/// `(C, fire weights, fire deconv weights, plain 3x3, plain 1x4 deconv)`.
pub fn parameter_counts(c: usize) -> (usize, u64, u64, u64, u64) {
    let mut r = rng(0);
    let fire = FireModule::<f32>::init(c, c, &mut r).unwrap();
    let fd = FireDeconv::<f32>::init(c, c, &mut r).unwrap();
    let fire_w: u64 = fire.counts("f", 8, 8).iter().map(|l| l.weights).sum();
    let fd_w: u64 = fd.counts("d", 8, 8).iter().map(|l| l.weights).sum();
    (c, fire_w, fd_w, plain_conv_count(c, 3, 8, 8).weights, plain_deconv_count(c, 8, 8).weights)
}

// ---------------------------------------------------------------- overfit

pub struct Overfit {
    pub epochs: usize,
    pub car_iou: f64,
    pub seconds: f64,
    pub params: Vec<Vec<f32>>,
}

pub fn overfit_frames(n: u64, height: usize, width: usize) -> Vec<TrainFrame> {
    let grid = GridConfig {
        height,
        width,
        ..GridConfig::default()
    };
    let lidar = LidarConfig::from_grid(&grid);
    (0..n)
        .map(|s| {
            let f = simulator::synth_frame(s, &GenConfig::default(), &lidar).unwrap();
            TrainFrame {
                grid: f.grid,
                labels: f.labels,
            }
        })
        .collect()
}

pub fn car_iou(net: &NetworkParams<f32>, frames: &[TrainFrame]) -> f64 {
    let mut total = Counts::default();
    for f in frames {
        let (_, probs) = net.forward(&f.grid).unwrap();
        let pred = argmax_labels(&probs.cast::<f64>(), &f.grid.mask);
        total += eval::class_counts(&pred, &f.labels).unwrap()[Class::Car.index()];
    }
    total.iou().value().unwrap_or(0.0)
}

/// Trains the toy profile until the training-set car IoU reaches `target`
/// or `max_epochs` pass.
pub fn toy_overfit(frames: &[TrainFrame], seed: u64, max_epochs: usize, target: f64) -> Overfit {
    let t0 = Instant::now();
    let mut net = NetworkParams::<f32>::init(Profile::Toy, NUM_CLASSES, seed).unwrap();
    let grids: Vec<&SphericalGrid> = frames.iter().map(|f| &f.grid).collect();
    net.input_norm = InputNorm::fit(&grids).unwrap();
    let labels: Vec<&LabelGrid> = frames.iter().map(|f| &f.labels).collect();
    let mut trainer = Trainer::new(TrainConfig {
        lr: 0.01,
        momentum: 0.9,
        batch_size: 1,
        class_weights: inverse_frequency_weights(&labels),
        noise: None,
    })
    .unwrap();
    let mut iou = 0.0;
    let mut epochs = 0;
    while epochs < max_epochs {
        trainer.train_epoch(frames, &mut net, seed.wrapping_add(epochs as u64)).unwrap();
        epochs += 1;
        iou = car_iou(&net, frames);
        if iou >= target {
            break;
        }
    }
    Overfit {
        epochs,
        car_iou: iou,
        seconds: t0.elapsed().as_secs_f64(),
        params: net.params().iter().map(|(_, t)| t.data().to_vec()).collect(),
    }
}

/// Pairs of (instances, noise) per class must cover each class's cells
/// exactly once.
pub fn partition_ok(set: &InstanceSet, labels: &LabelGrid) -> bool {
    Class::OBJECTS.iter().all(|&c| {
        let ClassInstances { instances, noise } = set.class(c);
        let mut all: Vec<usize> = instances.iter().flatten().chain(noise).copied().collect();
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        let want: Vec<usize> = (0..labels.classes().len())
            .filter(|&i| labels.mask()[i] && labels.class_at(i) == c.id())
            .collect();
        n == all.len() && all == want
    })
}
