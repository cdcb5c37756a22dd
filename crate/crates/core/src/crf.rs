//! Mean-field CRF refinement over a local window of the range image.
//!
//! Each iteration aggregates neighbor probabilities weighted by a bilateral
//! (angle + position) and a spatial Gaussian kernel, mixes the aggregate
//! through a K×K compatibility matrix and re-normalizes `logits + r`.

use crate::error::{Error, Result};
use crate::projection::{LabelGrid, SphericalGrid};
use crate::tensor::{softmax_channels_backward, Scalar, Tensor};

pub const WINDOW_H: usize = 3;
pub const WINDOW_W: usize = 5;
const OFFSETS: usize = WINDOW_H * WINDOW_W;
const CENTER: usize = OFFSETS / 2;
/// Probabilities below this are clamped when evaluating the energy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub w1: f64,
    pub w2: f64,
    /// Angular bandwidth of the bilateral kernel, in bins.
    pub sigma_alpha: f64,
    /// Cartesian bandwidth of the bilateral kernel, in meters.
    pub sigma_beta: f64,
    /// Angular bandwidth of the spatial kernel, in bins.
    pub sigma_gamma: f64,
    pub num_classes: usize,
    /// Row-major K×K; `r[k] = Σ_l compat[k][l] · m[l]`.
    pub compat: Vec<f64>,
    pub iterations: usize,
}

impl CrfParams {
    /// Defaults with a Potts compatibility (`identity - ones`).
    pub fn new(num_classes: usize) -> Self {
        CrfParams {
            w1: 1.0,
            w2: 0.3,
            sigma_alpha: 3.0,
            sigma_beta: 0.5,
            sigma_gamma: 1.5,
            num_classes,
            compat: potts(num_classes),
            iterations: 3,
        }
    }

    /// Zero weights and zero compatibility: refinement is the identity.
    pub fn identity(num_classes: usize) -> Self {
        CrfParams {
            w1: 0.0,
            w2: 0.0,
            compat: vec![0.0; num_classes * num_classes],
            ..CrfParams::new(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, s) in [
            ("sigma_alpha", self.sigma_alpha),
            ("sigma_beta", self.sigma_beta),
            ("sigma_gamma", self.sigma_gamma),
        ] {
            if !(s > 0.0) {
                return bad(format!("{name} must be > 0, got {s}"));
            }
        }
        if !self.w1.is_finite() || !self.w2.is_finite() {
            return bad("kernel weights must be finite".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.num_classes == 0 || self.compat.len() != self.num_classes * self.num_classes {
            return bad(format!(
                "compat has {} entries for {} classes",
                self.compat.len(),
                self.num_classes
            ));
        }
        if self.compat.iter().any(|v| !v.is_finite()) {
            return bad("compat must be finite".into());
        }
        Ok(())
    }
}

pub fn potts(k: usize) -> Vec<f64> {
    (0..k * k).map(|i| if i / k == i % k { 0.0 } else { -1.0 }).collect()
}

/// Per-cell, per-offset kernel values for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    height: usize,
    width: usize,
    mask: Vec<bool>,
    k1: Vec<f64>,
    k2: Vec<f64>,
}

fn offset(o: usize) -> (isize, isize) {
    (
        (o / WINDOW_W) as isize - (WINDOW_H / 2) as isize,
        (o % WINDOW_W) as isize - (WINDOW_W / 2) as isize,
    )
}

impl KernelField {
    /// Builds a field from explicit values laid out `[cell][offset]`.
    /// Entries at the center offset or toward unoccupied or out-of-range
    /// neighbors are forced to zero.
    pub fn from_values(
        height: usize,
        width: usize,
        mask: Vec<bool>,
        mut k1: Vec<f64>,
        mut k2: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width * OFFSETS;
        if mask.len() != height * width || k1.len() != n || k2.len() != n {
            return Err(Error::shape("KernelField", format!("{height}x{width} field")));
        }
        if k1.iter().chain(&k2).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("kernel values must lie in [0, 1]".into()));
        }
        for i in 0..height * width {
            for o in 0..OFFSETS {
                if Self::neighbor_in(height, width, &mask, i, o).is_none() {
                    k1[i * OFFSETS + o] = 0.0;
                    k2[i * OFFSETS + o] = 0.0;
                }
            }
        }
        Ok(KernelField {
            height,
            width,
            mask,
            k1,
            k2,
        })
    }

    fn neighbor_in(h: usize, w: usize, mask: &[bool], i: usize, o: usize) -> Option<usize> {
        if o == CENTER || !mask[i] {
            return None;
        }
        let (dr, dc) = offset(o);
        let r = (i / w) as isize + dr;
        let c = (i % w) as isize + dc;
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            return None;
        }
        let j = r as usize * w + c as usize;
        mask[j].then_some(j)
    }

    fn neighbor(&self, i: usize, o: usize) -> Option<usize> {
        Self::neighbor_in(self.height, self.width, &self.mask, i, o)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `(k1, k2)` between cell `i` and the neighbor at window offset
    /// `(dr, dc)`; zero if there is no occupied neighbor there.
    pub fn get(&self, i: usize, dr: isize, dc: isize) -> (f64, f64) {
        let (hr, hc) = ((WINDOW_H / 2) as isize, (WINDOW_W / 2) as isize);
        if dr.abs() > hr || dc.abs() > hc {
            return (0.0, 0.0);
        }
        let o = ((dr + hr) as usize) * WINDOW_W + (dc + hc) as usize;
        (self.k1[i * OFFSETS + o], self.k2[i * OFFSETS + o])
    }

    fn combined(&self, params: &CrfParams) -> Vec<f64> {
        self.k1
            .iter()
            .zip(&self.k2)
            .map(|(a, b)| params.w1 * a + params.w2 * b)
            .collect()
    }
}

pub fn build_kernels(grid: &SphericalGrid, params: &CrfParams) -> KernelField {
    let (h, w) = (grid.height(), grid.width());
    let mut k1 = vec![0.0; h * w * OFFSETS];
    let mut k2 = vec![0.0; h * w * OFFSETS];
    let a = 2.0 * params.sigma_alpha * params.sigma_alpha;
    let b = 2.0 * params.sigma_beta * params.sigma_beta;
    let g = 2.0 * params.sigma_gamma * params.sigma_gamma;
    for i in 0..h * w {
        let xi = grid.position(i);
        for o in 0..OFFSETS {
            let Some(j) = KernelField::neighbor_in(h, w, &grid.mask, i, o) else {
                continue;
            };
            let (dr, dc) = offset(o);
            let dp = (dr * dr + dc * dc) as f64;
            let xj = grid.position(j);
            let dx: f64 = (0..3).map(|d| (xi[d] - xj[d]).powi(2)).sum();
            k1[i * OFFSETS + o] = (-dp / a - dx / b).exp();
            k2[i * OFFSETS + o] = (-dp / g).exp();
        }
    }
    KernelField {
        height: h,
        width: w,
        mask: grid.mask.clone(),
        k1,
        k2,
    }
}

fn check_probs<T: Scalar>(probs: &Tensor<T>, kernels: &KernelField, k: usize, op: &'static str) -> Result<()> {
    if probs.dims() != [kernels.height, kernels.width, k] {
        return Err(Error::shape(
            op,
            format!(
                "map {:?} vs kernels {}x{} with {k} classes",
                probs.dims(),
                kernels.height,
                kernels.width
            ),
        ));
    }
    Ok(())
}

fn pass<T: Scalar>(probs: &[T], kernels: &KernelField, weights: &[f64], k: usize, transpose: bool) -> Vec<T> {
    let mut out = vec![T::zero(); probs.len()];
    for i in 0..kernels.height * kernels.width {
        for o in 0..OFFSETS {
            let Some(j) = kernels.neighbor(i, o) else {
                continue;
            };
            let a = T::of(weights[i * OFFSETS + o]);
            if a == T::zero() {
                continue;
            }
            let (dst, src) = if transpose { (j, i) } else { (i, j) };
            for c in 0..k {
                let v = a * probs[src * k + c];
                out[dst * k + c] += v;
            }
        }
    }
    out
}

/// Kernel-weighted sum of neighbor probabilities, excluding the cell itself.
pub fn message_pass<T: Scalar>(probs: &Tensor<T>, kernels: &KernelField, params: &CrfParams) -> Result<Tensor<T>> {
    let k = probs.dims().last().copied().unwrap_or(0);
    check_probs(probs, kernels, k, "message_pass")?;
    let out = pass(probs.data(), kernels, &kernels.combined(params), k, false);
    Tensor::from_vec(probs.dims(), out)
}

/// Adjoint of [`message_pass`]: scatters each cell's value back to its neighbors.
pub fn message_pass_transpose<T: Scalar>(
    grad: &Tensor<T>,
    kernels: &KernelField,
    params: &CrfParams,
) -> Result<Tensor<T>> {
    let k = grad.dims().last().copied().unwrap_or(0);
    check_probs(grad, kernels, k, "message_pass_transpose")?;
    let out = pass(grad.data(), kernels, &kernels.combined(params), k, true);
    Tensor::from_vec(grad.dims(), out)
}

fn masked_softmax<T: Scalar>(z: &mut [T], mask: &[bool], k: usize) {
    for (cell, &m) in z.chunks_exact_mut(k).zip(mask) {
        if m {
            crate::tensor::softmax_in_place(cell);
        } else {
            cell.fill(T::zero());
        }
    }
}

fn apply_compat<T: Scalar>(m: &[T], compat: &[T], k: usize, transpose: bool) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for (src, dst) in m.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        for a in 0..k {
            let mut s = T::zero();
            for b in 0..k {
                let c = if transpose { compat[b * k + a] } else { compat[a * k + b] };
                s += c * src[b];
            }
            dst[a] = s;
        }
    }
    out
}

/// Intermediate maps from a refinement, for backpropagation.
#[derive(Debug, Clone)]
pub struct CrfTape<T: Scalar> {
    /// `q_0 ..= q_T`; the last entry is the refined output.
    pub probs: Vec<Tensor<T>>,
    /// Messages `m_0 .. m_{T-1}` computed from the matching `probs` entry.
    pub messages: Vec<Tensor<T>>,
    kernels: KernelField,
}

impl<T: Scalar> CrfTape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.probs.last().expect("tape holds at least q_0")
    }
}

pub struct CrfGrads<T: Scalar> {
    pub logits: Tensor<T>,
    /// Row-major K×K.
    pub compat: Vec<T>,
}

/// Runs the recurrent refinement and keeps every intermediate map.
pub fn refine_traced<T: Scalar>(logits: &Tensor<T>, grid: &SphericalGrid, params: &CrfParams) -> Result<CrfTape<T>> {
    params.validate()?;
    let kernels = build_kernels(grid, params);
    refine_with_kernels(logits, kernels, params)
}

/// As [`refine_traced`], with a precomputed kernel field.
pub fn refine_with_kernels<T: Scalar>(
    logits: &Tensor<T>,
    kernels: KernelField,
    params: &CrfParams,
) -> Result<CrfTape<T>> {
    params.validate()?;
    let k = params.num_classes;
    check_probs(logits, &kernels, k, "crf refine")?;
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "crf refine" });
    }
    let weights = kernels.combined(params);
    let compat: Vec<T> = params.compat.iter().map(|&v| T::of(v)).collect();

    let mut q = logits.data().to_vec();
    masked_softmax(&mut q, &kernels.mask, k);
    let mut probs = vec![Tensor::from_vec(logits.dims(), q)?];
    let mut messages = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let m = pass(probs.last().unwrap().data(), &kernels, &weights, k, false);
        let r = apply_compat(&m, &compat, k, false);
        let mut z: Vec<T> = logits.data().iter().zip(&r).map(|(&a, &b)| a + b).collect();
        masked_softmax(&mut z, &kernels.mask, k);
        messages.push(Tensor::from_vec(logits.dims(), m)?);
        probs.push(Tensor::from_vec(logits.dims(), z)?.ensure_finite("crf refine")?);
    }
    Ok(CrfTape {
        probs,
        messages,
        kernels,
    })
}

/// Refined class probabilities; unoccupied cells stay zero.
pub fn refine<T: Scalar>(logits: &Tensor<T>, grid: &SphericalGrid, params: &CrfParams) -> Result<Tensor<T>> {
    Ok(refine_traced(logits, grid, params)?.probs.pop().unwrap())
}

/// Gradients of a scalar loss with respect to the logits and compatibility,
/// given its gradient with respect to the refined output.
pub fn refine_backward<T: Scalar>(tape: &CrfTape<T>, params: &CrfParams, grad_out: &Tensor<T>) -> Result<CrfGrads<T>> {
    let k = params.num_classes;
    let out = tape.output();
    if grad_out.dims() != out.dims() {
        return Err(Error::shape(
            "crf backward",
            format!("gradient {:?} vs output {:?}", grad_out.dims(), out.dims()),
        ));
    }
    let weights = tape.kernels.combined(params);
    let compat: Vec<T> = params.compat.iter().map(|&v| T::of(v)).collect();
    let mut g_logits = vec![T::zero(); out.len()];
    let mut g_compat = vec![T::zero(); k * k];
    let mut gq = grad_out.clone();
    for t in (0..params.iterations).rev() {
        let gz = softmax_channels_backward(&tape.probs[t + 1], &gq)?;
        let m = tape.messages[t].data();
        for (cell, (gzc, mc)) in gz.data().chunks_exact(k).zip(m.chunks_exact(k)).enumerate() {
            if !tape.kernels.mask[cell] {
                continue;
            }
            for a in 0..k {
                g_logits[cell * k + a] += gzc[a];
                for b in 0..k {
                    g_compat[a * k + b] += gzc[a] * mc[b];
                }
            }
        }
        let gm = apply_compat(gz.data(), &compat, k, true);
        let g = pass(&gm, &tape.kernels, &weights, k, true);
        gq = Tensor::from_vec(out.dims(), g)?;
    }
    let gz = softmax_channels_backward(&tape.probs[0], &gq)?;
    for (cell, gzc) in gz.data().chunks_exact(k).enumerate() {
        if tape.kernels.mask[cell] {
            for a in 0..k {
                g_logits[cell * k + a] += gzc[a];
            }
        }
    }
    Ok(CrfGrads {
        logits: Tensor::from_vec(out.dims(), g_logits)?,
        compat: g_compat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub value: f64,
    pub unary: f64,
    pub pairwise: f64,
    /// Cells whose assigned-label probability fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Potts energy of a labeling: unary `-ln P(c_i)` plus the kernel weight of
/// every disagreeing unordered pair in the window.
pub fn energy<T: Scalar>(labels: &LabelGrid, logits: &Tensor<T>, grid: &SphericalGrid, params: &CrfParams) -> Result<Energy> {
    params.validate()?;
    let kernels = build_kernels(grid, params);
    energy_with_kernels(labels, logits, &kernels, params)
}

pub fn energy_with_kernels<T: Scalar>(
    labels: &LabelGrid,
    logits: &Tensor<T>,
    kernels: &KernelField,
    params: &CrfParams,
) -> Result<Energy> {
    let k = params.num_classes;
    check_probs(logits, kernels, k, "crf energy")?;
    if labels.height() != kernels.height || labels.width() != kernels.width {
        return Err(Error::shape("crf energy", "labels do not match the grid"));
    }
    let mut q = logits.data().to_vec();
    masked_softmax(&mut q, &kernels.mask, k);
    let weights = kernels.combined(params);
    let (mut unary, mut pairwise, mut clamped) = (0.0, 0.0, 0);
    for i in 0..kernels.height * kernels.width {
        if !kernels.mask[i] {
            continue;
        }
        let c = labels.class_at(i) as usize;
        if c >= k {
            return Err(Error::InvalidArgument(format!("label {c} at cell {i} >= {k} classes")));
        }
        let p = q[i * k + c].as_f64();
        if p < PROB_FLOOR {
            clamped += 1;
        }
        unary -= p.max(PROB_FLOOR).ln();
        for o in CENTER + 1..OFFSETS {
            if let Some(j) = kernels.neighbor(i, o) {
                if labels.class_at(j) as usize != c {
                    pairwise += weights[i * OFFSETS + o];
                }
            }
        }
    }
    Ok(Energy {
        value: unary + pairwise,
        unary,
        pairwise,
        clamped,
    })
}
