use crate::class::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::projection::LabelGrid;
use crate::tensor::{Scalar, Tensor};

/// Class-weighted softmax cross-entropy, averaged over occupied cells.
///
/// Returns the loss and its gradient with respect to the logits; unoccupied
/// cells get zero gradient.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    classes: &[u8],
    mask: &[bool],
    class_weights: &[f64],
) -> Result<(T, Tensor<T>)> {
    let (h, w, k) = logits.hwc("loss")?;
    if classes.len() != h * w || mask.len() != h * w {
        return Err(Error::shape(
            "loss",
            format!("logits {:?}, {} labels, {} mask", logits.dims(), classes.len(), mask.len()),
        ));
    }
    if class_weights.len() != k {
        return Err(Error::shape("loss", format!("{} class weights for {k} classes", class_weights.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Empty("loss over a frame with no occupied cells"));
    }
    let inv_n = T::of(1.0 / n as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (idx, (z, g)) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.chunks_exact_mut(k))
        .enumerate()
    {
        if !mask[idx] {
            continue;
        }
        let c = classes[idx] as usize;
        if c >= k {
            return Err(Error::InvalidArgument(format!("label {c} at cell {idx} >= {k} classes")));
        }
        let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum = z.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        let log_sum = sum.ln() + m;
        let wc = T::of(class_weights[c]);
        total += wc * (log_sum - z[c]);
        for (j, (gj, &zj)) in g.iter_mut().zip(z).enumerate() {
            let p = (zj - log_sum).exp();
            let target = if j == c { T::one() } else { T::zero() };
            *gj = wc * (p - target) * inv_n;
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok((loss, Tensor::from_vec(logits.dims(), grad)?))
}

pub fn loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelGrid,
    class_weights: &[f64],
) -> Result<(T, Tensor<T>)> {
    softmax_cross_entropy(logits, labels.classes(), labels.mask(), class_weights)
}

/// Inverse-frequency weights `N / (K * n_c)` over occupied cells, clamped to
/// `[0.1, 10]`. Absent classes get the upper clamp.
pub fn inverse_frequency_weights(labels: &[&LabelGrid]) -> [f64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for l in labels {
        for (&c, &m) in l.classes().iter().zip(l.mask()) {
            if m {
                counts[c as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let mut w = [1.0; NUM_CLASSES];
    for (wc, &n) in w.iter_mut().zip(&counts) {
        *wc = if n == 0 {
            10.0
        } else {
            (total as f64 / (NUM_CLASSES as f64 * n as f64)).clamp(0.1, 10.0)
        };
    }
    w
}
