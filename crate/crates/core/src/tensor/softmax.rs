use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-cell softmax over the last axis, with max subtraction.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *input
        .dims()
        .last()
        .ok_or_else(|| Error::shape("softmax_channels", "rank 0"))?;
    if !input.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_channels",
        });
    }
    let mut out = input.data().to_vec();
    for cell in out.chunks_exact_mut(k) {
        softmax_in_place(cell);
    }
    Tensor::from_vec(input.dims(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(cell: &mut [T]) {
    let m = cell.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in cell.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in cell.iter_mut() {
        *v = *v / s;
    }
}

/// Vector-Jacobian product of the softmax: `q * (g - <q, g>)` per cell.
pub fn softmax_channels_backward<T: Scalar>(
    probs: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if probs.dims() != grad_out.dims() {
        return Err(Error::shape(
            "softmax_channels_backward",
            format!("{:?} vs {:?}", probs.dims(), grad_out.dims()),
        ));
    }
    let k = *probs.dims().last().unwrap_or(&1);
    let mut gz = vec![T::zero(); probs.len()];
    for ((q, g), out) in probs
        .data()
        .chunks_exact(k)
        .zip(grad_out.data().chunks_exact(k))
        .zip(gz.chunks_exact_mut(k))
    {
        let dot = q.iter().zip(g).fold(T::zero(), |a, (&qv, &gv)| a + qv * gv);
        for ((o, &qv), &gv) in out.iter_mut().zip(q).zip(g) {
            *o = qv * (gv - dot);
        }
    }
    Tensor::from_vec(probs.dims(), gz)
}
