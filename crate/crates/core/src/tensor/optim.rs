use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Plain gradient descent: `p <- p - lr * grad`, then zero the gradients.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
    if !(lr >= T::zero()) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {lr:?}")));
    }
    if params.iter().any(|p| p.grad().is_none()) {
        return Err(Error::MissingGrad);
    }
    for p in params.iter_mut() {
        let g = p.grad.take().unwrap_or_default();
        for (v, &gv) in p.data.iter_mut().zip(&g) {
            *v -= lr * gv;
        }
        p.grad = Some(g);
        p.zero_grad();
    }
    Ok(())
}
