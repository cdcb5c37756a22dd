use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output of [`maxpool_width`] plus the argmax routing table for backward.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    /// For every output element, the input column that held the maximum.
    pub argmax: Vec<u32>,
}

/// Max over width windows, per row and channel. Padding columns never win.
/// Ties go to the lowest column.
pub fn maxpool_width<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<Pooled<T>> {
    let (h, w, c) = input.hwc("maxpool_width")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
    }
    if window > w + 2 * pad {
        return Err(Error::shape(
            "maxpool_width",
            format!("window {window} exceeds padded width {}", w + 2 * pad),
        ));
    }
    if pad >= window {
        return Err(Error::InvalidArgument(format!(
            "pad {pad} must be smaller than window {window}"
        )));
    }
    let wo = (w + 2 * pad - window) / stride + 1;
    let x = input.data();
    let mut out = vec![T::zero(); h * wo * c];
    let mut argmax = vec![0u32; h * wo * c];
    for y in 0..h {
        for ox in 0..wo {
            let start = (ox * stride) as isize - pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + window as isize) as usize).min(w);
            let obase = (y * wo + ox) * c;
            for ch in 0..c {
                let mut best = lo;
                let mut best_v = x[(y * w + lo) * c + ch];
                for ix in lo + 1..hi {
                    let v = x[(y * w + ix) * c + ch];
                    if v > best_v {
                        best_v = v;
                        best = ix;
                    }
                }
                out[obase + ch] = best_v;
                argmax[obase + ch] = best as u32;
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(&[h, wo, c], out)?,
        argmax,
    })
}

/// Routes each output gradient to the input column recorded in `argmax`.
pub fn maxpool_width_backward<T: Scalar>(
    input_dims: &[usize],
    pooled: &Pooled<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = match input_dims[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape("maxpool_width_backward", "input must be rank 3")),
    };
    if grad_out.dims() != pooled.output.dims() {
        return Err(Error::shape(
            "maxpool_width_backward",
            format!("grad {:?} vs output {:?}", grad_out.dims(), pooled.output.dims()),
        ));
    }
    let wo = pooled.output.dims()[1];
    let mut gx = vec![T::zero(); h * w * c];
    for y in 0..h {
        for ox in 0..wo {
            let obase = (y * wo + ox) * c;
            for ch in 0..c {
                let ix = pooled.argmax[obase + ch] as usize;
                gx[(y * w + ix) * c + ch] += grad_out.data()[obase + ch];
            }
        }
    }
    Tensor::from_vec(input_dims, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_one_is_identity() {
        let x = Tensor::<f32>::from_vec(&[2, 3, 1], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let p = maxpool_width(&x, 1, 1, 0).unwrap();
        assert_eq!(p.output, x);
    }

    #[test]
    fn direct_max() {
        let x = Tensor::<f32>::from_vec(&[1, 4, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let p = maxpool_width(&x, 2, 2, 0).unwrap();
        assert_eq!(p.output.data(), &[3.0, 5.0]);
        assert_eq!(p.argmax, vec![1, 3]);
    }

    #[test]
    fn ties_route_to_first() {
        let x = Tensor::<f64>::from_vec(&[1, 4, 1], vec![2.0, 2.0, 7.0, 7.0]).unwrap();
        let p = maxpool_width(&x, 2, 2, 0).unwrap();
        let g = maxpool_width_backward(x.dims(), &p, &Tensor::filled(&[1, 2, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1]);
        assert!(maxpool_width(&x, 3, 1, 0).is_err());
        assert!(maxpool_width(&x, 3, 2, 1).is_ok());
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, c, win, stride, pad) in
            &[(3, 9, 2, 3, 2, 1), (2, 8, 3, 2, 2, 0), (4, 16, 1, 3, 1, 1), (1, 5, 4, 5, 1, 0)]
        {
            let n = h * w * c;
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[h, w, c], data).unwrap();
            let p = maxpool_width(&x, win, stride, pad).unwrap();
            let wo = (w + 2 * pad - win) / stride + 1;
            for y in 0..h {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut m = f32::NEG_INFINITY;
                        for k in 0..win {
                            let ix = (ox * stride + k) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                m = m.max(x.data()[(y * w + ix as usize) * c + ch]);
                            }
                        }
                        assert_eq!(p.output.data()[(y * wo + ox) * c + ch], m);
                    }
                }
            }
        }
    }
}
