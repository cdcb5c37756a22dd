use super::{Activation, ConvSpec, Scalar, Tensor};
use crate::error::{Error, Result};

/// Width of the up-sampling kernel.
pub const DECONV_KERNEL_W: usize = 4;
/// Width stride of the up-sampling kernel; output width is exactly `2 * W`.
pub const DECONV_STRIDE_W: usize = 2;
/// Width padding trimmed from each side of the full transposed output.
pub const DECONV_PAD_W: usize = 1;

/// Gradients of a convolution-like layer.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_weights<T: Scalar>(
    op: &'static str,
    cin: usize,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    kh: usize,
    kw: usize,
) -> Result<usize> {
    let cout = match weights.dims()[..] {
        [a, b, c, d] if a == kh && b == kw && c == cin => d,
        _ => {
            return Err(Error::shape(
                op,
                format!(
                    "weights {:?} incompatible with kernel {kh}x{kw} and {cin} input channels",
                    weights.dims()
                ),
            ))
        }
    };
    if bias.dims() != [cout] {
        return Err(Error::shape(op, format!("bias {:?}, expected [{cout}]", bias.dims())));
    }
    Ok(cout)
}

fn apply_activation<T: Scalar>(out: &mut [T], act: Activation) {
    if act == Activation::Relu {
        for v in out.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
}

/// The upstream gradient with the activation's derivative applied.
fn activation_grad<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    act: Activation,
) -> Vec<T> {
    match act {
        Activation::None => grad_out.data().to_vec(),
        Activation::Relu => output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// Zero-padded cross-correlation, `[H, W, Cin] * [kh, kw, Cin, Cout] -> [H', W', Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc("conv2d")?;
    let cout = check_weights("conv2d", cin, weights, bias, spec.kernel_h, spec.kernel_w)?;
    let (ho, wo) = spec.output_dims(h, w)?;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![T::zero(); ho * wo * cout];

    for oy in 0..ho {
        for ox in 0..wo {
            let acc = &mut out[(oy * wo + ox) * cout..][..cout];
            acc.copy_from_slice(bias.data());
            for ky in 0..spec.kernel_h {
                let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kernel_w {
                    let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wbase = (ky * spec.kernel_w + kx) * cin * cout;
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &wt[wbase + ci * cout..][..cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    apply_activation(&mut out, spec.activation);
    Tensor::from_vec(&[ho, wo, cout], out)?.ensure_finite("conv2d")
}

/// Backward pass of [`conv2d`]; `output` is the forward result (needed for
/// the activation mask).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let (h, w, cin) = input.hwc("conv2d_backward")?;
    let (_, _, _, cout) = match weights.dims()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d_backward", "weights must be rank 4")),
    };
    let (ho, wo) = spec.output_dims(h, w)?;
    if output.dims() != [ho, wo, cout] || grad_out.dims() != output.dims() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("output {:?}, grad {:?}", output.dims(), grad_out.dims()),
        ));
    }
    let g = activation_grad(output, grad_out, spec.activation);
    let x = input.data();
    let wt = weights.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); cout];

    for oy in 0..ho {
        for ox in 0..wo {
            let grow = &g[(oy * wo + ox) * cout..][..cout];
            if grow.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for (b, &gv) in gb.iter_mut().zip(grow) {
                *b += gv;
            }
            for ky in 0..spec.kernel_h {
                let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kernel_w {
                    let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let poff = (iy as usize * w + ix as usize) * cin;
                    let wbase = (ky * spec.kernel_w + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = &wt[wbase + ci * cout..][..cout];
                        let mut s = T::zero();
                        for (&wv, &gv) in wrow.iter().zip(grow) {
                            s += wv * gv;
                        }
                        gx[poff + ci] += s;
                        let xv = x[poff + ci];
                        if xv != T::zero() {
                            let gwrow = &mut gw[wbase + ci * cout..][..cout];
                            for (a, &gv) in gwrow.iter_mut().zip(grow) {
                                *a += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.dims(), gx)?,
        weights: Tensor::from_vec(weights.dims(), gw)?,
        bias: Tensor::from_vec(&[cout], gb)?,
    })
}

/// Width-only transposed convolution with a `1 x 4` kernel and stride 2:
/// `[H, W, Cin] -> [H, 2W, Cout]`.
///
/// Input column `ix` scatters into output columns `2*ix + k - 1` for
/// `k in 0..4`; the full transposed output is `2W + 2` wide and one column
/// is trimmed from each side.
pub fn deconv2d_width<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc("deconv2d_width")?;
    let cout = check_weights("deconv2d_width", cin, weights, bias, 1, DECONV_KERNEL_W)?;
    let wo = w * DECONV_STRIDE_W;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![T::zero(); h * wo * cout];
    for px in out.chunks_exact_mut(cout) {
        px.copy_from_slice(bias.data());
    }
    for y in 0..h {
        for ix in 0..w {
            let px = &x[(y * w + ix) * cin..][..cin];
            for k in 0..DECONV_KERNEL_W {
                let ox = (ix * DECONV_STRIDE_W + k) as isize - DECONV_PAD_W as isize;
                if ox < 0 || ox >= wo as isize {
                    continue;
                }
                let acc = &mut out[(y * wo + ox as usize) * cout..][..cout];
                for (ci, &xv) in px.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    let wrow = &wt[(k * cin + ci) * cout..][..cout];
                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                        *a += xv * wv;
                    }
                }
            }
        }
    }
    apply_activation(&mut out, activation);
    Tensor::from_vec(&[h, wo, cout], out)?.ensure_finite("deconv2d_width")
}

pub fn deconv2d_width_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    activation: Activation,
) -> Result<ConvGrads<T>> {
    let (h, w, cin) = input.hwc("deconv2d_width_backward")?;
    let cout = *weights.dims().last().unwrap_or(&0);
    let wo = w * DECONV_STRIDE_W;
    if output.dims() != [h, wo, cout] || grad_out.dims() != output.dims() {
        return Err(Error::shape(
            "deconv2d_width_backward",
            format!("output {:?}, grad {:?}", output.dims(), grad_out.dims()),
        ));
    }
    let g = activation_grad(output, grad_out, activation);
    let x = input.data();
    let wt = weights.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); cout];
    for grow in g.chunks_exact(cout) {
        for (b, &gv) in gb.iter_mut().zip(grow) {
            *b += gv;
        }
    }
    for y in 0..h {
        for ix in 0..w {
            let poff = (y * w + ix) * cin;
            for k in 0..DECONV_KERNEL_W {
                let ox = (ix * DECONV_STRIDE_W + k) as isize - DECONV_PAD_W as isize;
                if ox < 0 || ox >= wo as isize {
                    continue;
                }
                let grow = &g[(y * wo + ox as usize) * cout..][..cout];
                for ci in 0..cin {
                    let wrow = &wt[(k * cin + ci) * cout..][..cout];
                    let mut s = T::zero();
                    for (&wv, &gv) in wrow.iter().zip(grow) {
                        s += wv * gv;
                    }
                    gx[poff + ci] += s;
                    let xv = x[poff + ci];
                    if xv != T::zero() {
                        let gwrow = &mut gw[(k * cin + ci) * cout..][..cout];
                        for (a, &gv) in gwrow.iter_mut().zip(grow) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.dims(), gx)?,
        weights: Tensor::from_vec(weights.dims(), gw)?,
        bias: Tensor::from_vec(&[cout], gb)?,
    })
}
