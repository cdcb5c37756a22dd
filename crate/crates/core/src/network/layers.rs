use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, deconv2d_width, deconv2d_width_backward,
    split_channels, Activation, ConvSpec, Scalar, Tensor, DECONV_KERNEL_W, DECONV_STRIDE_W,
};

/// Weight count and multiply count of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub weights: u64,
    pub multiplies: u64,
}

fn uniform_init<T: Scalar, R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(dims, data).expect("init dims are positive")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv<T> {
    pub fn init<R: Rng>(cin: usize, cout: usize, spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.kernel_h * spec.kernel_w * cin;
        Conv {
            weight: uniform_init(&[spec.kernel_h, spec.kernel_w, cin, cout], fan_in, rng),
            bias: Tensor::zeros(&[cout]),
            spec,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[3]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, &self.bias, &self.spec)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, &self.weight, y, gy, &self.spec)?;
        self.weight.accumulate_grad(g.weights.data())?;
        self.bias.accumulate_grad(g.bias.data())?;
        Ok(g.input)
    }

    pub fn count(&self, name: &str, out_h: usize, out_w: usize) -> LayerCount {
        let weights = self.weight.len() as u64;
        LayerCount {
            name: name.to_string(),
            weights,
            multiplies: weights * (out_h * out_w) as u64,
        }
    }

    pub fn params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }

    pub fn params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{name}.weight"), &mut self.weight));
        out.push((format!("{name}.bias"), &mut self.bias));
    }
}

/// Width-doubling transposed convolution (`1 x 4`, stride 2).
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> Deconv<T> {
    pub fn init<R: Rng>(cin: usize, cout: usize, activation: Activation, rng: &mut R) -> Self {
        // Each output column receives two of the four taps.
        let fan_in = cin * DECONV_KERNEL_W / DECONV_STRIDE_W;
        Deconv {
            weight: uniform_init(&[1, DECONV_KERNEL_W, cin, cout], fan_in, rng),
            bias: Tensor::zeros(&[cout]),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        deconv2d_width(x, &self.weight, &self.bias, self.activation)
    }

    pub fn backward(&mut self, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = deconv2d_width_backward(x, &self.weight, y, gy, self.activation)?;
        self.weight.accumulate_grad(g.weights.data())?;
        self.bias.accumulate_grad(g.bias.data())?;
        Ok(g.input)
    }

    /// Multiplies are counted per input pixel: every input column feeds all
    /// four taps.
    pub fn count(&self, name: &str, in_h: usize, in_w: usize) -> LayerCount {
        let weights = self.weight.len() as u64;
        LayerCount {
            name: name.to_string(),
            weights,
            multiplies: weights * (in_h * in_w) as u64,
        }
    }
}

fn check_divisible(op: &'static str, c: usize) -> Result<()> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::InvalidArgument(format!("{op}: channel count {c} not divisible by 4")));
    }
    Ok(())
}

/// Squeeze (1x1 to C/4) then parallel 1x1 and 3x3 expands (C/2 each),
/// concatenated back to C channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FireModule<T> {
    pub squeeze: Conv<T>,
    pub expand1: Conv<T>,
    pub expand3: Conv<T>,
}

#[derive(Debug, Clone)]
pub struct FireCache<T> {
    squeezed: Tensor<T>,
    e1: Tensor<T>,
    e3: Tensor<T>,
}

impl<T: Scalar> FireModule<T> {
    pub fn init<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        check_divisible("fire module", cout)?;
        let s = cout / 4;
        let e = cout / 2;
        Ok(FireModule {
            squeeze: Conv::init(cin, s, ConvSpec::same(1, 1, Activation::Relu), rng),
            expand1: Conv::init(s, e, ConvSpec::same(1, 1, Activation::Relu), rng),
            expand3: Conv::init(s, e, ConvSpec::same(3, 3, Activation::Relu), rng),
        })
    }

    /// All weights and biases zero.
    pub fn zeros(cin: usize, cout: usize) -> Result<Self> {
        let mut f = Self::init(cin, cout, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        for (_, t) in f.params_mut("") {
            t.data_mut().fill(T::zero());
        }
        Ok(f)
    }

    pub fn out_channels(&self) -> usize {
        self.expand1.out_channels() + self.expand3.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FireCache<T>)> {
        let (_, _, c) = x.hwc("fire_forward")?;
        if c != self.squeeze.in_channels() {
            return Err(Error::shape(
                "fire_forward",
                format!("{c} input channels, module expects {}", self.squeeze.in_channels()),
            ));
        }
        let squeezed = self.squeeze.forward(x)?;
        let e1 = self.expand1.forward(&squeezed)?;
        let e3 = self.expand3.forward(&squeezed)?;
        let out = concat_channels(&e1, &e3)?;
        Ok((out, FireCache { squeezed, e1, e3 }))
    }

    pub fn backward(&mut self, x: &Tensor<T>, cache: &FireCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (g1, g3) = split_channels(gy, self.expand1.out_channels())?;
        let gs1 = self.expand1.backward(&cache.squeezed, &cache.e1, &g1)?;
        let gs3 = self.expand3.backward(&cache.squeezed, &cache.e3, &g3)?;
        let gs = gs1.add(&gs3)?;
        let squeezed = &cache.squeezed;
        self.squeeze.backward(x, squeezed, &gs)
    }

    /// Counts at spatial size `h x w` (unchanged by the module).
    pub fn counts(&self, name: &str, h: usize, w: usize) -> Vec<LayerCount> {
        vec![
            self.squeeze.count(&format!("{name}.squeeze"), h, w),
            self.expand1.count(&format!("{name}.expand1"), h, w),
            self.expand3.count(&format!("{name}.expand3"), h, w),
        ]
    }

    pub fn weight_count(&self) -> u64 {
        (self.squeeze.weight.len() + self.expand1.weight.len() + self.expand3.weight.len()) as u64
    }

    pub fn params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.squeeze.params(&format!("{name}.squeeze"), out);
        self.expand1.params(&format!("{name}.expand1"), out);
        self.expand3.params(&format!("{name}.expand3"), out);
    }

    pub fn params_mut<'a>(&'a mut self, name: &str) -> Vec<(String, &'a mut Tensor<T>)> {
        let mut out = Vec::new();
        self.params_mut_into(name, &mut out);
        out
    }

    pub fn params_mut_into<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.squeeze.params_mut(&format!("{name}.squeeze"), out);
        self.expand1.params_mut(&format!("{name}.expand1"), out);
        self.expand3.params_mut(&format!("{name}.expand3"), out);
    }
}

/// Fire module with a width-doubling transposed convolution between squeeze
/// and expand.
#[derive(Debug, Clone, PartialEq)]
pub struct FireDeconv<T> {
    pub squeeze: Conv<T>,
    pub deconv: Deconv<T>,
    pub expand1: Conv<T>,
    pub expand3: Conv<T>,
}

#[derive(Debug, Clone)]
pub struct FireDeconvCache<T> {
    squeezed: Tensor<T>,
    upsampled: Tensor<T>,
    e1: Tensor<T>,
    e3: Tensor<T>,
}

impl<T: Scalar> FireDeconv<T> {
    pub fn init<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        check_divisible("fire deconv", cout)?;
        let s = cout / 4;
        let e = cout / 2;
        Ok(FireDeconv {
            squeeze: Conv::init(cin, s, ConvSpec::same(1, 1, Activation::Relu), rng),
            deconv: Deconv::init(s, s, Activation::Relu, rng),
            expand1: Conv::init(s, e, ConvSpec::same(1, 1, Activation::Relu), rng),
            expand3: Conv::init(s, e, ConvSpec::same(3, 3, Activation::Relu), rng),
        })
    }

    pub fn zeros(cin: usize, cout: usize) -> Result<Self> {
        let mut f = Self::init(cin, cout, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let mut ps = Vec::new();
        f.params_mut_into("", &mut ps);
        for (_, t) in ps {
            t.data_mut().fill(T::zero());
        }
        Ok(f)
    }

    pub fn out_channels(&self) -> usize {
        self.expand1.out_channels() + self.expand3.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FireDeconvCache<T>)> {
        let (_, _, c) = x.hwc("fire_deconv_forward")?;
        if c != self.squeeze.in_channels() {
            return Err(Error::shape(
                "fire_deconv_forward",
                format!("{c} input channels, module expects {}", self.squeeze.in_channels()),
            ));
        }
        let squeezed = self.squeeze.forward(x)?;
        let upsampled = self.deconv.forward(&squeezed)?;
        let e1 = self.expand1.forward(&upsampled)?;
        let e3 = self.expand3.forward(&upsampled)?;
        let out = concat_channels(&e1, &e3)?;
        Ok((
            out,
            FireDeconvCache {
                squeezed,
                upsampled,
                e1,
                e3,
            },
        ))
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        cache: &FireDeconvCache<T>,
        gy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (g1, g3) = split_channels(gy, self.expand1.out_channels())?;
        let gu1 = self.expand1.backward(&cache.upsampled, &cache.e1, &g1)?;
        let gu3 = self.expand3.backward(&cache.upsampled, &cache.e3, &g3)?;
        let gu = gu1.add(&gu3)?;
        let gs = self.deconv.backward(&cache.squeezed, &cache.upsampled, &gu)?;
        self.squeeze.backward(x, &cache.squeezed, &gs)
    }

    /// Counts for an input of spatial size `h x w`.
    pub fn counts(&self, name: &str, h: usize, w: usize) -> Vec<LayerCount> {
        let wo = w * DECONV_STRIDE_W;
        vec![
            self.squeeze.count(&format!("{name}.squeeze"), h, w),
            self.deconv.count(&format!("{name}.deconv"), h, w),
            self.expand1.count(&format!("{name}.expand1"), h, wo),
            self.expand3.count(&format!("{name}.expand3"), h, wo),
        ]
    }

    pub fn weight_count(&self) -> u64 {
        (self.squeeze.weight.len()
            + self.deconv.weight.len()
            + self.expand1.weight.len()
            + self.expand3.weight.len()) as u64
    }

    pub fn params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.squeeze.params(&format!("{name}.squeeze"), out);
        out.push((format!("{name}.deconv.weight"), &self.deconv.weight));
        out.push((format!("{name}.deconv.bias"), &self.deconv.bias));
        self.expand1.params(&format!("{name}.expand1"), out);
        self.expand3.params(&format!("{name}.expand3"), out);
    }

    pub fn params_mut_into<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.squeeze.params_mut(&format!("{name}.squeeze"), out);
        out.push((format!("{name}.deconv.weight"), &mut self.deconv.weight));
        out.push((format!("{name}.deconv.bias"), &mut self.deconv.bias));
        self.expand1.params_mut(&format!("{name}.expand1"), out);
        self.expand3.params_mut(&format!("{name}.expand3"), out);
    }
}

/// Weights and multiplies of a plain `k x k` convolution mapping `C -> C` at
/// `h x w`.
pub fn plain_conv_count(c: usize, k: usize, h: usize, w: usize) -> LayerCount {
    let weights = (k * k * c * c) as u64;
    LayerCount {
        name: format!("conv{k}x{k}"),
        weights,
        multiplies: weights * (h * w) as u64,
    }
}

/// Weights and multiplies of a plain `1 x 4` width-doubling deconvolution
/// mapping `C -> C` from an `h x w` input.
pub fn plain_deconv_count(c: usize, h: usize, w: usize) -> LayerCount {
    let weights = (DECONV_KERNEL_W * c * c) as u64;
    LayerCount {
        name: "deconv1x4".into(),
        weights,
        multiplies: weights * (h * w) as u64,
    }
}
