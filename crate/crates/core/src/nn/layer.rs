use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Fully connected layer, `weight` is `(out_units, in_units)`.
///
/// Inputs with more than two dimensions are flattened per sample, so a
/// `Dense` may follow a `Conv2d` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn init(in_units: usize, out_units: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_units as f64).sqrt();
        let weight = uniform(&[out_units, in_units], bound, rng);
        let bias = uniform(&[out_units], bound, rng);
        Self { weight, bias }
    }

    pub fn in_units(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_units(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `(n, in) -> (n, out)` without caching.
    pub fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (out, inp) = (self.out_units(), self.in_units());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            let xi = &x[i * inp..(i + 1) * inp];
            let yi = &mut y[i * out..(i + 1) * out];
            for (o, yo) in yi.iter_mut().enumerate() {
                let row = &w[o * inp..(o + 1) * inp];
                *yo = b[o] + dot(row, xi);
            }
        }
        y
    }

    /// Parameter gradients for `(n, out)` upstream gradients on `(n, in)` inputs.
    pub fn param_grads(&self, x: &[f64], g: &[f64], n: usize) -> (Tensor, Tensor) {
        let (out, inp) = (self.out_units(), self.in_units());
        let mut gw = vec![0.0; out * inp];
        let mut gb = vec![0.0; out];
        for i in 0..n {
            let xi = &x[i * inp..(i + 1) * inp];
            for o in 0..out {
                let go = g[i * out + o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let row = &mut gw[o * inp..(o + 1) * inp];
                for (r, &xv) in row.iter_mut().zip(xi) {
                    *r += go * xv;
                }
            }
        }
        (
            Tensor::new(vec![out, inp], gw).expect("dense weight grad shape"),
            Tensor::new(vec![out], gb).expect("dense bias grad shape"),
        )
    }

    pub fn input_grad(&self, g: &[f64], n: usize) -> Vec<f64> {
        let (out, inp) = (self.out_units(), self.in_units());
        let w = self.weight.data();
        let mut dx = vec![0.0; n * inp];
        for i in 0..n {
            let dxi = &mut dx[i * inp..(i + 1) * inp];
            for o in 0..out {
                let go = g[i * out + o];
                if go == 0.0 {
                    continue;
                }
                for (d, &wv) in dxi.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *d += go * wv;
                }
            }
        }
        dx
    }
}

/// Stride-1 2-D convolution, `weight` is `(out_channels, in_channels, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

impl Conv2d {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform(&[out_channels, in_channels, kernel, kernel], bound, rng);
        let bias = uniform(&[out_channels], bound, rng);
        Self {
            weight,
            bias,
            padding,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn pads(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.dims();
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        }
    }

    fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (_, _, kh, kw) = self.dims();
        let (ph, pw) = self.pads();
        let oh = (h + 2 * ph).checked_sub(kh)? + 1;
        let ow = (w + 2 * pw).checked_sub(kw)? + 1;
        Some((oh, ow))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gain: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self {
            gain: Tensor::full(&[features], 1.0),
            bias: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
        }
    }

    pub fn features(&self) -> usize {
        self.gain.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm1d(BatchNorm1d),
    Activation(Activation),
}

/// Forward intermediates for one layer.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense {
        input: Tensor,
    },
    Conv2d {
        input: Tensor,
    },
    BatchNorm1d {
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        mode: Mode,
    },
    Activation {
        output: Tensor,
    },
}

impl LayerCache {
    fn kind(&self) -> &'static str {
        match self {
            LayerCache::Dense { .. } => "dense",
            LayerCache::Conv2d { .. } => "conv2d",
            LayerCache::BatchNorm1d { .. } => "batchnorm1d",
            LayerCache::Activation { .. } => "activation",
        }
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm1d(_) => "batchnorm1d",
            Layer::Activation(_) => "activation",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm1d(b) => vec![&b.gain, &b.bias],
            Layer::Activation(_) => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm1d(b) => vec![&mut b.gain, &mut b.bias],
            Layer::Activation(_) => vec![],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match self {
            Layer::Dense(d) => {
                if numel != d.in_units() {
                    return Err(Error::LayerShape {
                        layer: index,
                        detail: format!(
                            "dense expects {} inputs, got shape {input:?}",
                            d.in_units()
                        ),
                    });
                }
                Ok(vec![d.out_units()])
            }
            Layer::Conv2d(c) => {
                let (oc, ic, _, _) = c.dims();
                if input.len() != 3 || input[0] != ic {
                    return Err(Error::LayerShape {
                        layer: index,
                        detail: format!("conv2d expects ({ic}, h, w), got {input:?}"),
                    });
                }
                let (oh, ow) =
                    c.output_hw(input[1], input[2])
                        .ok_or_else(|| Error::LayerShape {
                            layer: index,
                            detail: format!("kernel larger than input {input:?}"),
                        })?;
                Ok(vec![oc, oh, ow])
            }
            Layer::BatchNorm1d(b) => {
                if input.len() != 1 || input[0] != b.features() {
                    return Err(Error::LayerShape {
                        layer: index,
                        detail: format!("batchnorm1d expects ({},), got {input:?}", b.features()),
                    });
                }
                Ok(input.to_vec())
            }
            Layer::Activation(_) => Ok(input.to_vec()),
        }
    }

    pub fn forward(&self, index: usize, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        let n = x.rows();
        let out_shape = self.output_shape(index, &x.shape()[1..])?;
        let mut full_shape = vec![n];
        full_shape.extend_from_slice(&out_shape);
        match self {
            Layer::Dense(d) => {
                let y = d.apply(x.data(), n);
                Ok((
                    Tensor::new(full_shape, y)?,
                    LayerCache::Dense { input: x.clone() },
                ))
            }
            Layer::Conv2d(c) => {
                let y = conv_forward(c, x);
                Ok((
                    Tensor::new(full_shape, y)?,
                    LayerCache::Conv2d { input: x.clone() },
                ))
            }
            Layer::BatchNorm1d(b) => {
                let f = b.features();
                let (mean, var) = match mode {
                    Mode::Train => batch_moments(x.data(), n, f),
                    Mode::Eval => (
                        b.running_mean.data().to_vec(),
                        b.running_var.data().to_vec(),
                    ),
                };
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
                    .collect();
                let mut xhat = vec![0.0; n * f];
                let mut y = vec![0.0; n * f];
                let (g, bb) = (b.gain.data(), b.bias.data());
                for i in 0..n {
                    for j in 0..f {
                        let k = i * f + j;
                        xhat[k] = (x.data()[k] - mean[j]) * inv_std[j];
                        y[k] = g[j] * xhat[k] + bb[j];
                    }
                }
                Ok((
                    Tensor::new(full_shape.clone(), y)?,
                    LayerCache::BatchNorm1d {
                        xhat: Tensor::new(full_shape, xhat)?,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                        mode,
                    },
                ))
            }
            Layer::Activation(a) => {
                let y: Vec<f64> = x.data().iter().map(|&v| a.apply(v)).collect();
                let out = Tensor::new(full_shape, y)?;
                Ok((out.clone(), LayerCache::Activation { output: out }))
            }
        }
    }

    /// Returns parameter gradients (in `params()` order) and the input gradient.
    pub fn backward(
        &self,
        index: usize,
        cache: &LayerCache,
        grad_out: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mismatch = || {
            Error::CacheMismatch(format!(
                "layer {index} is {} but cache holds {}",
                self.kind(),
                cache.kind()
            ))
        };
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense { input }) => {
                let n = input.rows();
                expect_len(index, grad_out, n * d.out_units())?;
                let (gw, gb) = d.param_grads(input.data(), grad_out.data(), n);
                let dx = d.input_grad(grad_out.data(), n);
                Ok((vec![gw, gb], Tensor::new(input.shape().to_vec(), dx)?))
            }
            (Layer::Conv2d(c), LayerCache::Conv2d { input }) => {
                let (gw, gb, dx) =
                    conv_backward(c, input, grad_out).map_err(|detail| Error::LayerShape {
                        layer: index,
                        detail,
                    })?;
                Ok((vec![gw, gb], dx))
            }
            (
                Layer::BatchNorm1d(b),
                LayerCache::BatchNorm1d {
                    xhat,
                    inv_std,
                    mode,
                    ..
                },
            ) => {
                let f = b.features();
                let n = xhat.rows();
                expect_len(index, grad_out, n * f)?;
                let g = grad_out.data();
                let xh = xhat.data();
                let gain = b.gain.data();
                let mut dgain = vec![0.0; f];
                let mut dbias = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        let k = i * f + j;
                        dgain[j] += g[k] * xh[k];
                        dbias[j] += g[k];
                    }
                }
                let mut dx = vec![0.0; n * f];
                match mode {
                    Mode::Eval => {
                        for i in 0..n {
                            for j in 0..f {
                                let k = i * f + j;
                                dx[k] = g[k] * gain[j] * inv_std[j];
                            }
                        }
                    }
                    Mode::Train => {
                        // sum(dxhat) = gain * dbias, sum(dxhat * xhat) = gain * dgain
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..f {
                                let k = i * f + j;
                                let dxhat = g[k] * gain[j];
                                dx[k] = inv_std[j] / nf
                                    * (nf * dxhat
                                        - gain[j] * dbias[j]
                                        - xh[k] * gain[j] * dgain[j]);
                            }
                        }
                    }
                }
                Ok((
                    vec![Tensor::new(vec![f], dgain)?, Tensor::new(vec![f], dbias)?],
                    Tensor::new(xhat.shape().to_vec(), dx)?,
                ))
            }
            (Layer::Activation(a), LayerCache::Activation { output }) => {
                expect_len(index, grad_out, output.len())?;
                let dx: Vec<f64> = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| g * a.derivative_from_output(y))
                    .collect();
                Ok((vec![], Tensor::new(output.shape().to_vec(), dx)?))
            }
            _ => Err(mismatch()),
        }
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &LayerCache) {
        if let (
            Layer::BatchNorm1d(b),
            LayerCache::BatchNorm1d {
                batch_mean,
                batch_var,
                xhat,
                mode: Mode::Train,
                ..
            },
        ) = (self, cache)
        {
            let n = xhat.rows();
            let unbias = if n > 1 {
                n as f64 / (n as f64 - 1.0)
            } else {
                1.0
            };
            let m = BATCHNORM_MOMENTUM;
            for (r, &v) in b.running_mean.data_mut().iter_mut().zip(batch_mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in b.running_var.data_mut().iter_mut().zip(batch_var) {
                *r = (1.0 - m) * *r + m * v * unbias;
            }
        }
    }
}

fn expect_len(index: usize, g: &Tensor, want: usize) -> Result<()> {
    if g.len() != want {
        return Err(Error::LayerShape {
            layer: index,
            detail: format!("upstream gradient has {} values, expected {want}", g.len()),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn batch_moments(x: &[f64], n: usize, f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            mean[j] += x[i * f + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            let d = x[i * f + j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Vec<f64> {
    let (oc, ic, kh, kw) = c.dims();
    let (ph, pw) = c.pads();
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let (oh, ow) = c.output_hw(h, w).expect("validated by output_shape");
    let wt = c.weight.data();
    let b = c.bias.data();
    let xd = x.data();
    let mut y = vec![0.0; n * oc * oh * ow];
    for s in 0..n {
        for o in 0..oc {
            let out = &mut y[(s * oc + o) * oh * ow..(s * oc + o + 1) * oh * ow];
            out.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..ic {
                let plane = &xd[(s * ic + i) * h * w..(s * ic + i + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((o * ic + i) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let row = &plane[(iy - ph) * w..(iy - ph + 1) * w];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = ox + kx;
                                if ix < pw || ix - pw >= w {
                                    continue;
                                }
                                *ov += wv * row[ix - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(
    c: &Conv2d,
    x: &Tensor,
    g: &Tensor,
) -> std::result::Result<(Tensor, Tensor, Tensor), String> {
    let (oc, ic, kh, kw) = c.dims();
    let (ph, pw) = c.pads();
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let (oh, ow) = c.output_hw(h, w).ok_or("kernel larger than input")?;
    if g.len() != n * oc * oh * ow {
        return Err(format!(
            "upstream gradient has {} values, expected {}",
            g.len(),
            n * oc * oh * ow
        ));
    }
    let wt = c.weight.data();
    let xd = x.data();
    let gd = g.data();
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; oc];
    let mut dx = vec![0.0; xd.len()];
    for s in 0..n {
        for o in 0..oc {
            let go = &gd[(s * oc + o) * oh * ow..(s * oc + o + 1) * oh * ow];
            gb[o] += go.iter().sum::<f64>();
            for i in 0..ic {
                let base = (s * ic + i) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((o * ic + i) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let roff = base + (iy - ph) * w;
                            for ox in 0..ow {
                                let ix = ox + kx;
                                if ix < pw || ix - pw >= w {
                                    continue;
                                }
                                let gv = go[oy * ow + ox];
                                acc += gv * xd[roff + ix - pw];
                                dx[roff + ix - pw] += gv * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(c.weight.shape().to_vec(), gw).map_err(|e| e.to_string())?,
        Tensor::new(vec![oc], gb).map_err(|e| e.to_string())?,
        Tensor::new(x.shape().to_vec(), dx).map_err(|e| e.to_string())?,
    ))
}
