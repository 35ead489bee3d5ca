//! Layer forward/backward kernels.
//!
//! Forward passes return a [`Cache`] holding what the backward pass needs,
//! so one layer may be applied several times (shared branches) and each
//! application backpropagated separately. Parameter gradients accumulate
//! into [`Param::grad`] until cleared.

use rand::Rng;

use super::tensor::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics like `Train`, and batch-norm layers accumulate
    /// population statistics instead of updating their running averages.
    Calibrate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, kh, kw]`
    pub weight: Param<T>,
    /// `[out]`; absent when a batch norm follows and would cancel it.
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = Tensor::randn(
            &[out_channels, in_channels, kernel.0, kernel.1],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        Self::from_params(weight, Tensor::zeros(&[out_channels]), stride, padding)
            .expect("consistent shapes")
    }

    pub fn from_params(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [out_channels, in_channels, kh, kw] = weight.dims4("conv weight")?;
        if bias.shape() != [out_channels] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias {:?} does not match {out_channels} filters",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv stride must be >= 1".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel: (kh, kw),
            stride,
            padding,
            weight: Param::new(weight),
            bias: Some(Param::new(bias)),
        })
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::ShapeMismatch(format!(
                "{h}x{w} input with padding {} is smaller than the {kh}x{kw} kernel",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let (kh, kw) = self.kernel;
        let p = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut cols[((c * kh + ki) * kw + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        let out = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            *o = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let (kh, kw) = self.kernel;
        let p = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((c * kh + ki) * kw + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] =
                                    plane[iy as usize * w + ix as usize] + row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Cross-correlation (no kernel flip).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let [b, c, h, w] = x.dims4("conv2d")?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let krows = c * kh * kw;
        let p = oh * ow;
        let mut cols = vec![T::zero(); b * krows * p];
        let mut out = vec![T::zero(); b * self.out_channels * p];
        let bias = self.bias.as_ref().map(|b| b.value.data());
        for n in 0..b {
            let col = &mut cols[n * krows * p..(n + 1) * krows * p];
            self.im2col(&x.data()[n * c * h * w..(n + 1) * c * h * w], h, w, oh, ow, col);
            let y = &mut out[n * self.out_channels * p..(n + 1) * self.out_channels * p];
            for (o, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(bias.map_or(T::zero(), |b| b[o]));
            }
            matmul(
                self.out_channels,
                krows,
                p,
                self.weight.value.data(),
                false,
                col,
                false,
                y,
                true,
            );
        }
        Ok((
            Tensor::new(vec![b, self.out_channels, oh, ow], out)?,
            Cache::Conv {
                cols,
                input_shape: [b, c, h, w],
            },
        ))
    }

    pub fn backward(&mut self, cache: &Cache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache::Conv { cols, input_shape } = cache else {
            return Err(cache_mismatch("conv2d"));
        };
        let [b, c, h, w] = *input_shape;
        let (oh, ow) = self.output_hw(h, w)?;
        if grad.shape() != [b, self.out_channels, oh, ow] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d gradient {:?} does not match output [{b}, {}, {oh}, {ow}]",
                grad.shape(),
                self.out_channels
            )));
        }
        let (kh, kw) = self.kernel;
        let krows = c * kh * kw;
        let p = oh * ow;
        let oc = self.out_channels;
        let mut dx = vec![T::zero(); b * c * h * w];
        let mut dcols = vec![T::zero(); krows * p];
        for n in 0..b {
            let g = &grad.data()[n * oc * p..(n + 1) * oc * p];
            let col = &cols[n * krows * p..(n + 1) * krows * p];
            matmul(oc, p, krows, g, false, col, true, self.weight.grad.data_mut(), true);
            if let Some(bias) = &mut self.bias {
                let db = bias.grad.data_mut();
                for (o, chunk) in g.chunks(p).enumerate() {
                    db[o] = db[o] + chunk.iter().copied().sum::<T>();
                }
            }
            matmul(krows, oc, p, self.weight.value.data(), true, g, false, &mut dcols, false);
            self.col2im(&dcols, h, w, oh, ow, &mut dx[n * c * h * w..(n + 1) * c * h * w]);
        }
        Tensor::new(vec![b, c, h, w], dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq)]
struct Calibration {
    mean_sum: Vec<f64>,
    var_sum: Vec<f64>,
    weight: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            channels,
            eps,
            momentum,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            calibration: None,
        }
    }

    /// Starts accumulating population statistics; subsequent
    /// [`Mode::Calibrate`] passes feed them.
    pub fn begin_calibration(&mut self) {
        self.calibration = Some(Calibration {
            mean_sum: vec![0.0; self.channels],
            var_sum: vec![0.0; self.channels],
            weight: 0.0,
        });
    }

    /// Replaces the running statistics with the sample-weighted average of
    /// the batch statistics seen since [`Self::begin_calibration`].
    pub fn finish_calibration(&mut self) {
        if let Some(cal) = self.calibration.take() {
            if cal.weight > 0.0 {
                for ch in 0..self.channels {
                    self.running_mean.data_mut()[ch] = T::from_f64(cal.mean_sum[ch] / cal.weight);
                    self.running_var.data_mut()[ch] = T::from_f64(cal.var_sum[ch] / cal.weight);
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        let [b, c, h, w] = x.dims4("batchnorm")?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let count = b * hw;
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let xd = x.data();
        for ch in 0..c {
            let (mean, var) = if mode == Mode::Eval {
                (
                    self.running_mean.data()[ch],
                    self.running_var.data()[ch],
                )
            } else {
                let mut sum = T::zero();
                for n in 0..b {
                    sum = sum + xd[(n * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let mean = sum / T::from_f64(count as f64);
                let mut sq = T::zero();
                for n in 0..b {
                    for &v in &xd[(n * c + ch) * hw..][..hw] {
                        sq = sq + (v - mean) * (v - mean);
                    }
                }
                let var = sq / T::from_f64(count as f64);
                let unbiased = if count > 1 {
                    sq / T::from_f64((count - 1) as f64)
                } else {
                    var
                };
                match (mode, self.calibration.as_mut()) {
                    (Mode::Calibrate, Some(cal)) => {
                        cal.mean_sum[ch] += mean.as_f64() * count as f64;
                        cal.var_sum[ch] += unbiased.as_f64() * count as f64;
                        if ch == c - 1 {
                            cal.weight += count as f64;
                        }
                    }
                    (Mode::Calibrate, None) => {}
                    _ => {
                        let m = T::from_f64(self.momentum);
                        let rm = &mut self.running_mean.data_mut()[ch];
                        *rm = (T::one() - m) * *rm + m * mean;
                        let rv = &mut self.running_var.data_mut()[ch];
                        *rv = (T::one() - m) * *rv + m * unbiased;
                    }
                }
                (mean, var)
            };
            let istd = T::one() / (var + T::from_f64(self.eps)).sqrt();
            inv_std[ch] = istd;
            let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for n in 0..b {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = g * xh + bt;
                }
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), out)?,
            Cache::BatchNorm {
                xhat,
                inv_std,
                shape: [b, c, h, w],
                batch_stats: mode != Mode::Eval,
            },
        ))
    }

    pub fn backward(&mut self, cache: &Cache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache::BatchNorm {
            xhat,
            inv_std,
            shape,
            batch_stats,
        } = cache
        else {
            return Err(cache_mismatch("batchnorm"));
        };
        let [b, c, h, w] = *shape;
        if grad.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch("batchnorm gradient shape".into()));
        }
        let hw = h * w;
        let m = T::from_f64((b * hw) as f64);
        let g = grad.data();
        let mut dx = vec![T::zero(); g.len()];
        for ch in 0..c {
            let gamma = self.gamma.value.data()[ch];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for n in 0..b {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    sum_g = sum_g + g[i];
                    sum_gx = sum_gx + g[i] * xhat[i];
                }
            }
            let dg = &mut self.gamma.grad.data_mut()[ch];
            *dg = *dg + sum_gx;
            let db = &mut self.beta.grad.data_mut()[ch];
            *db = *db + sum_g;
            let scale = gamma * inv_std[ch];
            for n in 0..b {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    dx[i] = if *batch_stats {
                        scale * (g[i] - sum_g / m - xhat[i] * sum_gx / m)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        Tensor::new(shape.to_vec(), dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    /// `[out]`
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let weight = Tensor::randn(
            &[out_features, in_features],
            (2.0 / in_features as f64).sqrt(),
            rng,
        );
        Self::from_params(weight, Tensor::zeros(&[out_features])).expect("consistent shapes")
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [out_features, in_features] = weight.dims2("linear weight")?;
        if bias.shape() != [out_features] {
            return Err(Error::ShapeMismatch("linear bias shape".into()));
        }
        Ok(Self {
            in_features,
            out_features,
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let [b, f] = x.dims2("linear")?;
        if f != self.in_features {
            return Err(Error::ShapeMismatch(format!(
                "linear expects {} features, got {f}",
                self.in_features
            )));
        }
        let mut out = Vec::with_capacity(b * self.out_features);
        for _ in 0..b {
            out.extend_from_slice(self.bias.value.data());
        }
        matmul(
            b,
            f,
            self.out_features,
            x.data(),
            false,
            self.weight.value.data(),
            true,
            &mut out,
            true,
        );
        Ok((
            Tensor::new(vec![b, self.out_features], out)?,
            Cache::Linear { input: x.clone() },
        ))
    }

    pub fn backward(&mut self, cache: &Cache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache::Linear { input } = cache else {
            return Err(cache_mismatch("linear"));
        };
        let [b, f] = input.dims2("linear")?;
        let o = self.out_features;
        if grad.shape() != [b, o] {
            return Err(Error::ShapeMismatch("linear gradient shape".into()));
        }
        matmul(
            o,
            b,
            f,
            grad.data(),
            true,
            input.data(),
            false,
            self.weight.grad.data_mut(),
            true,
        );
        let db = self.bias.grad.data_mut();
        for row in grad.data().chunks(o) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
        let mut dx = vec![T::zero(); b * f];
        matmul(b, o, f, grad.data(), false, self.weight.value.data(), false, &mut dx, false);
        Tensor::new(vec![b, f], dx)
    }
}

/// What a forward pass leaves behind for the matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv {
        cols: Vec<T>,
        input_shape: [usize; 4],
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        shape: [usize; 4],
        batch_stats: bool,
    },
    Relu {
        mask: Vec<bool>,
        shape: Vec<usize>,
    },
    MaxPool {
        argmax: Vec<u32>,
        input_shape: [usize; 4],
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Linear {
        input: Tensor<T>,
    },
}

impl<T> Cache<T> {
    /// Appends the discrete choices made in the forward pass (active ReLU
    /// units, pooling winners). Equal patterns mean the same smooth piece of
    /// a piecewise-smooth function.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        match self {
            Cache::Relu { mask, .. } => out.extend(mask.iter().map(|&m| m as u32)),
            Cache::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
}

fn cache_mismatch(layer: &str) -> Error {
    Error::ShapeMismatch(format!("{layer} backward received a cache from another layer"))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (
        out,
        Cache::Relu {
            mask,
            shape: x.shape().to_vec(),
        },
    )
}

/// Gradient passes where the input was positive; zero elsewhere, including
/// at exactly 0.
pub fn relu_backward<T: Scalar>(cache: &Cache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let Cache::Relu { mask, shape } = cache else {
        return Err(cache_mismatch("relu"));
    };
    if grad.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch("relu gradient shape".into()));
    }
    let data = grad
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { T::zero() })
        .collect();
    Tensor::new(shape.clone(), data)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Ties go to the first maximum in row-major window order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
    let [b, c, h, w] = x.dims4("maxpool")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool needs at least 2x2 input, got {h}x{w}"
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        Cache::MaxPool {
            argmax,
            input_shape: [b, c, h, w],
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(cache: &Cache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let Cache::MaxPool { argmax, input_shape } = cache else {
        return Err(cache_mismatch("maxpool"));
    };
    if grad.len() != argmax.len() {
        return Err(Error::ShapeMismatch("maxpool gradient shape".into()));
    }
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        dx[i as usize] = dx[i as usize] + g;
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    BatchNorm2d(BatchNorm2d<T>),
    Relu,
    MaxPool2,
    Flatten,
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::BatchNorm2d(l) => l.forward(x, mode),
            Layer::Relu => Ok(relu_forward(x)),
            Layer::MaxPool2 => maxpool2_forward(x),
            Layer::Flatten => {
                let b = *x.shape().first().ok_or_else(|| {
                    Error::ShapeMismatch("flatten of a 0-d tensor".into())
                })?;
                let input_shape = x.shape().to_vec();
                let f = x.len() / b;
                Ok((x.clone().reshape(&[b, f])?, Cache::Flatten { input_shape }))
            }
            Layer::Linear(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, cache: &Cache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.backward(cache, grad),
            Layer::BatchNorm2d(l) => l.backward(cache, grad),
            Layer::Relu => relu_backward(cache, grad),
            Layer::MaxPool2 => maxpool2_backward(cache, grad),
            Layer::Flatten => {
                let Cache::Flatten { input_shape } = cache else {
                    return Err(cache_mismatch("flatten"));
                };
                grad.clone().reshape(input_shape)
            }
            Layer::Linear(l) => l.backward(cache, grad),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    /// Output shape for an input shape, without computing anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let four = |what: &str| -> Result<[usize; 4]> {
            match *input {
                [b, c, h, w] => Ok([b, c, h, w]),
                _ => Err(Error::ShapeMismatch(format!(
                    "{what} expects 4-d input, got {input:?}"
                ))),
            }
        };
        match self {
            Layer::Conv2d(l) => {
                let [b, c, h, w] = four("conv2d")?;
                if c != l.in_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d expects {} channels, got {c}",
                        l.in_channels
                    )));
                }
                let (oh, ow) = l.output_hw(h, w)?;
                Ok(vec![b, l.out_channels, oh, ow])
            }
            Layer::BatchNorm2d(l) => {
                let [_, c, _, _] = four("batchnorm")?;
                if c != l.channels {
                    return Err(Error::ShapeMismatch("batchnorm channels".into()));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2 => {
                let [b, c, h, w] = four("maxpool")?;
                if h < 2 || w < 2 {
                    return Err(Error::ShapeMismatch("maxpool input below 2x2".into()));
                }
                Ok(vec![b, c, h / 2, w / 2])
            }
            Layer::Flatten => Ok(vec![input[0], input[1..].iter().product()]),
            Layer::Linear(l) => match *input {
                [b, f] if f == l.in_features => Ok(vec![b, l.out_features]),
                _ => Err(Error::ShapeMismatch(format!(
                    "linear expects [B, {}], got {input:?}",
                    l.in_features
                ))),
            },
        }
    }

    pub fn batch_norm_mut(&mut self) -> Option<&mut BatchNorm2d<T>> {
        match self {
            Layer::BatchNorm2d(bn) => Some(bn),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let conv = Conv2d::from_params(t(&[1, 1, 1, 1], vec![1.0]), t(&[1], vec![0.0]), 1, 0)
            .unwrap();
        let x = t(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.5, 0.0, 6.0]);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let conv =
            Conv2d::from_params(t(&[1, 1, 3, 3], vec![1.0; 9]), t(&[1], vec![0.0]), 1, 0).unwrap();
        let (y, _) = conv.forward(&t(&[1, 1, 3, 3], vec![1.0; 9])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_is_cross_correlation_with_padding_and_stride() {
        // kernel [[1, 2], [3, 4]] over a 3x3 ramp, pad 1, stride 2
        let conv = Conv2d::from_params(
            t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            t(&[1], vec![0.5]),
            2,
            1,
        )
        .unwrap();
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // top-left window covers padding except x[0][0] under weight 4
        assert_eq!(y.data()[0], 4.0 * 1.0 + 0.5);
        // bottom-right window: x[1][1], x[1][2], x[2][1], x[2][2]
        assert_eq!(y.data()[3], 1.0 * 5.0 + 2.0 * 6.0 + 3.0 * 8.0 + 4.0 * 9.0 + 0.5);
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f64>::new(3, 2, (3, 3), 1, 1, &mut rng);
        assert!(matches!(
            conv.forward(&Tensor::zeros(&[1, 2, 4, 4])),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(conv.forward(&Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn relu_subgradient() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        let (y, cache) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&cache, &t(&[3], vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_routes_to_winner() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, cache) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2_backward(&cache, &t(&[1, 1, 1, 1], vec![1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = t(&[1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]);
        let (_, cache) = maxpool2_forward(&x).unwrap();
        let g = maxpool2_backward(&cache, &t(&[1, 1, 1, 1], vec![1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_is_affine() {
        let mut bn = BatchNorm2d::<f64>::new(2, 1e-5, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[4, 2, 3, 3], 2.0, &mut rng);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 2 + ch) * 9..][..9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(bn.running_mean.data().iter().any(|&m| m != 0.0));

        let (a, _) = bn.forward(&x, Mode::Eval).unwrap();
        let (b, _) = bn.forward(&x, Mode::Eval).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn calibration_replaces_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1, 1e-5, 0.1);
        let x1 = t(&[1, 1, 1, 2], vec![0.0, 2.0]);
        let x2 = t(&[1, 1, 1, 2], vec![4.0, 6.0]);
        bn.begin_calibration();
        bn.forward(&x1, Mode::Calibrate).unwrap();
        bn.forward(&x2, Mode::Calibrate).unwrap();
        bn.finish_calibration();
        assert_eq!(bn.running_mean.data(), &[3.0]);
        // unbiased batch variances are 2 and 2
        assert_eq!(bn.running_var.data(), &[2.0]);
    }

    #[test]
    fn linear_forward() {
        let lin = Linear::from_params(
            t(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]),
            t(&[2], vec![0.5, -0.5]),
        )
        .unwrap();
        let (y, _) = lin.forward(&t(&[1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[-1.5, 3.5]);
    }

    #[test]
    fn shape_inference_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layers: Vec<Layer<f64>> = vec![
            Layer::Conv2d(Conv2d::new(2, 3, (3, 3), 1, 1, &mut rng)),
            Layer::BatchNorm2d(BatchNorm2d::new(3, 1e-5, 0.1)),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Linear(Linear::new(3 * 3 * 3, 4, &mut rng)),
        ];
        let mut x = Tensor::<f64>::randn(&[2, 2, 7, 6], 1.0, &mut rng);
        for layer in &mut layers {
            let expected = layer.output_shape(x.shape()).unwrap();
            x = layer.forward(&x, Mode::Train).unwrap().0;
            assert_eq!(x.shape(), expected.as_slice());
        }
    }
}
