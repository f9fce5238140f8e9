use candle_core::{Tensor, Var};

use super::ops::{batch_norm, conv2d_same};
use super::ParamStore;
use crate::Result;

/// Std of the zero-mean Gaussian used for conv weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = store.gaussian(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            0.0,
            INIT_STD,
        )?;
        let bias = store.constant(format!("{name}.bias"), &[out_channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.stride == 1 {
            return conv2d_same(x, self.weight.as_tensor(), self.bias.as_tensor(), self.padding);
        }
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Transposed convolution with `kernel == stride`, no padding.
#[derive(Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let weight = store.gaussian(
            format!("{name}.weight"),
            &[in_channels, out_channels, kernel, kernel],
            0.0,
            INIT_STD,
        )?;
        let bias = store.constant(format!("{name}.bias"), &[out_channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride: kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), 0, 0, self.stride, 1)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Per-channel normalization over batch and spatial axes, always using the
/// statistics of the current batch.
#[derive(Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.constant(format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = store.constant(format!("{name}.beta"), &[channels], 0.0)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        batch_norm(x, self.gamma.as_tensor(), self.beta.as_tensor())
    }
}

/// Host-side batch norm with unit scale and zero shift, for tests.
pub fn batch_norm_reference(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |b: usize, p: usize| (b * c + ch) * hw + p;
        let count = (n * hw) as f64;
        let mean: f64 = (0..n).flat_map(|b| (0..hw).map(move |p| (b, p))).map(|(b, p)| x[idx(b, p)]).sum::<f64>() / count;
        let var: f64 = (0..n)
            .flat_map(|b| (0..hw).map(move |p| (b, p)))
            .map(|(b, p)| (x[idx(b, p)] - mean).powi(2))
            .sum::<f64>()
            / count;
        for b in 0..n {
            for p in 0..hw {
                out[idx(b, p)] = (x[idx(b, p)] - mean) / (var + BN_EPS).sqrt();
            }
        }
    }
    out
}

/// 2x2 max pooling, stride 2. The gradient goes to one argmax per window,
/// so tied maxima are not double counted as in `Tensor::max_pool2d`.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let x = if h % 2 == 1 || w % 2 == 1 {
        x.narrow(2, 0, ho * 2)?.narrow(3, 0, wo * 2)?
    } else {
        x.clone()
    };
    let windows = x
        .reshape((n, c, ho, 2, wo, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((n, c, ho, wo, 4))?;
    let idx = windows.detach().argmax_keepdim(4)?;
    Ok(windows.gather(&idx, 4)?.squeeze(4)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic function written via `tanh`, which keeps gradients finite for
/// large-magnitude logits.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}
