//! Custom ops with hand-written backward passes for the hot layers.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use super::layers::BN_EPS;
use crate::Result;

pub(crate) fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(gamma, beta, BatchNormOp)?)
}

/// Stride-1 convolution with zero padding `padding` on every side.
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (_, wc, kh, kw) = weight.dims4()?;
    if c != wc || kh != kw {
        return Err(crate::Error::Shape(format!(
            "conv of {:?} with kernel {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    Ok(x.contiguous()?
        .apply_op3(&weight.contiguous()?, bias, Conv2dOp { kernel: kh, padding })?)
}

/// Fused batch norm over an NCHW tensor with a hand-written backward.
/// Statistics are accumulated in f64 for every input dtype.
struct BatchNormOp;

/// Per-channel mean and inverse standard deviation.
fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
    let count = (n * hw) as f64;
    (0..c)
        .map(|ch| {
            let plane = |b: usize| &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let mean = (0..n).map(|b| plane(b).iter().sum::<f64>()).sum::<f64>() / count;
            let var = (0..n)
                .map(|b| plane(b).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / count;
            (mean, 1.0 / (var + BN_EPS).sqrt())
        })
        .collect()
}

fn nchw(shape: &[usize]) -> candle_core::Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => candle_core::bail!("batch norm expects NCHW input, got {shape:?}"),
    }
}

fn host(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn contiguous_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let Some((start, end)) = l.contiguous_offsets() else {
        candle_core::bail!("batch norm needs contiguous inputs");
    };
    Ok(match s {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("batch norm supports f32 and f64 only"),
    })
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, hw) = nchw(l1.dims())?;
        let x = contiguous_f64(s1, l1)?;
        let gamma = contiguous_f64(s2, l2)?;
        let beta = contiguous_f64(s3, l3)?;
        let stats = channel_stats(&x, n, c, hw);
        let mut out = vec![0.0; x.len()];
        for (i, (o, v)) in out.iter_mut().zip(&x).enumerate() {
            let ch = (i / hw) % c;
            let (mean, inv) = stats[ch];
            *o = (v - mean) * inv * gamma[ch] + beta[ch];
        }
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, hw) = nchw(x.dims())?;
        let xs = host(x)?;
        let dy = host(grad)?;
        let g = host(gamma)?;
        let stats = channel_stats(&xs, n, c, hw);
        let count = (n * hw) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (v, d)) in xs.iter().zip(&dy).enumerate() {
            let ch = (i / hw) % c;
            let (mean, inv) = stats[ch];
            dbeta[ch] += d;
            dgamma[ch] += d * (v - mean) * inv;
        }
        // dx = gamma * inv / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
        let dx: Vec<f64> = xs
            .iter()
            .zip(&dy)
            .enumerate()
            .map(|(i, (v, d))| {
                let ch = (i / hw) % c;
                let (mean, inv) = stats[ch];
                let xhat = (v - mean) * inv;
                g[ch] * inv / count * (count * d - dbeta[ch] - xhat * dgamma[ch])
            })
            .collect();
        let dev = x.device();
        let dt = x.dtype();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dt)?),
        ))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(dims: &[usize], k: usize, p: usize) -> candle_core::Result<Self> {
        let [n, c, h, w] = dims else {
            candle_core::bail!("conv expects NCHW input, got {dims:?}");
        };
        let (n, c, h, w) = (*n, *c, *h, *w);
        if h + 2 * p < k || w + 2 * p < k {
            candle_core::bail!("conv kernel {k} larger than padded input {h}x{w}");
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            p,
            ho: h + 2 * p - k + 1,
            wo: w + 2 * p - k + 1,
        })
    }

    fn plane(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Visits (column index, input index) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let plane = self.plane();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    for b in 0..self.n {
                        let src = (b * self.c + ci) * self.h * self.w;
                        let dst = row * plane + b * self.ho * self.wo;
                        for oy in 0..self.ho {
                            let iy = oy + ki;
                            if iy < self.p || iy >= self.h + self.p {
                                continue;
                            }
                            let src_row = src + (iy - self.p) * self.w;
                            let lo = self.p.saturating_sub(kj);
                            let hi = (self.w + self.p).saturating_sub(kj).min(self.wo);
                            for ox in lo..hi {
                                f(dst + oy * self.wo + ox, src_row + ox + kj - self.p);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.c * self.k * self.k * self.plane()];
        self.for_each_tap(|d, s| cols[d] = x[s]);
        cols
    }

    fn col2im<T: WithDType>(&self, cols: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.n * self.c * self.h * self.w];
        self.for_each_tap(|d, s| x[s] += cols[d]);
        x
    }
}

struct Conv2dOp {
    kernel: usize,
    padding: usize,
}

fn slice<'a, T: WithDType>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let Some((start, end)) = l.contiguous_offsets() else {
        candle_core::bail!("conv needs contiguous inputs");
    };
    Ok(&v[start..end])
}

impl Conv2dOp {
    fn forward<T: WithDType>(
        &self,
        x: &[T],
        lx: &Layout,
        w: &[T],
        lw: &Layout,
        b: &[T],
        lb: &Layout,
    ) -> candle_core::Result<(Vec<T>, Shape)> {
        let g = ConvGeom::new(lx.dims(), self.kernel, self.padding)?;
        let o = lw.dims()[0];
        let dev = candle_core::Device::Cpu;
        let cols = Tensor::from_vec(g.im2col(slice(x, lx)?), (g.c * g.k * g.k, g.plane()), &dev)?;
        let wm = Tensor::from_slice(slice(w, lw)?, (o, g.c * g.k * g.k), &dev)?;
        let bias = Tensor::from_slice(slice(b, lb)?, (o, 1), &dev)?;
        let y = wm
            .matmul(&cols)?
            .broadcast_add(&bias)?
            .reshape((o, g.n, g.ho, g.wo))?
            .transpose(0, 1)?
            .flatten_all()?
            .to_vec1::<T>()?;
        Ok((y, Shape::from((g.n, o, g.ho, g.wo))))
    }
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-same"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                let (y, s) = self.forward(x, l1, w, l2, b, l3)?;
                Ok((CpuStorage::F32(y), s))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                let (y, s) = self.forward(x, l1, w, l2, b, l3)?;
                Ok((CpuStorage::F64(y), s))
            }
            _ => candle_core::bail!("conv supports matching f32 or f64 inputs only"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.dims(), self.kernel, self.padding)?;
        let o = w.dim(0)?;
        let rows = g.c * g.k * g.k;
        let dev = x.device();
        let cols = match x.dtype() {
            DType::F32 => Tensor::from_vec(g.im2col(&x.flatten_all()?.to_vec1::<f32>()?), (rows, g.plane()), dev)?,
            _ => Tensor::from_vec(g.im2col(&x.flatten_all()?.to_vec1::<f64>()?), (rows, g.plane()), dev)?,
        };
        let dy = grad.detach().transpose(0, 1)?.contiguous()?.reshape((o, g.plane()))?;
        let wm = w.detach().reshape((o, rows))?;
        let dw = dy.matmul(&cols.t()?)?.reshape(w.shape())?;
        let db = dy.sum(1)?;
        let dcols = wm.t()?.matmul(&dy)?;
        let dx = match x.dtype() {
            DType::F32 => Tensor::from_vec(g.col2im(&dcols.flatten_all()?.to_vec1::<f32>()?), x.shape(), dev)?,
            _ => Tensor::from_vec(g.col2im(&dcols.flatten_all()?.to_vec1::<f64>()?), x.shape(), dev)?,
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| (((i * 37) % 23) as f64 - 11.0) * scale).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn conv_matches_candle_forward_and_backward() {
        for (k, p, h) in [(3, 1, 7), (1, 0, 5), (3, 0, 6), (4, 1, 5)] {
            let x = Var::from_tensor(&ramp(&[2, 3, h, h + 1], 0.1)).unwrap();
            let w = Var::from_tensor(&ramp(&[4, 3, k, k], 0.03)).unwrap();
            let b = Var::from_tensor(&ramp(&[4], 0.2)).unwrap();
            let r = ramp(&[2, 4, h + 2 * p + 1 - k, h + 2 * p + 2 - k], 0.7);
            let ours = conv2d_same(x.as_tensor(), w.as_tensor(), b.as_tensor(), p).unwrap();
            let theirs = x
                .as_tensor()
                .conv2d(w.as_tensor(), p, 1, 1, 1)
                .unwrap()
                .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert!(max_abs(&ours, &theirs) < 1e-12);
            let ga = (ours * &r).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (theirs * &r).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w, &b] {
                let (a, c) = (ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap());
                assert!(max_abs(a, c) < 1e-12, "k {k} p {p}");
            }
        }
    }

    #[test]
    fn batch_norm_backward_matches_autograd_formula() {
        let x = Var::from_tensor(&ramp(&[3, 2, 4, 5], 0.13)).unwrap();
        let gamma = Var::from_tensor(&ramp(&[2], 0.4)).unwrap();
        let beta = Var::from_tensor(&ramp(&[2], 0.1)).unwrap();
        let r = ramp(&[3, 2, 4, 5], 0.9).sin().unwrap();
        let ours = batch_norm(x.as_tensor(), gamma.as_tensor(), beta.as_tensor()).unwrap();
        let xt = x.as_tensor();
        let mean = xt.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let centered = xt.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let theirs = centered
            .broadcast_div(&(var + BN_EPS).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma.as_tensor().reshape((1, 2, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.as_tensor().reshape((1, 2, 1, 1)).unwrap())
            .unwrap();
        assert!(max_abs(&ours, &theirs) < 1e-12);
        let ga = (ours * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (theirs * &r).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            assert!(max_abs(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap()) < 1e-10);
        }
    }
}
