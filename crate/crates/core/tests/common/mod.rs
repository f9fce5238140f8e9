#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ipa_core::extractor::ExtractorSource;
use ipa_core::imaging::{apply_mask, generate_phantom, generate_square_mask, ImageSlice, FILL_VALUE};
use ipa_core::nn::{ParamStore, Precision};
use ipa_core::trainer::RunConfig;

/// Result of comparing autograd against central differences.
#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn set_elem(var: &Var, base: &[f64], idx: usize, value: f64) {
    let mut v = base.to_vec();
    v[idx] = value;
    let t = Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap();
    var.set(&t).unwrap();
}

/// Central-difference step. Batch norm rescales a weight nudge by roughly the
/// inverse spread of its input, so larger steps push ReLU inputs across zero.
pub const FD_STEP: f64 = 1e-8;

/// Checks `coords` parameter coordinates of `store`, drawn uniformly among
/// those whose analytic gradient is at least `floor` times the largest one.
pub fn param_fd(store: &ParamStore, loss: &dyn Fn() -> Tensor, coords: usize, seed: u64, h: f64, floor: f64) -> FdReport {
    let grads = loss().backward().unwrap();
    let entries: Vec<(String, Var, Vec<f64>)> = store
        .iter()
        .filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n.clone(), v.clone(), to_vec(g))))
        .collect();
    let gmax = entries.iter().flat_map(|e| e.2.iter()).fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(gmax > 0.0, "loss has no parameter gradient");
    let total: usize = entries.iter().map(|e| e.2.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let mut tries = 0;
    while report.checked < coords {
        tries += 1;
        assert!(tries < 1_000_000, "not enough non-negligible gradient coordinates");
        let mut k = rng.gen_range(0..total);
        let (name, var, g) = entries
            .iter()
            .find(|e| {
                if k < e.2.len() {
                    true
                } else {
                    k -= e.2.len();
                    false
                }
            })
            .unwrap();
        let analytic = g[k];
        if analytic.abs() < floor * gmax {
            continue;
        }
        let base = to_vec(var.as_tensor());
        set_elem(var, &base, k, base[k] + h);
        let plus = scalar(&loss());
        set_elem(var, &base, k, base[k] - h);
        let minus = scalar(&loss());
        set_elem(var, &base, k, base[k]);
        let numeric = (plus - minus) / (2.0 * h);
        let e = rel_err(analytic, numeric);
        if e > report.max_rel {
            report.max_rel = e;
            report.worst = format!("{name}[{k}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
        report.checked += 1;
    }
    report
}

/// Same protocol for the gradient of `loss` with respect to its input tensor.
pub fn input_fd(x: &Var, loss: &dyn Fn(&Tensor) -> Tensor, coords: usize, seed: u64, h: f64) -> FdReport {
    let grads = loss(x.as_tensor()).backward().unwrap();
    let g = to_vec(grads.get(x.as_tensor()).expect("input gradient exists"));
    let base = to_vec(x.as_tensor());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    while report.checked < coords {
        let k = rng.gen_range(0..base.len());
        let eval = |v: f64| {
            let mut p = base.clone();
            p[k] = v;
            let t = Tensor::from_vec(p, x.dims(), &Device::Cpu).unwrap().to_dtype(x.dtype()).unwrap();
            scalar(&loss(&t))
        };
        let numeric = (eval(base[k] + h) - eval(base[k] - h)) / (2.0 * h);
        let e = rel_err(g[k], numeric);
        if e > report.max_rel {
            report.max_rel = e;
            report.worst = format!("pixel {k}: analytic {:.6e} numeric {numeric:.6e}", g[k]);
        }
        report.checked += 1;
    }
    report
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// 2×2 average pooling of a phantom, for inputs smaller than the phantom minimum.
pub fn small_phantom(seed: u64, size: usize) -> ImageSlice {
    let big = generate_phantom(seed, 2 * size.max(32), 2 * size.max(32)).unwrap();
    let (bh, bw) = big.size();
    let f = bh / size;
    let mut px = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut s = 0.0;
            for i in 0..f {
                for j in 0..f {
                    s += big.get(r * f + i, c * f + j);
                }
            }
            px[r * size + c] = s / (f * f) as f64;
        }
    }
    let _ = bw;
    ImageSlice::new(size, size, px, ipa_core::IntensityRange::Signed).unwrap()
}

/// Target/corrupted batch of `n` small phantoms with square holes.
pub fn small_batch(n: usize, size: usize, dtype: DType) -> (Tensor, Tensor) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let img = small_phantom(100 + i as u64, size);
        let mask = generate_square_mask(7 + i as u64, (size, size), size / 4).unwrap();
        xs.extend_from_slice(img.pixels());
        ys.extend_from_slice(apply_mask(&img, &mask, FILL_VALUE).unwrap().pixels());
    }
    let t = |v: Vec<f64>| Tensor::from_vec(v, (n, 1, size, size), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
    (t(xs), t(ys))
}

/// Desk-width models on `size`×`size` inputs in 64-bit precision.
pub fn f64_desk_config(size: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.run.precision = Precision::F64;
    c.data.image_size = size;
    c.model.base_width = 8;
    c.model.disc_width_divisor = 8;
    c.extractor = ExtractorSource::Random {
        seed: 3,
        width_divisor: 8,
    };
    c
}
