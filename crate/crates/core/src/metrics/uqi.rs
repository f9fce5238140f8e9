//! Universal Quality Index over dense 8×8 windows.

use super::check_pair;
use crate::{Error, Result};

pub const UQI_WINDOW: usize = 8;
pub const UQI_EPS: f64 = 1e-12;

/// Separable valid-mode window reduction with `op` over `UQI_WINDOW` samples.
fn reduce(src: &[f64], h: usize, w: usize, init: f64, op: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let ow = w + 1 - UQI_WINDOW;
    let oh = h + 1 - UQI_WINDOW;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = src[r * w + c..r * w + c + UQI_WINDOW].iter().fold(init, |acc, &v| op(acc, v));
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..UQI_WINDOW).fold(init, |acc, i| op(acc, rows[(r + i) * ow + c]));
        }
    }
    out
}

/// Window quality from first and second moments, with the degenerate rules:
/// both windows constant and equal gives 1, exactly one constant gives 0.
pub(crate) fn window_q(mean_a: f64, mean_b: f64, var_a: f64, var_b: f64, cov: f64, const_a: bool, const_b: bool) -> f64 {
    match (const_a, const_b) {
        (true, true) if mean_a == mean_b => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 4.0 * cov * mean_a * mean_b / ((var_a + var_b) * (mean_a * mean_a + mean_b * mean_b) + UQI_EPS),
    }
}

/// Mean UQI between two `[0, 255]` images.
pub fn uqi(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    check_pair(a, b, height, width)?;
    if height < UQI_WINDOW || width < UQI_WINDOW {
        return Err(Error::Shape(format!("UQI needs at least {UQI_WINDOW}x{UQI_WINDOW} pixels")));
    }
    let add = |x: f64, y: f64| x + y;
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let sa = reduce(a, height, width, 0.0, add);
    let sb = reduce(b, height, width, 0.0, add);
    let saa = reduce(&sq(a), height, width, 0.0, add);
    let sbb = reduce(&sq(b), height, width, 0.0, add);
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let sab = reduce(&ab, height, width, 0.0, add);
    let range = |v: &[f64]| {
        let hi = reduce(v, height, width, f64::NEG_INFINITY, f64::max);
        let lo = reduce(v, height, width, f64::INFINITY, f64::min);
        hi.iter().zip(lo).map(|(h, l)| *h == l).collect::<Vec<bool>>()
    };
    let const_a = range(a);
    let const_b = range(b);
    let n = (UQI_WINDOW * UQI_WINDOW) as f64;
    let windows = sa.len();
    let total: f64 = (0..windows)
        .map(|i| {
            let ma = sa[i] / n;
            let mb = sb[i] / n;
            let va = saa[i] / n - ma * ma;
            let vb = sbb[i] / n - mb * mb;
            let cov = sab[i] / n - ma * mb;
            window_q(ma, mb, va, vb, cov, const_a[i], const_b[i])
        })
        .sum();
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_non_constant_is_one() {
        let a: Vec<f64> = (0..16 * 16).map(|i| 10.0 + ((i * 13) % 200) as f64).collect();
        assert!((uqi(&a, &a, 16, 16).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_windows() {
        let a = vec![42.0; 64];
        assert_eq!(uqi(&a, &a, 8, 8).unwrap(), 1.0);
        let b: Vec<f64> = (0..64).map(|i| i as f64).collect();
        assert_eq!(uqi(&a, &b, 8, 8).unwrap(), 0.0);
        assert_eq!(uqi(&b, &a, 8, 8).unwrap(), 0.0);
        let c = vec![7.0; 64];
        assert_eq!(uqi(&a, &c, 8, 8).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors() {
        assert!(uqi(&[0.0; 49], &[0.0; 49], 7, 7).is_err());
        assert!(uqi(&[0.0; 64], &[0.0; 63], 8, 8).is_err());
    }
}
