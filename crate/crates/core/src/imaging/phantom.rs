//! Synthetic brain-like phantoms standing in for real MR slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ImageSlice, IntensityRange};
use crate::{Error, Result};

/// Noise standard deviation as a fraction of the intensity range.
const NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> Self {
        Self {
            cy,
            cx,
            ry,
            rx,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Squared normalized radius of `(y, x)`; `< 1` means inside.
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dy * self.cos + dx * self.sin;
        let v = -dy * self.sin + dx * self.cos;
        (u / self.ry).powi(2) + (v / self.rx).powi(2)
    }

    /// Maps local head coordinates `(u, v)` in units of the semi-axes back to pixels.
    fn to_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let du = u * self.ry;
        let dv = v * self.rx;
        (
            self.cy + du * self.cos - dv * self.sin,
            self.cx + du * self.sin + dv * self.cos,
        )
    }
}

/// Deterministic phantom for `seed`: dark background, a head ellipse with a
/// bright rim, 5–10 interior ellipses, a smooth multiplicative bias field and
/// Gaussian noise. Returned in the signed range.
pub fn generate_phantom(seed: u64, height: usize, width: usize) -> Result<ImageSlice> {
    if height < 64 || width < 64 {
        return Err(Error::InvalidArgument(format!(
            "phantom size {height}x{width} below the 64x64 minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);

    let head = Ellipse::new(
        h / 2.0 + rng.gen_range(-0.03..0.03) * h,
        w / 2.0 + rng.gen_range(-0.03..0.03) * w,
        rng.gen_range(0.40..0.45) * h,
        rng.gen_range(0.32..0.40) * w,
        rng.gen_range(-0.2..0.2),
    );
    let tissue = rng.gen_range(0.35..0.45);
    let rim = rng.gen_range(0.75..0.9);
    let rim_start = rng.gen_range(0.86..0.9f64).powi(2);

    let n_blobs = rng.gen_range(5..=10);
    let blobs: Vec<(Ellipse, f64)> = (0..n_blobs)
        .map(|_| {
            let r = rng.gen_range(0.0..0.55f64).sqrt();
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let (cy, cx) = head.to_pixel(r * t.cos(), r * t.sin());
            let ry = rng.gen_range(0.06..0.25) * head.ry;
            let rx = rng.gen_range(0.06..0.25) * head.rx;
            let e = Ellipse::new(cy, cx, ry, rx, rng.gen_range(0.0..std::f64::consts::PI));
            (e, rng.gen_range(0.05..0.95))
        })
        .collect();

    // Low-order polynomial bias field, kept inside [0.8, 1.2].
    let coeffs: [f64; 5] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let mut pixels = Vec::with_capacity(height * width);
    for r in 0..height {
        let yc = r as f64 + 0.5;
        let v = 2.0 * yc / h - 1.0;
        for c in 0..width {
            let xc = c as f64 + 0.5;
            let u = 2.0 * xc / w - 1.0;
            let rho2 = head.rho2(yc, xc);
            let mut value = 0.0;
            if rho2 < 1.0 {
                value = if rho2 >= rim_start { rim } else { tissue };
                if rho2 < rim_start {
                    for (e, intensity) in &blobs {
                        if e.rho2(yc, xc) < 1.0 {
                            value = *intensity;
                        }
                    }
                }
            }
            let bias = 1.0
                + 0.06 * (coeffs[0] * u + coeffs[1] * v)
                + 0.04 * (coeffs[2] * u * v + coeffs[3] * (u * u - 0.5) + coeffs[4] * (v * v - 0.5));
            let unit = value * bias + noise.sample(&mut rng);
            pixels.push((2.0 * unit - 1.0).clamp(-1.0, 1.0));
        }
    }
    ImageSlice::new(height, width, pixels, IntensityRange::Signed)
}

/// Fraction of pixels inside the head ellipse of phantom `seed`; used by tests.
#[cfg(test)]
pub(crate) fn head_fraction(seed: u64, height: usize, width: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let head = Ellipse::new(
        h / 2.0 + rng.gen_range(-0.03..0.03) * h,
        w / 2.0 + rng.gen_range(-0.03..0.03) * w,
        rng.gen_range(0.40..0.45) * h,
        rng.gen_range(0.32..0.40) * w,
        rng.gen_range(-0.2..0.2),
    );
    let inside = (0..height)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .filter(|&(r, c)| head.rho2(r as f64 + 0.5, c as f64 + 0.5) < 1.0)
        .count();
    inside as f64 / (h * w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(7, 256, 256).unwrap();
        let b = generate_phantom(7, 256, 256).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        let c = generate_phantom(8, 256, 256).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn bounds_and_head_coverage_over_100_seeds() {
        for seed in 0..100 {
            let img = generate_phantom(seed, 64, 64).unwrap();
            assert_eq!(img.range(), IntensityRange::Signed);
            assert!(img.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
            let frac = head_fraction(seed, 64, 64);
            assert!(frac >= 0.30, "seed {seed}: head covers {frac}");
        }
    }

    #[test]
    fn head_is_brighter_than_background() {
        let img = generate_phantom(1, 128, 128).unwrap();
        let corner = img.get(2, 2);
        let center = img.get(64, 64);
        assert!(corner < -0.9);
        assert!(center > corner + 0.2);
    }

    #[test]
    fn rejects_tiny_sizes() {
        assert!(generate_phantom(0, 32, 64).is_err());
    }
}
