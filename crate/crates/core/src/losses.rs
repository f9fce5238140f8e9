//! Training objectives: conditional adversarial terms, perceptual loss over
//! patch-discriminator taps, Gram-matrix style loss, pixel L1 and their
//! weighted total.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::sigmoid;
use crate::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-8;

/// Default weight of the first-stage output inside the pixel L1 term.
pub const INTERMEDIATE_L1_WEIGHT: f64 = 0.5;

/// Ordered feature maps (`N×C×H×W` each) tapped from a network.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    maps: Vec<Tensor>,
}

impl FeatureStack {
    pub fn new(maps: Vec<Tensor>) -> Self {
        Self { maps }
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Per-sample element count `C·H·W` of every tap.
    pub fn element_counts(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.dims()[1..].iter().product()).collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            maps: self.maps.iter().map(Tensor::detach).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Adversarial term (λ1).
    pub adversarial: f64,
    /// Style term (λ2).
    pub style: f64,
    /// Perceptual term (λ3).
    pub perceptual: f64,
    /// Pixel L1 term (λ4).
    pub pixel: f64,
    /// Weight of the first-stage output inside the L1 term.
    pub intermediate_l1: f64,
    pub perceptual_layers: [f64; 4],
    pub style_layers: [f64; 6],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            style: 10.0,
            perceptual: 10.0,
            pixel: 100.0,
            intermediate_l1: INTERMEDIATE_L1_WEIGHT,
            perceptual_layers: [1.0; 4],
            style_layers: [1.0; 6],
        }
    }
}

impl LossWeights {
    /// Only the pixel term is active.
    pub fn pixel_only() -> Self {
        Self {
            adversarial: 0.0,
            style: 0.0,
            perceptual: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.adversarial, self.style, self.perceptual, self.pixel, self.intermediate_l1]
            .into_iter()
            .chain(self.perceptual_layers)
            .chain(self.style_layers);
        for w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn log_clamped(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(LOG_EPS)?.log()?)
}

/// Discriminator objective: `-[mean log σ(real) + mean log(1 - σ(fake))]`.
pub fn adversarial_loss_d(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = log_clamped(&sigmoid(real_logits)?)?.mean_all()?;
    let fake = log_clamped(&sigmoid(&fake_logits.neg()?)?)?.mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// Non-saturating generator term for one discriminator: `-mean log σ(fake)`.
pub fn generator_adversarial_term(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(log_clamped(&sigmoid(fake_logits)?)?.mean_all()?.neg()?)
}

/// Sum of the generator terms against the global and patch discriminators.
pub fn adversarial_loss_g(fake_logits_global: &Tensor, fake_logits_patch: &Tensor) -> Result<Tensor> {
    Ok((generator_adversarial_term(fake_logits_global)? + generator_adversarial_term(fake_logits_patch)?)?)
}

fn check_stacks(a: &FeatureStack, b: &FeatureStack, weights: usize, what: &str) -> Result<()> {
    if a.len() != b.len() || a.len() != weights {
        return Err(Error::Shape(format!(
            "{what}: {} vs {} taps with {weights} weights",
            a.len(),
            b.len()
        )));
    }
    for (i, (x, y)) in a.maps().iter().zip(b.maps()).enumerate() {
        if x.dims() != y.dims() {
            return Err(Error::Shape(format!("{what}: tap {i} {:?} vs {:?}", x.dims(), y.dims())));
        }
    }
    Ok(())
}

/// `Σ_i λ_i · mean|R_i(x̂) - R_i(x)|`.
pub fn perceptual_loss(r_target: &FeatureStack, r_output: &FeatureStack, weights: &[f64]) -> Result<Tensor> {
    check_stacks(r_target, r_output, weights.len(), "perceptual loss")?;
    let mut total: Option<Tensor> = None;
    for ((x, y), &w) in r_target.maps().iter().zip(r_output.maps()).zip(weights) {
        let term = ((y - x)?.abs()?.mean_all()? * w)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Shape("perceptual loss needs at least one tap".into()))
}

/// `MAE(x, x̂) + w · MAE(x, x̂₁)` over the full image.
pub fn pixel_l1_weighted(target: &Tensor, output: &Tensor, intermediate: &Tensor, intermediate_weight: f64) -> Result<Tensor> {
    let main = (output - target)?.abs()?.mean_all()?;
    let mid = ((intermediate - target)?.abs()?.mean_all()? * intermediate_weight)?;
    Ok((main + mid)?)
}

pub fn pixel_l1(target: &Tensor, output: &Tensor, intermediate: &Tensor) -> Result<Tensor> {
    pixel_l1_weighted(target, output, intermediate, INTERMEDIATE_L1_WEIGHT)
}

/// Batched Gram matrices: `N×C×H×W -> N×C×C`, `G = M Mᵀ` with `M` the
/// `C×(H·W)` reshaped map. A 3-D `C×H×W` input yields `C×C`.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    match features.rank() {
        3 => {
            let (c, h, w) = features.dims3()?;
            let m = features.reshape((c, h * w))?;
            Ok(m.matmul(&m.t()?.contiguous()?)?)
        }
        4 => {
            let (n, c, h, w) = features.dims4()?;
            let m = features.reshape((n, c, h * w))?;
            Ok(m.matmul(&m.transpose(1, 2)?.contiguous()?)?)
        }
        r => Err(Error::Shape(format!("gram expects a rank-3 or rank-4 map, got rank {r}"))),
    }
}

/// Host-side Gram matrix of one tap.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub channels: usize,
    /// Row-major `C×C`.
    pub values: Vec<f64>,
    pub tap_index: usize,
    /// Element count `C·H·W` of the source map.
    pub elements: usize,
}

impl GramMatrix {
    /// From a single `C×H×W` map.
    pub fn from_map(map: &Tensor, tap_index: usize) -> Result<Self> {
        let (c, h, w) = map.dims3()?;
        let values = gram(map)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self {
            channels: c,
            values,
            tap_index,
            elements: c * h * w,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.channels + j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.channels).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// `Σ_n λ_n / (4 d_n²) · ‖Gr_n(x̂) - Gr_n(x)‖_F²`, averaged over the batch.
pub fn style_loss(taps_target: &FeatureStack, taps_output: &FeatureStack, weights: &[f64]) -> Result<Tensor> {
    check_stacks(taps_target, taps_output, weights.len(), "style loss")?;
    let mut total: Option<Tensor> = None;
    for ((x, y), &w) in taps_target.maps().iter().zip(taps_output.maps()).zip(weights) {
        let d: usize = x.dims()[1..].iter().product();
        let diff = (gram(y)? - gram(x)?)?;
        let per_sample = diff.sqr()?.flatten_from(1)?.sum(1)?;
        let term = (per_sample.mean_all()? * (w / (4.0 * (d as f64).powi(2))))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Shape("style loss needs at least one tap".into()))
}

/// Unweighted generator loss components (scalar tensors).
#[derive(Debug, Clone)]
pub struct LossParts {
    pub adversarial: Tensor,
    pub style: Tensor,
    pub perceptual: Tensor,
    pub pixel: Tensor,
}

/// `λ1·L_adv + λ2·L_style + λ3·L_percep + λ4·L_L1`.
pub fn total_generator_loss(parts: &LossParts, weights: &LossWeights) -> Result<Tensor> {
    let t = ((&parts.adversarial * weights.adversarial)? + (&parts.style * weights.style)?)?;
    let t = (t + (&parts.perceptual * weights.perceptual)?)?;
    Ok((t + (&parts.pixel * weights.pixel)?)?)
}
