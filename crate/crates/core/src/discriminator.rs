//! Conditional global and patch discriminators plus the receptive-field auditor.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::losses::FeatureStack;
use crate::nn::{leaky_relu, BatchNorm, Conv2d, ParamStore};
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
    pub normalized: bool,
    pub activation: Activation,
}

impl ConvLayerSpec {
    fn feature(kernel: usize, stride: usize, out_channels: usize, normalized: bool) -> Self {
        Self {
            kernel,
            stride,
            padding: 1,
            out_channels,
            normalized,
            activation: Activation::LeakyRelu,
        }
    }

    fn output() -> Self {
        Self {
            kernel: 4,
            stride: 1,
            padding: 1,
            out_channels: 1,
            normalized: false,
            activation: Activation::Identity,
        }
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        (input + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|n| n / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    Global,
    Patch,
}

impl DiscriminatorKind {
    pub fn feature_layers(self) -> usize {
        match self {
            DiscriminatorKind::Global => 6,
            DiscriminatorKind::Patch => 4,
        }
    }
}

/// Declarative layer plan: feature layers followed by a 1-channel output conv.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub kind: DiscriminatorKind,
    pub layers: Vec<ConvLayerSpec>,
    /// Channels of the candidate image; the condition adds the same number again.
    pub image_channels: usize,
}

const PATCH_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const GLOBAL_WIDTHS: [usize; 6] = [64, 128, 256, 512, 512, 512];

impl DiscriminatorSpec {
    /// 4×4 convs, 64-128-256-512 channels, strides 2,2,2,1, then a 4×4 stride-1
    /// output conv: a 70×70 receptive field.
    pub fn patch() -> Self {
        Self::patch_scaled(1)
    }

    pub fn patch_scaled(width_divisor: usize) -> Self {
        let d = width_divisor.max(1);
        let strides = [2, 2, 2, 1];
        let mut layers: Vec<_> = PATCH_WIDTHS
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&c, s))| ConvLayerSpec::feature(4, s, (c / d).max(1), i > 0))
            .collect();
        layers.push(ConvLayerSpec::output());
        Self {
            kind: DiscriminatorKind::Patch,
            layers,
            image_channels: 1,
        }
    }

    /// The 256×256 global plan: 4×4 convs with 64-128-256-512-512-512
    /// channels, strides 2,2,2,2,2,1, then a 4×4 stride-1 output conv
    /// (receptive field 286).
    pub fn global() -> Self {
        Self::global_for(256, 1)
    }

    /// Global plan shrunk for `image_size`: each of the first five layers
    /// downsamples only while the result stays at least 4 pixels wide and
    /// otherwise becomes a size-preserving 3×3 stride-1 conv. For 256 this
    /// is exactly [`global`](Self::global).
    pub fn global_for(image_size: usize, width_divisor: usize) -> Self {
        let d = width_divisor.max(1);
        let mut size = image_size;
        let mut layers = Vec::with_capacity(7);
        for (i, &c) in GLOBAL_WIDTHS.iter().enumerate() {
            let c = (c / d).max(1);
            let normalized = i > 0;
            if i == GLOBAL_WIDTHS.len() - 1 {
                layers.push(ConvLayerSpec::feature(4, 1, c, normalized));
            } else if size / 2 >= 4 {
                size /= 2;
                layers.push(ConvLayerSpec::feature(4, 2, c, normalized));
            } else {
                layers.push(ConvLayerSpec::feature(3, 1, c, normalized));
            }
        }
        layers.push(ConvLayerSpec::output());
        Self {
            kind: DiscriminatorKind::Global,
            layers,
            image_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.kind.feature_layers() + 1;
        if self.layers.len() != want {
            return Err(Error::Config(format!(
                "{:?} discriminator needs {} feature layers plus an output conv, got {} layers",
                self.kind,
                self.kind.feature_layers(),
                self.layers.len()
            )));
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.out_channels == 0) {
            return Err(Error::Config("kernel, stride and channels must be >= 1".into()));
        }
        if self.layers.last().map(|l| l.out_channels) != Some(1) {
            return Err(Error::Config("output conv must have one channel".into()));
        }
        Ok(())
    }

    /// Spatial size of the score map for a square input, `None` if it collapses.
    pub fn score_map_size(&self, input: usize) -> Option<usize> {
        self.layers
            .iter()
            .try_fold(input, |n, l| l.output_size(n).filter(|&m| m > 0))
    }
}

/// Receptive field of one output unit: `r += (k - 1) * jump; jump *= stride`.
pub fn receptive_field(spec: &DiscriminatorSpec) -> usize {
    receptive_field_of(spec.layers.iter().map(|l| (l.kernel, l.stride)))
}

pub fn receptive_field_of(layers: impl IntoIterator<Item = (usize, usize)>) -> usize {
    let (r, _) = layers
        .into_iter()
        .fold((1, 1), |(r, jump), (k, s)| (r + (k - 1) * jump, jump * s));
    r
}

/// A candidate image paired with its conditioning input. Discriminators only
/// accept this type, so an unconditioned call does not compile.
pub struct ConditionedPair {
    stacked: Tensor,
}

impl ConditionedPair {
    pub fn new(candidate: &Tensor, condition: &Tensor) -> Result<Self> {
        if candidate.dims() != condition.dims() {
            return Err(Error::Shape(format!(
                "candidate {:?} and condition {:?} differ",
                candidate.dims(),
                condition.dims()
            )));
        }
        Ok(Self {
            stacked: Tensor::cat(&[candidate, condition], 1)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.stacked
    }
}

struct Layer {
    conv: Conv2d,
    bn: Option<BatchNorm>,
    activation: Activation,
}

pub struct DiscriminatorOutput {
    /// `N×1×h×w` logits before the sigmoid.
    pub logits: Tensor,
    /// Post-activation outputs of every feature layer.
    pub features: FeatureStack,
}

pub struct Discriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    layers: Vec<Layer>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut cin = 2 * spec.image_channels;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let conv = Conv2d::new(&mut store, &format!("l{i}.conv"), cin, l.out_channels, l.kernel, l.stride, l.padding)?;
                let bn = if l.normalized {
                    Some(BatchNorm::new(&mut store, &format!("l{i}.bn"), l.out_channels)?)
                } else {
                    None
                };
                cin = l.out_channels;
                Ok(Layer {
                    conv,
                    bn,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, store, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, input: &ConditionedPair) -> Result<DiscriminatorOutput> {
        let x = input.tensor();
        let (_, c, _, _) = x.dims4()?;
        if c != 2 * self.spec.image_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} stacked channels, got {c}",
                2 * self.spec.image_channels
            )));
        }
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.conv.forward(&h)?;
            if let Some(bn) = &layer.bn {
                h = bn.forward(&h)?;
            }
            if layer.activation == Activation::LeakyRelu {
                h = leaky_relu(&h, LEAKY_SLOPE)?;
            }
            if i < last {
                features.push(h.clone());
            }
        }
        Ok(DiscriminatorOutput {
            logits: h,
            features: FeatureStack::new(features),
        })
    }

    /// Patch discriminator: logit map plus the feature taps used by the perceptual loss.
    pub fn patch_forward(&self, candidate: &Tensor, condition: &Tensor) -> Result<DiscriminatorOutput> {
        self.forward(&ConditionedPair::new(candidate, condition)?)
    }

    /// Global discriminator: one logit per sample (mean over the score map).
    pub fn global_forward(&self, candidate: &Tensor, condition: &Tensor) -> Result<Tensor> {
        let out = self.forward(&ConditionedPair::new(candidate, condition)?)?;
        Ok(out.logits.flatten_from(1)?.mean(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn rand_img(n: usize, size: usize, seed: u64) -> Tensor {
        let mut s = ParamStore::new(DType::F32, seed);
        s.gaussian("x".into(), &[n, 1, size, size], 0.0, 0.5)
            .unwrap()
            .as_tensor()
            .clamp(-1.0, 1.0)
            .unwrap()
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(&DiscriminatorSpec::patch()), 70);
        assert_eq!(receptive_field(&DiscriminatorSpec::global()), 286);
        assert_eq!(receptive_field_of([(3, 1)]), 3);
        assert_eq!(receptive_field_of([]), 1);
    }

    #[test]
    fn canonical_global_plan() {
        let g = DiscriminatorSpec::global();
        let strides: Vec<_> = g.layers.iter().map(|l| l.stride).collect();
        assert_eq!(strides, vec![2, 2, 2, 2, 2, 1, 1]);
        assert!(g.layers.iter().all(|l| l.kernel == 4));
        let widths: Vec<_> = g.layers.iter().map(|l| l.out_channels).collect();
        assert_eq!(widths, vec![64, 128, 256, 512, 512, 512, 1]);
        assert!(!g.layers[0].normalized && g.layers[1].normalized);
    }

    #[test]
    fn shrunk_global_plans_cover_the_image() {
        for size in [32, 64, 128, 256] {
            let s = DiscriminatorSpec::global_for(size, 8);
            s.validate().unwrap();
            assert!(receptive_field(&s) >= size, "size {size}");
            assert!(s.score_map_size(size).is_some(), "size {size}");
        }
    }

    #[test]
    fn score_map_sizes() {
        assert_eq!(DiscriminatorSpec::patch().score_map_size(256), Some(30));
        assert_eq!(DiscriminatorSpec::global().score_map_size(256), Some(6));
    }

    proptest::proptest! {
        #[test]
        fn rf_monotone(mut layers in proptest::collection::vec((1usize..8, 1usize..4), 0..8), k in 1usize..8, s in 1usize..4) {
            let base = receptive_field_of(layers.clone());
            // Appending a layer never shrinks the field.
            layers.push((k, s));
            proptest::prop_assert!(receptive_field_of(layers.clone()) >= base);
            // Growing any kernel or stride never shrinks it either.
            let mut bigger = layers.clone();
            bigger[0].0 += 1;
            proptest::prop_assert!(receptive_field_of(bigger) >= receptive_field_of(layers.clone()));
            let mut bigger = layers.clone();
            bigger[0].1 += 1;
            proptest::prop_assert!(receptive_field_of(bigger) >= receptive_field_of(layers));
        }
    }

    #[test]
    fn patch_forward_shapes_and_taps() {
        let d = Discriminator::new(DiscriminatorSpec::patch_scaled(16), DType::F32, 0).unwrap();
        let x = rand_img(1, 256, 1);
        let out = d.patch_forward(&x, &x).unwrap();
        assert_eq!(out.logits.dims(), &[1, 1, 30, 30]);
        let sizes: Vec<usize> = out.features.maps().iter().map(|f| f.dims()[2]).collect();
        assert_eq!(sizes, vec![128, 64, 32, 31]);
    }

    #[test]
    fn swapping_candidate_and_condition_changes_score() {
        let d = Discriminator::new(DiscriminatorSpec::patch_scaled(8), DType::F32, 3).unwrap();
        let a = rand_img(2, 64, 1);
        let b = rand_img(2, 64, 2);
        let s1 = d.patch_forward(&a, &b).unwrap().logits;
        let s2 = d.patch_forward(&b, &a).unwrap().logits;
        let diff = (s1 - s2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn global_forward_is_one_scalar_per_sample() {
        let d = Discriminator::new(DiscriminatorSpec::global_for(64, 8), DType::F32, 0).unwrap();
        let x = rand_img(3, 64, 4);
        assert_eq!(d.global_forward(&x, &x).unwrap().dims(), &[3]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let d = Discriminator::new(DiscriminatorSpec::global_for(64, 8), DType::F32, 0).unwrap();
        for (_, v) in d.params().iter() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let x = rand_img(2, 64, 4);
        let s = d.global_forward(&x, &x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_and_bad_specs() {
        let a = rand_img(1, 64, 1);
        let b = rand_img(1, 32, 1);
        assert!(ConditionedPair::new(&a, &b).is_err());
        let mut s = DiscriminatorSpec::patch();
        s.layers.pop();
        assert!(Discriminator::new(s, DType::F32, 0).is_err());
        let d = Discriminator::new(DiscriminatorSpec::patch_scaled(8), DType::F32, 0).unwrap();
        let four = Tensor::zeros((1, 2, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(d.patch_forward(&four, &four).is_err());
    }
}
