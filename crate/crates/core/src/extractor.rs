//! Frozen VGG-19 feature extractor feeding the style loss.
//!
//! Weights come either from a checksum-pinned safetensors export of the
//! ImageNet-trained torchvision model, or, for desk-scale runs without the
//! download, from a seeded He-initialized network of the same topology with
//! reduced widths. Weights are plain tensors, so no gradient ever reaches
//! them while gradients still flow to the input image.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::losses::FeatureStack;
use crate::nn::{conv2d_same, load_tensors, max_pool2x2};
use crate::util::{sha256_chunks, sha256_hex};
use crate::{Error, Result};

/// Convs per block.
const BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];
const WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Environment variable overriding the weights cache directory.
pub const CACHE_ENV: &str = "IPA_CACHE_DIR";
pub const WEIGHTS_FILE: &str = "vgg19.safetensors";

pub const TAP_NAMES: [&str; 6] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1", "relu5_4"];

const DOWNLOAD_HELP: &str = "export the ImageNet VGG-19 weights once with\n  \
python -c \"import torchvision, safetensors.torch as st; \
m = torchvision.models.vgg19(weights='IMAGENET1K_V1'); \
st.save_file({k: v for k, v in m.state_dict().items() if k.startswith('features.')}, 'vgg19.safetensors')\"\n\
then place the file in the cache directory ($IPA_CACHE_DIR or ~/.cache/ipa-medgan) \
and pin its sha256 in the run config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ExtractorSource {
    Pretrained {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        sha256: String,
    },
    Random {
        seed: u64,
        width_divisor: usize,
    },
}

impl Default for ExtractorSource {
    fn default() -> Self {
        ExtractorSource::Random {
            seed: 0,
            width_divisor: 1,
        }
    }
}

pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("ipa-medgan")
}

/// Names and per-sample element counts `d_n = C·H·W` of the six taps at one input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractorTapPlan {
    pub names: Vec<&'static str>,
    pub elements: Vec<usize>,
}

struct ConvWeights {
    weight: Tensor,
    bias: Tensor,
}

pub struct Extractor {
    convs: Vec<ConvWeights>,
    widths: [usize; 5],
    mean: Tensor,
    std: Tensor,
}

/// Index of conv `i` (0..16) inside torchvision's `vgg19.features`.
pub fn torchvision_index(conv: usize) -> usize {
    let mut idx = 0;
    let mut seen = 0;
    for &n in &BLOCKS {
        for _ in 0..n {
            if seen == conv {
                return idx;
            }
            seen += 1;
            idx += 2;
        }
        idx += 1;
    }
    panic!("VGG-19 has only 16 convolutions");
}

fn conv_shapes(widths: &[usize; 5]) -> Vec<(usize, usize)> {
    let mut cin = 3;
    let mut shapes = Vec::new();
    for (&n, &w) in BLOCKS.iter().zip(widths) {
        for _ in 0..n {
            shapes.push((w, cin));
            cin = w;
        }
    }
    shapes
}

impl Extractor {
    pub fn from_source(source: &ExtractorSource, dtype: DType) -> Result<Self> {
        match source {
            ExtractorSource::Pretrained { path, sha256 } => {
                let path = path.clone().unwrap_or_else(|| cache_dir().join(WEIGHTS_FILE));
                Self::load(&path, Some(sha256), dtype)
            }
            ExtractorSource::Random { seed, width_divisor } => Self::random(*seed, *width_divisor, dtype),
        }
    }

    /// Loads torchvision-named weights (`features.{i}.weight`/`bias`), verifying
    /// the file's SHA-256 when `expected_sha256` is given.
    pub fn load(path: &Path, expected_sha256: Option<&str>, dtype: DType) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Weights(format!(
                "VGG-19 weights not found at {}; {DOWNLOAD_HELP}",
                path.display()
            )));
        }
        if let Some(expected) = expected_sha256 {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let actual = sha256_hex(&bytes);
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(Error::Weights(format!(
                    "checksum mismatch for {}: expected {expected}, found {actual}; {DOWNLOAD_HELP}",
                    path.display()
                )));
            }
        }
        let map = load_tensors(path)?;
        let convs = conv_shapes(&WIDTHS)
            .into_iter()
            .enumerate()
            .map(|(i, (cout, cin))| {
                let idx = torchvision_index(i);
                let get = |suffix: &str| {
                    map.get(&format!("features.{idx}.{suffix}"))
                        .ok_or_else(|| Error::Weights(format!("missing features.{idx}.{suffix} in {}", path.display())))
                };
                let weight = get("weight")?;
                let bias = get("bias")?;
                if weight.dims() != [cout, cin, 3, 3] || bias.dims() != [cout] {
                    return Err(Error::Weights(format!(
                        "features.{idx} has shape {:?}, expected {:?}",
                        weight.dims(),
                        [cout, cin, 3, 3]
                    )));
                }
                Ok(ConvWeights {
                    weight: weight.to_dtype(dtype)?,
                    bias: bias.to_dtype(dtype)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(convs, WIDTHS, dtype)
    }

    /// Seeded He-initialized VGG-19 topology with every width divided by `width_divisor`.
    pub fn random(seed: u64, width_divisor: usize, dtype: DType) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("extractor width divisor must be >= 1".into()));
        }
        let widths = WIDTHS.map(|w| (w / width_divisor).max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = conv_shapes(&widths)
            .into_iter()
            .map(|(cout, cin)| {
                let fan_in = (cin * 9) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                let data: Vec<f64> = (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect();
                Ok(ConvWeights {
                    weight: Tensor::from_vec(data, (cout, cin, 3, 3), &Device::Cpu)?.to_dtype(dtype)?,
                    bias: Tensor::zeros(cout, dtype, &Device::Cpu)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(convs, widths, dtype)
    }

    fn assemble(convs: Vec<ConvWeights>, widths: [usize; 5], dtype: DType) -> Result<Self> {
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(IMAGENET_STD.to_vec(), (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            convs,
            widths,
            mean,
            std,
        })
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    pub fn tap_plan(&self, height: usize, width: usize) -> ExtractorTapPlan {
        let spatial = |block: usize| (height >> block) * (width >> block);
        let mut elements: Vec<usize> = (0..5).map(|b| self.widths[b] * spatial(b)).collect();
        elements.push(self.widths[4] * spatial(4));
        ExtractorTapPlan {
            names: TAP_NAMES.to_vec(),
            elements,
        }
    }

    /// SHA-256 over all weights and biases.
    pub fn weights_hash(&self) -> Result<String> {
        let bytes = self
            .convs
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .map(|t| {
                let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(sha256_chunks(bytes.iter().map(Vec::as_slice)))
    }

    /// Six tapped activations for a signed `N×1×H×W` batch.
    ///
    /// The input is mapped to `[0, 1]`, replicated to three channels and
    /// normalized with the ImageNet channel statistics.
    pub fn extract(&self, img: &Tensor) -> Result<FeatureStack> {
        let (_, c, h, w) = img.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("extractor expects 1-channel input, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!("extractor input {h}x{w} must be divisible by 16")));
        }
        let peak = img.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(peak <= 1.0 + 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "extractor expects signed input in [-1, 1], found magnitude {peak}"
            )));
        }
        let unit = ((img + 1.0)? * 0.5)?;
        let rgb = Tensor::cat(&[&unit, &unit, &unit], 1)?;
        let mut x = rgb.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut taps = Vec::with_capacity(6);
        let mut conv = self.convs.iter();
        for (b, &n) in BLOCKS.iter().enumerate() {
            if b > 0 {
                x = max_pool2x2(&x)?;
            }
            for j in 0..n {
                let cw = conv.next().expect("16 convs");
                x = conv2d_same(&x, &cw.weight, &cw.bias, 1)?.relu()?;
                if j == 0 || (b == BLOCKS.len() - 1 && j == n - 1) {
                    taps.push(x.clone());
                }
            }
        }
        Ok(FeatureStack::new(taps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::save_tensors;
    use std::collections::BTreeMap;

    #[test]
    fn torchvision_indices() {
        let idx: Vec<usize> = (0..16).map(torchvision_index).collect();
        assert_eq!(idx, vec![0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34]);
    }

    #[test]
    fn topology_and_tap_plan() {
        let e = Extractor::random(0, 1, DType::F32).unwrap();
        assert_eq!(e.conv_count(), 16);
        let plan = e.tap_plan(256, 256);
        assert_eq!(plan.elements[0], 64 * 256 * 256);
        assert_eq!(plan.elements.len(), 6);
        assert_eq!(plan.names[5], "relu5_4");
    }

    #[test]
    fn taps_shrink_and_match_plan() {
        let e = Extractor::random(1, 8, DType::F32).unwrap();
        let x = Tensor::zeros((2, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let f = e.extract(&x).unwrap();
        assert_eq!(f.len(), 6);
        let sizes: Vec<usize> = f.maps().iter().map(|m| m.dims()[2]).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
        assert_eq!(f.element_counts(), e.tap_plan(64, 64).elements);
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let e = Extractor::random(2, 8, DType::F64).unwrap();
        let x = Tensor::full(0.3f64, (1, 1, 64, 64), &Device::Cpu).unwrap();
        let f = e.extract(&x).unwrap();
        // Zero padding perturbs a band of one pixel per conv since the last pooling.
        for (tap, margin) in [(0usize, 1usize), (1, 2)] {
            let m = &f.maps()[tap];
            let (_, c, h, w) = m.dims4().unwrap();
            let v = m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for ch in 0..c {
                let base = v[ch * h * w + margin * w + margin];
                for r in margin..h - margin {
                    for col in margin..w - margin {
                        assert!((v[ch * h * w + r * w + col] - base).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_unsigned_input() {
        let e = Extractor::random(2, 8, DType::F32).unwrap();
        let x = Tensor::full(3.0f32, (1, 1, 32, 32), &Device::Cpu).unwrap();
        assert!(matches!(e.extract(&x), Err(Error::InvalidArgument(_))));
    }

    fn write_fake_vgg(path: &Path) {
        let src = Extractor::random(9, 1, DType::F32).unwrap();
        let mut map = BTreeMap::new();
        for (i, c) in src.convs.iter().enumerate() {
            let idx = torchvision_index(i);
            map.insert(format!("features.{idx}.weight"), c.weight.clone());
            map.insert(format!("features.{idx}.bias"), c.bias.clone());
        }
        save_tensors(&map, path).unwrap();
    }

    #[test]
    fn load_verifies_checksum_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        write_fake_vgg(&path);
        let sha = sha256_hex(&std::fs::read(&path).unwrap());
        let a = Extractor::load(&path, Some(&sha), DType::F32).unwrap();
        let b = Extractor::load(&path, Some(&sha), DType::F32).unwrap();
        assert_eq!(a.weights_hash().unwrap(), b.weights_hash().unwrap());
        assert_eq!(a.weights_hash().unwrap(), Extractor::random(9, 1, DType::F32).unwrap().weights_hash().unwrap());
        let probe = Tensor::full(0.1f32, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let fa = a.extract(&probe).unwrap().maps()[5].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let fb = b.extract(&probe).unwrap().maps()[5].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(fa, fb);

        let err = Extractor::load(&path, Some("00"), DType::F32).err().unwrap();
        assert!(err.to_string().contains("checksum mismatch"));
        let err = Extractor::load(&dir.path().join("none.safetensors"), None, DType::F32).err().unwrap();
        assert!(err.to_string().contains("torchvision"), "{err}");
    }
}
