//! Cascaded two-stage MultiRes-UNet generator.
//!
//! Each encoder/decoder level is a MultiRes block: three chained 3×3
//! convolutions whose outputs are concatenated, plus a 1×1 shortcut of the
//! block input. Skip connections pass through ResPaths before being
//! concatenated into the decoder. The second U-Net consumes the first one's
//! output.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{load_tensors, max_pool2x2, save_tensors, BatchNorm, Conv2d, ConvTranspose2d, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of encoder levels (poolings).
    pub depth: usize,
    /// Width of the shallowest level; level `l` uses `base_width << l`.
    pub base_width: usize,
    pub stages: usize,
    pub in_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 32,
            stages: 2,
            in_channels: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            base_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("generator depth must be at least 1".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("generator needs at least one stage".into()));
        }
        if self.base_width < 6 {
            return Err(Error::Config(format!(
                "base width {} too small for a three-way filter split (need >= 6)",
                self.base_width
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("generator needs at least one input channel".into()));
        }
        Ok(())
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// ResPath length at `level`: `depth` at the shallowest skip down to 1 at the deepest.
    pub fn respath_length(&self, level: usize) -> usize {
        self.depth - level
    }

    pub fn required_divisor(&self) -> usize {
        1 << self.depth
    }
}

/// Channel layout of one MultiRes block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiResBlockSpec {
    pub in_channels: usize,
    pub width: usize,
}

impl MultiResBlockSpec {
    /// Filters of the three chained 3×3 convs: `U/6`, `U/3`, and the remainder.
    pub fn split(&self) -> [usize; 3] {
        let a = self.width / 6;
        let b = self.width / 3;
        [a, b, self.width - a - b]
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, 1, kernel / 2)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?)
    }
}

pub struct MultiResBlock {
    spec: MultiResBlockSpec,
    branches: [ConvBn; 3],
    shortcut: ConvBn,
    out_bn: BatchNorm,
}

impl MultiResBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: MultiResBlockSpec) -> Result<Self> {
        let [a, b, c] = spec.split();
        if a == 0 {
            return Err(Error::Config(format!("MultiRes width {} too small", spec.width)));
        }
        Ok(Self {
            spec,
            branches: [
                ConvBn::new(store, &format!("{name}.b1"), spec.in_channels, a, 3)?,
                ConvBn::new(store, &format!("{name}.b2"), a, b, 3)?,
                ConvBn::new(store, &format!("{name}.b3"), b, c, 3)?,
            ],
            shortcut: ConvBn::new(store, &format!("{name}.short"), spec.in_channels, spec.width, 1)?,
            out_bn: BatchNorm::new(store, &format!("{name}.out_bn"), spec.width)?,
        })
    }

    pub fn spec(&self) -> MultiResBlockSpec {
        self.spec
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.spec.in_channels, "MultiRes block")?;
        let a1 = self.branches[0].forward(x)?.relu()?;
        let a2 = self.branches[1].forward(&a1)?.relu()?;
        let a3 = self.branches[2].forward(&a2)?.relu()?;
        let cat = Tensor::cat(&[&a1, &a2, &a3], 1)?;
        let short = self.shortcut.forward(x)?;
        self.out_bn.forward(&(cat + short)?.relu()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResPathSpec {
    pub length: usize,
    pub channels: usize,
}

struct ResUnit {
    conv3: Conv2d,
    conv1: Conv2d,
    bn: BatchNorm,
}

/// Chain of `length` units `BN(ReLU(conv3x3(x) + conv1x1(x)))`.
pub struct ResPath {
    spec: ResPathSpec,
    units: Vec<ResUnit>,
}

impl ResPath {
    pub fn new(store: &mut ParamStore, name: &str, spec: ResPathSpec) -> Result<Self> {
        if spec.length == 0 {
            return Err(Error::Config("ResPath length must be at least 1".into()));
        }
        let c = spec.channels;
        let units = (0..spec.length)
            .map(|i| {
                Ok(ResUnit {
                    conv3: Conv2d::new(store, &format!("{name}.{i}.conv3"), c, c, 3, 1, 1)?,
                    conv1: Conv2d::new(store, &format!("{name}.{i}.conv1"), c, c, 1, 1, 0)?,
                    bn: BatchNorm::new(store, &format!("{name}.{i}.bn"), c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, units })
    }

    pub fn spec(&self) -> ResPathSpec {
        self.spec
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.spec.channels, "ResPath")?;
        let mut h = x.clone();
        for u in &self.units {
            let s = (u.conv3.forward(&h)? + u.conv1.forward(&h)?)?;
            h = u.bn.forward(&s.relu()?)?;
        }
        Ok(h)
    }

    #[cfg(test)]
    fn unit_convs(&self, i: usize) -> (&Conv2d, &Conv2d) {
        (&self.units[i].conv3, &self.units[i].conv1)
    }
}

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let (_, c, _, _) = x.dims4()?;
    if c != expected {
        return Err(Error::Shape(format!("{what} expects {expected} input channels, got {c}")));
    }
    Ok(())
}

/// One MultiRes-UNet mapping `N×C×H×W` to `N×1×H×W` in `[-1, 1]`.
pub struct MultiResUnet {
    config: GeneratorConfig,
    encoders: Vec<MultiResBlock>,
    respaths: Vec<ResPath>,
    bridge: MultiResBlock,
    ups: Vec<ConvTranspose2d>,
    decoders: Vec<MultiResBlock>,
    head: Conv2d,
}

impl MultiResUnet {
    pub fn new(store: &mut ParamStore, name: &str, config: &GeneratorConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let depth = config.depth;
        let mut encoders = Vec::with_capacity(depth);
        let mut respaths = Vec::with_capacity(depth);
        let mut cin = in_channels;
        for l in 0..depth {
            let width = config.level_width(l);
            encoders.push(MultiResBlock::new(store, &format!("{name}.enc{l}"), MultiResBlockSpec { in_channels: cin, width })?);
            respaths.push(ResPath::new(
                store,
                &format!("{name}.respath{l}"),
                ResPathSpec {
                    length: config.respath_length(l),
                    channels: width,
                },
            )?);
            cin = width;
        }
        let bridge_width = config.level_width(depth);
        let bridge = MultiResBlock::new(
            store,
            &format!("{name}.bridge"),
            MultiResBlockSpec {
                in_channels: cin,
                width: bridge_width,
            },
        )?;
        let mut ups = Vec::with_capacity(depth);
        let mut decoders = Vec::with_capacity(depth);
        let mut below = bridge_width;
        for l in (0..depth).rev() {
            let width = config.level_width(l);
            ups.push(ConvTranspose2d::new(store, &format!("{name}.up{l}"), below, width, 2)?);
            decoders.push(MultiResBlock::new(
                store,
                &format!("{name}.dec{l}"),
                MultiResBlockSpec {
                    in_channels: 2 * width,
                    width,
                },
            )?);
            below = width;
        }
        let head = Conv2d::new(store, &format!("{name}.head"), below, 1, 1, 1, 0)?;
        Ok(Self {
            config: config.clone(),
            encoders,
            respaths,
            bridge,
            ups,
            decoders,
            head,
        })
    }

    pub fn respath_lengths(&self) -> Vec<usize> {
        self.respaths.iter().map(|r| r.spec().length).collect()
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = y.dims4()?;
        let div = self.config.required_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by {div} for a depth-{} U-Net",
                self.config.depth
            )));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = y.clone();
        for (enc, rp) in self.encoders.iter().zip(&self.respaths) {
            let e = enc.forward(&x)?;
            skips.push(rp.forward(&e)?);
            x = max_pool2x2(&e)?;
        }
        x = self.bridge.forward(&x)?;
        for ((up, dec), skip) in self.ups.iter().zip(&self.decoders).zip(skips.iter().rev()) {
            let u = up.forward(&x)?;
            x = dec.forward(&Tensor::cat(&[&u, skip], 1)?)?;
        }
        Ok(self.head.forward(&x)?.tanh()?)
    }
}

/// Output of [`CascadedGenerator::forward`].
pub struct GeneratorOutput {
    /// Final inpainted image `x̂`.
    pub output: Tensor,
    /// Output of the first stage.
    pub intermediate: Tensor,
}

pub struct CascadedGenerator {
    config: GeneratorConfig,
    store: ParamStore,
    stages: Vec<MultiResUnet>,
}

impl CascadedGenerator {
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let stages = (0..config.stages)
            .map(|s| {
                let cin = if s == 0 { config.in_channels } else { 1 };
                MultiResUnet::new(&mut store, &format!("stage{s}"), &config, cin)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, store, stages })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn stage(&self, i: usize) -> &MultiResUnet {
        &self.stages[i]
    }

    pub fn forward(&self, y: &Tensor) -> Result<GeneratorOutput> {
        let first = self.stages[0].forward(y)?;
        let mut out = first.clone();
        for stage in &self.stages[1..] {
            out = stage.forward(&out)?;
        }
        Ok(GeneratorOutput {
            output: out,
            intermediate: first,
        })
    }

    /// Writes `<stem>.safetensors` and a `<stem>.json` sidecar holding the config.
    pub fn save(&self, stem: &Path) -> Result<()> {
        save_tensors(&self.store.tensors(""), &stem.with_extension("safetensors"))?;
        let sidecar = stem.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&sidecar, e))
    }

    /// Loads weights saved by [`save`](Self::save); fails if the sidecar config differs from `expected`.
    pub fn load(stem: &Path, expected: &GeneratorConfig, dtype: DType) -> Result<Self> {
        let sidecar = stem.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let stored: GeneratorConfig = serde_json::from_str(&text)?;
        if &stored != expected {
            return Err(Error::Config(format!(
                "generator config mismatch: weights were saved with {stored:?}, expected {expected:?}"
            )));
        }
        let g = Self::new(stored, dtype, 0)?;
        g.store.assign_from(&load_tensors(&stem.with_extension("safetensors"))?, "")?;
        Ok(g)
    }
}
