//! Adversarial training loop, checkpointing and inference.

mod checkpoint;
mod config;
mod data;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_stem, Checkpoint, CheckpointMeta, GENERATOR_PREFIX, GLOBAL_D_PREFIX, OPT_DG_PREFIX, OPT_DP_PREFIX,
    OPT_G_PREFIX, PATCH_D_PREFIX,
};
pub use config::{
    DataConfig, DataSource, MaskConfig, ModelConfig, RunConfig, RunSection, Seeds, DESK_BASE_WIDTH, DESK_IMAGE_SIZE,
    DESK_WIDTH_DIVISOR, OUTPUT_ENV,
};
pub use data::{epoch_plan, Batch, TrainingData};

use crate::discriminator::{Discriminator, DiscriminatorSpec};
use crate::extractor::Extractor;
use crate::generator::{CascadedGenerator, GeneratorOutput};
use crate::imaging::{ImageSlice, IntensityRange, Mask};
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, perceptual_loss, pixel_l1_weighted, style_loss, total_generator_loss,
    LossParts,
};
use crate::metrics::{signed_to_255, MetricRow};
use crate::nn::Adam;
use crate::util::child_seed;
use crate::{Error, Result};

/// Per-step losses. Generator components are unweighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub d_global: f64,
    pub d_patch: f64,
    pub g_adversarial: f64,
    pub style: f64,
    pub perceptual: f64,
    pub l1: f64,
    /// Weighted generator objective.
    pub total: f64,
}

impl LossRecord {
    fn values(&self) -> [f64; 7] {
        [
            self.d_global,
            self.d_patch,
            self.g_adversarial,
            self.style,
            self.perceptual,
            self.l1,
            self.total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub ssim: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub uqi: f64,
    /// MSE on the `[0, 255]` scale restricted to corrupted pixels.
    pub masked_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub mean_total: f64,
    pub mean_l1: f64,
    pub validation: ValidationMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub epochs_completed: usize,
    pub steps_completed: u64,
    pub best_val_ssim: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    config: RunConfig,
    dtype: DType,
    generator: CascadedGenerator,
    d_global: Discriminator,
    d_patch: Discriminator,
    extractor: Extractor,
    opt_g: Adam,
    opt_dg: Adam,
    opt_dp: Adam,
    step: u64,
    epoch: usize,
    history: Vec<EpochMetrics>,
    best_val_ssim: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Trainer {
    /// Fresh networks initialized from the global seed.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let dtype = config.run.precision.dtype();
        let size = config.data.image_size;
        let div = config.model.disc_width_divisor;
        let global = config.seeds.global;
        let generator = CascadedGenerator::new(config.generator_config(), dtype, child_seed(global, 0))?;
        let d_global = Discriminator::new(DiscriminatorSpec::global_for(size, div), dtype, child_seed(global, 1))?;
        let d_patch = Discriminator::new(DiscriminatorSpec::patch_scaled(div), dtype, child_seed(global, 2))?;
        let extractor = Extractor::from_source(&config.extractor, dtype)?;
        let adam = config.adam();
        Ok(Self {
            dtype,
            generator,
            d_global,
            d_patch,
            extractor,
            opt_g: Adam::new(adam),
            opt_dg: Adam::new(adam),
            opt_dp: Adam::new(adam),
            step: 0,
            epoch: 0,
            history: Vec::new(),
            best_val_ssim: None,
            config,
        })
    }

    /// Restores networks, optimizer state and counters. `config` may raise the
    /// epoch budget or move outputs but must otherwise match the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<&RunConfig>) -> Result<Self> {
        let stored = &ckpt.meta.config;
        let config = match config {
            Some(c) if c.identity_hash() != stored.identity_hash() => {
                return Err(Error::Config(
                    "run config differs from the checkpoint beyond epochs and output_dir".into(),
                ))
            }
            Some(c) => c.resolved(),
            None => stored.resolved(),
        };
        let mut t = Self::new(&config)?;
        let m = &ckpt.meta;
        t.generator.params().assign_from(&ckpt.section(GENERATOR_PREFIX), GENERATOR_PREFIX)?;
        t.d_global.params().assign_from(&ckpt.section(GLOBAL_D_PREFIX), GLOBAL_D_PREFIX)?;
        t.d_patch.params().assign_from(&ckpt.section(PATCH_D_PREFIX), PATCH_D_PREFIX)?;
        let [sg, sdg, sdp] = m.optimizer_steps;
        t.opt_g.restore(&ckpt.section(OPT_G_PREFIX), OPT_G_PREFIX, sg, t.generator.params())?;
        t.opt_dg.restore(&ckpt.section(OPT_DG_PREFIX), OPT_DG_PREFIX, sdg, t.d_global.params())?;
        t.opt_dp.restore(&ckpt.section(OPT_DP_PREFIX), OPT_DP_PREFIX, sdp, t.d_patch.params())?;
        t.step = m.step;
        t.epoch = m.epoch;
        t.history = m.history.clone();
        t.best_val_ssim = m.best_val_ssim;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.generator.params().tensors(GENERATOR_PREFIX);
        tensors.extend(self.d_global.params().tensors(GLOBAL_D_PREFIX));
        tensors.extend(self.d_patch.params().tensors(PATCH_D_PREFIX));
        tensors.extend(self.opt_g.tensors(OPT_G_PREFIX));
        tensors.extend(self.opt_dg.tensors(OPT_DG_PREFIX));
        tensors.extend(self.opt_dp.tensors(OPT_DP_PREFIX));
        Checkpoint {
            meta: CheckpointMeta {
                epoch: self.epoch,
                step: self.step,
                config: self.config.clone(),
                config_hash: self.config.hash(),
                identity_hash: self.config.identity_hash(),
                generator: self.generator.config().clone(),
                optimizer_steps: [self.opt_g.step_count(), self.opt_dg.step_count(), self.opt_dp.step_count()],
                history: self.history.clone(),
                best_val_ssim: self.best_val_ssim,
            },
            tensors,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn generator(&self) -> &CascadedGenerator {
        &self.generator
    }

    pub fn global_discriminator(&self) -> &Discriminator {
        &self.d_global
    }

    pub fn patch_discriminator(&self) -> &Discriminator {
        &self.d_patch
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    /// Discriminator losses `(global, patch)` for real `x` and a candidate `x_hat`.
    pub fn discriminator_losses(&self, x: &Tensor, x_hat: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let real_g = self.d_global.global_forward(x, y)?;
        let fake_g = self.d_global.global_forward(x_hat, y)?;
        let real_p = self.d_patch.patch_forward(x, y)?.logits;
        let fake_p = self.d_patch.patch_forward(x_hat, y)?.logits;
        Ok((adversarial_loss_d(&real_g, &fake_g)?, adversarial_loss_d(&real_p, &fake_p)?))
    }

    /// One update of both discriminators against the current (frozen) generator.
    pub fn discriminator_step(&mut self, x: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
        let x_hat = self.generator.forward(y)?.output.detach();
        self.update_discriminators(x, &x_hat, y)
    }

    fn update_discriminators(&mut self, x: &Tensor, x_hat: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
        let (lg, lp) = self.discriminator_losses(x, x_hat, y)?;
        let (vg, vp) = (scalar(&lg)?, scalar(&lp)?);
        if !(vg.is_finite() && vp.is_finite()) {
            return Err(Error::NonFinite(format!(
                "discriminator loss at step {}: global {vg}, patch {vp}",
                self.step
            )));
        }
        let grads = (lg + lp)?.backward()?;
        self.opt_dg.step(self.d_global.params(), &grads)?;
        self.opt_dp.step(self.d_patch.params(), &grads)?;
        Ok((vg, vp))
    }

    /// Unweighted generator loss components for a given generator output.
    ///
    /// Terms whose weight is zero are evaluated on a detached output so they are
    /// still reported but contribute no backward work.
    pub fn loss_parts_for(&self, x: &Tensor, y: &Tensor, out: &GeneratorOutput) -> Result<LossParts> {
        let w = &self.config.loss;
        let live = &out.output;
        let frozen = out.output.detach();
        let pick = |weight: f64| if weight != 0.0 { live } else { &frozen };

        let d_input = pick(w.adversarial + w.perceptual);
        let fake_g = self.d_global.global_forward(pick(w.adversarial), y)?;
        let fake_p = self.d_patch.patch_forward(d_input, y)?;
        let adversarial = adversarial_loss_g(&fake_g, &fake_p.logits)?;

        let real_p = self.d_patch.patch_forward(x, y)?.features.detach();
        let perceptual = perceptual_loss(&real_p, &fake_p.features, &w.perceptual_layers)?;

        let taps_x = self.extractor.extract(x)?.detach();
        let taps_out = self.extractor.extract(pick(w.style))?;
        let style = style_loss(&taps_x, &taps_out, &w.style_layers)?;

        let (out_pix, mid_pix) = if w.pixel != 0.0 {
            (live.clone(), out.intermediate.clone())
        } else {
            (frozen.clone(), out.intermediate.detach())
        };
        let pixel = pixel_l1_weighted(x, &out_pix, &mid_pix, w.intermediate_l1)?;
        Ok(LossParts {
            adversarial,
            style,
            perceptual,
            pixel,
        })
    }

    /// Runs the generator on `y` and returns its loss components.
    pub fn generator_loss_parts(&self, x: &Tensor, y: &Tensor) -> Result<LossParts> {
        let out = self.generator.forward(y)?;
        self.loss_parts_for(x, y, &out)
    }

    /// Discriminator update followed by a generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        self.train_step_xy(&batch.x, &batch.y)
    }

    pub fn train_step_xy(&mut self, x: &Tensor, y: &Tensor) -> Result<LossRecord> {
        let out = self.generator.forward(y)?;
        let (d_global, d_patch) = self.update_discriminators(x, &out.output.detach(), y)?;

        let parts = self.loss_parts_for(x, y, &out)?;
        let total = total_generator_loss(&parts, &self.config.loss)?;
        let record = LossRecord {
            epoch: self.epoch,
            step: self.step + 1,
            d_global,
            d_patch,
            g_adversarial: scalar(&parts.adversarial)?,
            style: scalar(&parts.style)?,
            perceptual: scalar(&parts.perceptual)?,
            l1: scalar(&parts.pixel)?,
            total: scalar(&total)?,
        };
        if !record.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at step {}: {record:?}", record.step)));
        }
        let grads = total.backward()?;
        self.opt_g.step(self.generator.params(), &grads)?;
        self.step += 1;
        Ok(record)
    }

    /// Generator output for each sample of `y`, run one sample at a time so the
    /// result does not depend on batch composition.
    pub fn infer(&self, y: &Tensor) -> Result<Tensor> {
        infer_tensor(&self.generator, y)
    }

    /// Metrics over the validation pairs.
    pub fn validate(&self, data: &TrainingData) -> Result<ValidationMetrics> {
        validate_pairs(&self.generator, data.validation_pairs(), self.dtype)
    }

    /// Batches of one epoch in schedule order.
    pub fn epoch_batches(&self, data: &TrainingData, epoch: usize) -> Result<Vec<Batch>> {
        let plan = epoch_plan(
            self.config.seeds.data,
            self.config.seeds.masks,
            epoch,
            data.train.len(),
            data.train_masks.len(),
        );
        plan.chunks(self.config.run.batch_size)
            .map(|chunk| {
                let images: Vec<_> = chunk.iter().map(|&(i, _)| &data.train[i]).collect();
                let masks: Vec<_> = chunk.iter().map(|&(_, m)| &data.train_masks.masks[m]).collect();
                Batch::assemble(&images, &masks, self.dtype)
            })
            .collect()
    }

    /// Trains until `run.epochs` epochs are complete. With an output directory,
    /// writes step and epoch logs plus `last` and `best` checkpoints; a
    /// non-finite loss leaves a `nonfinite` snapshot behind.
    pub fn fit(&mut self, data: &TrainingData, out_dir: Option<&Path>) -> Result<FitSummary> {
        data.check()?;
        let size = data.image_size();
        if size != (self.config.data.image_size, self.config.data.image_size) {
            return Err(Error::Data(format!(
                "data size {size:?} differs from configured image_size {}",
                self.config.data.image_size
            )));
        }
        let mut logs = match out_dir {
            Some(dir) => Some(RunLogs::open(dir, &self.config)?),
            None => None,
        };
        let mut summary = FitSummary {
            epochs_completed: self.epoch,
            steps_completed: self.step,
            best_val_ssim: self.best_val_ssim,
            last_checkpoint: None,
            best_checkpoint: None,
        };
        while self.epoch < self.config.run.epochs {
            let mut totals = (0.0, 0.0, 0usize);
            for batch in self.epoch_batches(data, self.epoch)? {
                let record = match self.train_step(&batch) {
                    Ok(r) => r,
                    Err(e) if e.is_numeric() => {
                        if let Some(dir) = out_dir {
                            self.checkpoint().save(&dir.join("nonfinite"))?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                totals = (totals.0 + record.total, totals.1 + record.l1, totals.2 + 1);
                if let Some(logs) = logs.as_mut() {
                    logs.train(&record)?;
                }
            }
            self.epoch += 1;
            let validation = self.validate(data)?;
            let n = totals.2.max(1) as f64;
            let metrics = EpochMetrics {
                epoch: self.epoch,
                step: self.step,
                mean_total: totals.0 / n,
                mean_l1: totals.1 / n,
                validation,
            };
            let improved = self.best_val_ssim.map_or(true, |b| metrics.validation.ssim > b);
            if improved {
                self.best_val_ssim = Some(metrics.validation.ssim);
            }
            self.history.push(metrics.clone());
            if let (Some(logs), Some(dir)) = (logs.as_mut(), out_dir) {
                logs.epoch(&metrics)?;
                let ckpt = self.checkpoint();
                let last = dir.join("last");
                ckpt.save(&last)?;
                summary.last_checkpoint = Some(last);
                if improved {
                    let best = dir.join("best");
                    ckpt.save(&best)?;
                    summary.best_checkpoint = Some(best);
                }
            }
        }
        summary.epochs_completed = self.epoch;
        summary.steps_completed = self.step;
        summary.best_val_ssim = self.best_val_ssim;
        Ok(summary)
    }
}

struct RunLogs {
    train: BufWriter<File>,
    val: BufWriter<File>,
}

impl RunLogs {
    fn open(dir: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("config.toml");
        std::fs::write(&cfg, config.to_toml_string()?).map_err(|e| Error::io(&cfg, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            train: open("train_log.jsonl")?,
            val: open("val_log.jsonl")?,
        })
    }

    fn train(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.train, "{}", serde_json::to_string(r)?).map_err(|e| Error::io("train_log.jsonl", e))
    }

    fn epoch(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.val, "{}", serde_json::to_string(m)?).map_err(|e| Error::io("val_log.jsonl", e))?;
        self.val.flush().map_err(|e| Error::io("val_log.jsonl", e))?;
        self.train.flush().map_err(|e| Error::io("train_log.jsonl", e))
    }
}

/// Per-sample generator forward over an `N×1×H×W` batch.
pub fn infer_tensor(generator: &CascadedGenerator, y: &Tensor) -> Result<Tensor> {
    let n = y.dim(0)?;
    let outs = (0..n)
        .map(|i| Ok(generator.forward(&y.narrow(0, i, 1)?)?.output.detach()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&outs, 0)?)
}

/// Inpaints one corrupted slice. With a mask, pixels outside it are copied
/// from the input.
pub fn inpaint(generator: &CascadedGenerator, input: &ImageSlice, mask: Option<&Mask>, dtype: DType) -> Result<ImageSlice> {
    let input = crate::imaging::normalize(input, IntensityRange::Signed)?.image;
    let (h, w) = input.size();
    let y = Tensor::from_vec(input.pixels().to_vec(), (1, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?;
    let out = infer_tensor(generator, &y)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let mut pixels: Vec<f64> = out.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    if let Some(mask) = mask {
        if mask.size() != (h, w) {
            return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.size(), (h, w))));
        }
        for (p, (&bit, &orig)) in pixels.iter_mut().zip(mask.bits().iter().zip(input.pixels())) {
            if bit == 0 {
                *p = orig;
            }
        }
    }
    ImageSlice::new(h, w, pixels, IntensityRange::Signed)
}

/// Mean metrics of the generator on (target, mask) pairs.
pub fn validate_pairs<'a>(
    generator: &CascadedGenerator,
    pairs: impl Iterator<Item = (&'a ImageSlice, &'a Mask)>,
    dtype: DType,
) -> Result<ValidationMetrics> {
    let mut rows = Vec::new();
    let (mut masked_sq, mut masked_n) = (0.0, 0usize);
    for (i, (target, mask)) in pairs.enumerate() {
        let corrupted = crate::imaging::apply_mask(target, mask, crate::imaging::FILL_VALUE)?.to_slice()?;
        let output = inpaint(generator, &corrupted, None, dtype)?;
        let (h, w) = target.size();
        let t255 = signed_to_255(target.pixels());
        let o255 = signed_to_255(output.pixels());
        for ((a, b), &bit) in t255.iter().zip(&o255).zip(mask.bits()) {
            if bit != 0 {
                masked_sq += (a - b) * (a - b);
                masked_n += 1;
            }
        }
        rows.push(MetricRow::compute(format!("{i:04}"), &t255, &o255, h, w)?);
    }
    if rows.is_empty() {
        return Err(Error::Data("no validation pairs".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(ValidationMetrics {
        ssim: mean(|r| r.ssim),
        psnr_db: mean(|r| r.psnr_db),
        mse: mean(|r| r.mse),
        uqi: mean(|r| r.uqi),
        masked_mse: if masked_n == 0 { 0.0 } else { masked_sq / masked_n as f64 },
    })
}

/// Generator and run config from a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(CascadedGenerator, RunConfig)> {
    let ckpt = Checkpoint::load(&checkpoint_stem(path))?;
    let config = ckpt.meta.config.resolved();
    let generator = CascadedGenerator::new(ckpt.meta.generator.clone(), config.run.precision.dtype(), 0)?;
    generator
        .params()
        .assign_from(&ckpt.section(GENERATOR_PREFIX), GENERATOR_PREFIX)?;
    Ok((generator, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk();
        c.run.epochs = 1;
        c.data.n_train = 4;
        c.data.n_validation = 2;
        c.masks.train_count = 4;
        c.masks.validation_count = 2;
        c
    }

    #[test]
    fn step_updates_all_networks() {
        let c = tiny();
        let data = TrainingData::from_config(&c).unwrap();
        let mut t = Trainer::new(&c).unwrap();
        let before = (
            t.generator().params().hash().unwrap(),
            t.global_discriminator().params().hash().unwrap(),
            t.patch_discriminator().params().hash().unwrap(),
            t.extractor().weights_hash().unwrap(),
        );
        let batch = &t.epoch_batches(&data, 0).unwrap()[0];
        let r = t.train_step(batch).unwrap();
        assert!(r.is_finite());
        assert_eq!(r.step, 1);
        assert_ne!(before.0, t.generator().params().hash().unwrap());
        assert_ne!(before.1, t.global_discriminator().params().hash().unwrap());
        assert_ne!(before.2, t.patch_discriminator().params().hash().unwrap());
        assert_eq!(before.3, t.extractor().weights_hash().unwrap());
    }

    #[test]
    fn checkpoint_restores_counters_and_weights() {
        let c = tiny();
        let data = TrainingData::from_config(&c).unwrap();
        let mut t = Trainer::new(&c).unwrap();
        let batch = &t.epoch_batches(&data, 0).unwrap()[0];
        t.train_step(batch).unwrap();
        let ck = t.checkpoint();
        let r = Trainer::from_checkpoint(&ck, None).unwrap();
        assert_eq!(r.step_count(), 1);
        assert_eq!(r.generator().params().hash().unwrap(), t.generator().params().hash().unwrap());
        let mut other = c.clone();
        other.seeds.global = 99;
        assert!(Trainer::from_checkpoint(&ck, Some(&other)).is_err());
        let mut longer = c.clone();
        longer.run.epochs = 5;
        assert!(Trainer::from_checkpoint(&ck, Some(&longer)).is_ok());
    }

    #[test]
    fn inpaint_composites_outside_mask() {
        let c = tiny();
        let data = TrainingData::from_config(&c).unwrap();
        let t = Trainer::new(&c).unwrap();
        let mask = &data.train_masks.masks[0];
        let y = crate::imaging::apply_mask(&data.train[0], mask, -1.0).unwrap().to_slice().unwrap();
        let out = inpaint(t.generator(), &y, Some(mask), t.dtype()).unwrap();
        for (i, &bit) in mask.bits().iter().enumerate() {
            if bit == 0 {
                assert_eq!(out.pixels()[i], y.pixels()[i]);
            }
        }
        let again = inpaint(t.generator(), &y, Some(mask), t.dtype()).unwrap();
        assert_eq!(out, again);
    }
}
