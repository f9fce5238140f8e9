//! Training data: image slices, mask corpora and batch assembly.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DataSource, RunConfig};
use crate::imaging::{
    apply_mask, build_mask_corpus, build_square_corpus, generate_phantom, read_dataset_manifest, ImageSlice,
    IntensityRange, Mask, MaskCorpus, MaskRole, ShapeKind, FILL_VALUE,
};
use crate::util::child_seed;
use crate::{Error, Result};

/// Seed offset separating validation phantoms from training phantoms.
const VALIDATION_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<ImageSlice>,
    pub validation: Vec<ImageSlice>,
    pub train_masks: MaskCorpus,
    pub validation_masks: MaskCorpus,
}

impl TrainingData {
    /// Builds or loads everything the run config points at.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let c = config.resolved();
        let (train, validation) = load_images(&c)?;
        let size = train[0].size();
        let train_masks = load_or_build_masks(&c, MaskRole::Train, size)?;
        let validation_masks = load_or_build_masks(&c, MaskRole::Validation, size)?;
        let data = Self {
            train,
            validation,
            train_masks,
            validation_masks,
        };
        data.check()?;
        Ok(data)
    }

    pub fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.validation.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        if self.train_masks.is_empty() || self.validation_masks.is_empty() {
            return Err(Error::Data("mask corpora must be non-empty".into()));
        }
        let size = self.train[0].size();
        let images = self.train.iter().chain(&self.validation);
        if let Some(bad) = images.clone().find(|i| i.size() != size) {
            return Err(Error::Data(format!("mixed image sizes {:?} and {:?}", size, bad.size())));
        }
        if let Some(bad) = images.clone().find(|i| i.range() != IntensityRange::Signed) {
            return Err(Error::Data(format!("images must be signed, found {:?}", bad.range())));
        }
        let masks = self.train_masks.masks.iter().chain(&self.validation_masks.masks);
        if let Some(bad) = masks.clone().find(|m| m.size() != size) {
            return Err(Error::Data(format!("mask size {:?} differs from image size {:?}", bad.size(), size)));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.train[0].size()
    }

    /// Validation pairs: image `i` with mask `i mod n`.
    pub fn validation_pairs(&self) -> impl Iterator<Item = (&ImageSlice, &Mask)> {
        let n = self.validation_masks.len();
        self.validation
            .iter()
            .enumerate()
            .map(move |(i, img)| (img, &self.validation_masks.masks[i % n]))
    }
}

fn load_images(c: &RunConfig) -> Result<(Vec<ImageSlice>, Vec<ImageSlice>)> {
    match c.data.source {
        DataSource::Phantom => {
            let size = c.data.image_size;
            if c.data.n_train == 0 || c.data.n_validation == 0 {
                return Err(Error::Config("n_train and n_validation must be >= 1".into()));
            }
            let train = (0..c.data.n_train as u64)
                .map(|i| generate_phantom(child_seed(c.seeds.data, i), size, size))
                .collect::<Result<Vec<_>>>()?;
            let validation = (0..c.data.n_validation as u64)
                .map(|i| generate_phantom(child_seed(c.seeds.data, VALIDATION_SEED_OFFSET + i), size, size))
                .collect::<Result<Vec<_>>>()?;
            Ok((train, validation))
        }
        DataSource::Directory => {
            let dir = c
                .data
                .dir
                .as_ref()
                .ok_or_else(|| Error::Config("data.dir is required for a directory source".into()))?;
            let manifest = read_dataset_manifest(dir)?;
            let train = manifest.load_split(dir, true)?;
            let mut validation = manifest.load_split(dir, false)?;
            if validation.is_empty() {
                validation = train.clone();
            }
            Ok((train, validation))
        }
    }
}

fn load_or_build_masks(c: &RunConfig, role: MaskRole, size: (usize, usize)) -> Result<MaskCorpus> {
    let (dir, count, area, index) = match role {
        MaskRole::Train => (&c.masks.train_dir, c.masks.train_count, c.masks.train_area, 0),
        MaskRole::Validation => (&c.masks.validation_dir, c.masks.validation_count, c.masks.validation_area, 1),
    };
    if let Some(dir) = dir {
        return MaskCorpus::load(dir);
    }
    let master = child_seed(c.seeds.masks, index);
    match c.masks.mode {
        ShapeKind::Arbitrary => build_mask_corpus(master, count, (area[0], area[1]), role, size),
        ShapeKind::Square => build_square_corpus(master, count, c.square_block(), role, size),
    }
}

/// One batch of targets `x` and corrupted inputs `y`, both `N×1×H×W`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub masks: Vec<Mask>,
}

impl Batch {
    pub fn assemble(images: &[&ImageSlice], masks: &[&Mask], dtype: DType) -> Result<Self> {
        if images.is_empty() || images.len() != masks.len() {
            return Err(Error::InvalidArgument(format!(
                "batch needs matching non-empty image and mask lists, got {} and {}",
                images.len(),
                masks.len()
            )));
        }
        let (h, w) = images[0].size();
        let mut xs = Vec::with_capacity(images.len() * h * w);
        let mut ys = Vec::with_capacity(xs.capacity());
        for (img, mask) in images.iter().zip(masks) {
            let corrupted = apply_mask(img, mask, FILL_VALUE)?;
            xs.extend_from_slice(img.pixels());
            ys.extend_from_slice(corrupted.pixels());
        }
        let shape = (images.len(), 1, h, w);
        Ok(Self {
            x: Tensor::from_vec(xs, shape, &Device::Cpu)?.to_dtype(dtype)?,
            y: Tensor::from_vec(ys, shape, &Device::Cpu)?.to_dtype(dtype)?,
            masks: masks.iter().map(|m| (*m).clone()).collect(),
        })
    }
}

/// Sample order and mask assignment for one epoch, derived from the data and
/// mask seeds so that a resumed run replays the same schedule.
pub fn epoch_plan(data_seed: u64, mask_seed: u64, epoch: usize, n_images: usize, n_masks: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(child_seed(data_seed, epoch as u64)));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(child_seed(mask_seed, epoch as u64));
    order.into_iter().map(|i| (i, mask_rng.gen_range(0..n_masks))).collect()
}
