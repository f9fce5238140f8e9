//! Binary corruption masks and seeded mask corpora.

use std::f64::consts::{FRAC_PI_4, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_mask_png, write_mask_png};
use crate::util::{child_seed, sha256_chunks};
use crate::{Error, Result};

/// Area-fraction range of the training corpus.
pub const TRAIN_AREA_RANGE: (f64, f64) = (0.0136, 0.0546);
/// Area-fraction range of the held-out validation corpus.
pub const VALIDATION_AREA_RANGE: (f64, f64) = (0.0166, 0.0456);

const ATTEMPTS_PER_ROUND: usize = 100;
/// Brush geometry is specified in pixels for 256-pixel images and scaled linearly.
const REFERENCE_SIZE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Arbitrary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Train,
    Validation,
}

impl MaskRole {
    pub fn default_area_range(self) -> (f64, f64) {
        match self {
            MaskRole::Train => TRAIN_AREA_RANGE,
            MaskRole::Validation => VALIDATION_AREA_RANGE,
        }
    }
}

/// Binary mask, `1` marks a corrupted pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
    pub area_fraction: f64,
    pub seed: u64,
    pub shape_kind: ShapeKind,
}

impl Mask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>, seed: u64, shape_kind: ShapeKind) -> Result<Self> {
        if bits.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask bits must be 0 or 1".into()));
        }
        let area_fraction = fraction_of(&bits);
        Ok(Self {
            height,
            width,
            bits,
            area_fraction,
            seed,
            shape_kind,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }
}

fn fraction_of(bits: &[u8]) -> f64 {
    bits.iter().filter(|&&b| b == 1).count() as f64 / bits.len() as f64
}

/// A `block`×`block` square with a uniformly random top-left corner such that
/// it lies fully inside the image.
pub fn generate_square_mask(seed: u64, image_size: (usize, usize), block: usize) -> Result<Mask> {
    let (h, w) = image_size;
    if block == 0 || block > h || block > w {
        return Err(Error::InvalidArgument(format!(
            "square block {block} does not fit a {h}x{w} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=h - block);
    let left = rng.gen_range(0..=w - block);
    let mut bits = vec![0u8; h * w];
    for row in bits.chunks_mut(w).skip(top).take(block) {
        row[left..left + block].fill(1);
    }
    Mask::from_bits(h, w, bits, seed, ShapeKind::Square)
}

struct Canvas {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl Canvas {
    fn stamp(&mut self, cy: f64, cx: f64, radius: f64) {
        let r2 = radius * radius;
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(self.h - 1);
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(self.w - 1);
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - cy;
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r2 {
                    self.bits[y * self.w + x] = 1;
                }
            }
        }
    }
}

/// One free-form candidate: the union of 1–4 random-walk brush strokes.
fn brush_candidate(rng: &mut ChaCha8Rng, h: usize, w: usize, radius_factor: f64) -> Vec<u8> {
    let scale = h.min(w) as f64 / REFERENCE_SIZE;
    let (hf, wf) = (h as f64, w as f64);
    let mut canvas = Canvas {
        h,
        w,
        bits: vec![0; h * w],
    };
    let strokes = rng.gen_range(1..=4);
    for _ in 0..strokes {
        let mut y = rng.gen_range(0.125 * hf..0.875 * hf);
        let mut x = rng.gen_range(0.125 * wf..0.875 * wf);
        let mut heading = rng.gen_range(0.0..TAU);
        let steps = rng.gen_range(10..=40);
        let radius = (rng.gen_range(6.0..14.0) * scale * radius_factor).max(0.5);
        canvas.stamp(y, x, radius);
        for _ in 0..steps {
            heading += rng.gen_range(-FRAC_PI_4..FRAC_PI_4);
            let len = rng.gen_range(4.0..12.0) * scale;
            let ny = (y + len * heading.sin()).clamp(0.0, hf - 1e-9);
            let nx = (x + len * heading.cos()).clamp(0.0, wf - 1e-9);
            // Stamp along the segment so strokes stay connected.
            let n = ((len / (0.5 * radius)).ceil() as usize).max(1);
            for k in 1..=n {
                let t = k as f64 / n as f64;
                canvas.stamp(y + t * (ny - y), x + t * (nx - x), radius);
            }
            y = ny;
            x = nx;
        }
    }
    canvas.bits
}

/// Free-form brush-stroke mask whose area fraction lies in `area_range`.
///
/// Candidates are rejection-sampled. After 100 failures the brush radius is
/// adapted once in the direction of the dominant failure, and after 100 more
/// the call fails.
pub fn generate_arbitrary_mask(seed: u64, image_size: (usize, usize), area_range: (f64, f64)) -> Result<Mask> {
    let (h, w) = image_size;
    let (low, high) = area_range;
    if !(0.0 < low && low < high && high < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "area range ({low}, {high}) must satisfy 0 < low < high < 0.5"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty mask size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radius_factor = 1.0;
    for round in 0..2 {
        let mut too_large = 0usize;
        for _ in 0..ATTEMPTS_PER_ROUND {
            let bits = brush_candidate(&mut rng, h, w, radius_factor);
            let f = fraction_of(&bits);
            if (low..=high).contains(&f) {
                return Mask::from_bits(h, w, bits, seed, ShapeKind::Arbitrary);
            }
            if f > high {
                too_large += 1;
            }
        }
        if round == 0 {
            radius_factor = if too_large * 2 >= ATTEMPTS_PER_ROUND { 0.6 } else { 1.6 };
        }
    }
    Err(Error::MaskGeneration(format!(
        "seed {seed}: no brush mask with area in [{low}, {high}] for a {h}x{w} image after {} attempts",
        2 * ATTEMPTS_PER_ROUND
    )))
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub seed: u64,
    pub area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCorpusManifest {
    pub master_seed: u64,
    pub role: MaskRole,
    pub shape_kind: ShapeKind,
    pub image_size: [usize; 2],
    pub area_range: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    pub corpus_hash: String,
    pub masks: Vec<CorpusEntry>,
}

/// Ordered, seeded set of masks reused across training or validation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskCorpus {
    pub masks: Vec<Mask>,
    pub role: MaskRole,
    pub area_range: (f64, f64),
    pub master_seed: u64,
    pub image_size: (usize, usize),
    pub shape_kind: ShapeKind,
    pub block: Option<usize>,
}

/// `n` free-form masks; mask `i` is generated from `child_seed(master_seed, i)`.
pub fn build_mask_corpus(
    master_seed: u64,
    n: usize,
    area_range: (f64, f64),
    role: MaskRole,
    image_size: (usize, usize),
) -> Result<MaskCorpus> {
    if n == 0 {
        return Err(Error::InvalidArgument("mask corpus needs at least one mask".into()));
    }
    let masks = (0..n as u64)
        .map(|i| generate_arbitrary_mask(child_seed(master_seed, i), image_size, area_range))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskCorpus {
        masks,
        role,
        area_range,
        master_seed,
        image_size,
        shape_kind: ShapeKind::Arbitrary,
        block: None,
    })
}

/// `n` square masks of side `block`.
pub fn build_square_corpus(
    master_seed: u64,
    n: usize,
    block: usize,
    role: MaskRole,
    image_size: (usize, usize),
) -> Result<MaskCorpus> {
    if n == 0 {
        return Err(Error::InvalidArgument("mask corpus needs at least one mask".into()));
    }
    let masks = (0..n as u64)
        .map(|i| generate_square_mask(child_seed(master_seed, i), image_size, block))
        .collect::<Result<Vec<_>>>()?;
    let f = (block * block) as f64 / (image_size.0 * image_size.1) as f64;
    Ok(MaskCorpus {
        masks,
        role,
        area_range: (f, f),
        master_seed,
        image_size,
        shape_kind: ShapeKind::Square,
        block: Some(block),
    })
}

impl MaskCorpus {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// SHA-256 over the size and bits of every mask, in order.
    pub fn hash(&self) -> String {
        let dims: Vec<[u8; 16]> = self
            .masks
            .iter()
            .map(|m| {
                let mut d = [0u8; 16];
                d[..8].copy_from_slice(&(m.height as u64).to_le_bytes());
                d[8..].copy_from_slice(&(m.width as u64).to_le_bytes());
                d
            })
            .collect();
        sha256_chunks(
            self.masks
                .iter()
                .zip(&dims)
                .flat_map(|(m, d)| [d.as_slice(), m.bits.as_slice()]),
        )
    }

    fn file_name(i: usize) -> String {
        format!("mask_{i:04}.png")
    }

    pub fn manifest(&self) -> MaskCorpusManifest {
        MaskCorpusManifest {
            master_seed: self.master_seed,
            role: self.role,
            shape_kind: self.shape_kind,
            image_size: [self.image_size.0, self.image_size.1],
            area_range: [self.area_range.0, self.area_range.1],
            block: self.block,
            corpus_hash: self.hash(),
            masks: self
                .masks
                .iter()
                .enumerate()
                .map(|(i, m)| CorpusEntry {
                    file: Self::file_name(i),
                    seed: m.seed,
                    area_fraction: m.area_fraction,
                })
                .collect(),
        }
    }

    /// Writes one PNG per mask plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<MaskCorpusManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for (m, entry) in self.masks.iter().zip(&manifest.masks) {
            write_mask_png(&dir.join(&entry.file), m)?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads masks from the PNG files listed in `dir/manifest.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let masks = manifest
            .masks
            .iter()
            .map(|e| {
                let m = read_mask_png(&dir.join(&e.file), e.seed, manifest.shape_kind)?;
                if m.area_fraction != e.area_fraction {
                    return Err(Error::Data(format!(
                        "{}: area fraction {} differs from manifest {}",
                        e.file, m.area_fraction, e.area_fraction
                    )));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus = Self::from_parts(&manifest, masks);
        if corpus.hash() != manifest.corpus_hash {
            return Err(Error::Data(format!("corpus hash mismatch in {}", dir.display())));
        }
        Ok(corpus)
    }

    /// Rebuilds the corpus from the seeds recorded in a manifest.
    pub fn regenerate(manifest: &MaskCorpusManifest) -> Result<Self> {
        let size = (manifest.image_size[0], manifest.image_size[1]);
        let n = manifest.masks.len();
        let corpus = match manifest.shape_kind {
            ShapeKind::Arbitrary => build_mask_corpus(
                manifest.master_seed,
                n,
                (manifest.area_range[0], manifest.area_range[1]),
                manifest.role,
                size,
            )?,
            ShapeKind::Square => {
                let block = manifest
                    .block
                    .ok_or_else(|| Error::Data("square corpus manifest lacks block size".into()))?;
                build_square_corpus(manifest.master_seed, n, block, manifest.role, size)?
            }
        };
        for (m, e) in corpus.masks.iter().zip(&manifest.masks) {
            if m.seed != e.seed {
                return Err(Error::Data(format!("{}: seed {} does not follow the split rule", e.file, e.seed)));
            }
        }
        Ok(corpus)
    }

    fn from_parts(manifest: &MaskCorpusManifest, masks: Vec<Mask>) -> Self {
        Self {
            masks,
            role: manifest.role,
            area_range: (manifest.area_range[0], manifest.area_range[1]),
            master_seed: manifest.master_seed,
            image_size: (manifest.image_size[0], manifest.image_size[1]),
            shape_kind: manifest.shape_kind,
            block: manifest.block,
        }
    }
}

pub(crate) fn read_manifest(dir: &Path) -> Result<MaskCorpusManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
