//! Image and mask domain types, normalization, phantoms and mask corpora.

mod io;
mod mask;
mod phantom;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{
    read_dataset_manifest, read_gray_png_255, read_mask_png, read_signed_png, read_slice_png, write_dataset_manifest,
    write_mask_png, write_slice_png, DatasetManifest,
};
pub use mask::{
    build_mask_corpus, build_square_corpus, generate_arbitrary_mask, generate_square_mask, CorpusEntry,
    Mask, MaskCorpus, MaskCorpusManifest, MaskRole, ShapeKind, TRAIN_AREA_RANGE, VALIDATION_AREA_RANGE,
};
pub use phantom::generate_phantom;

/// Value written into corrupted pixels (black in the signed range).
pub const FILL_VALUE: f64 = -1.0;

/// Slices must have both sides divisible by this so a depth-4 U-Net fits.
pub const SIZE_DIVISOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityRange {
    RawU16,
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl IntensityRange {
    fn bounds(self) -> Option<(f64, f64)> {
        match self {
            IntensityRange::RawU16 => None,
            IntensityRange::Unit => Some((0.0, 1.0)),
            IntensityRange::Signed => Some((-1.0, 1.0)),
        }
    }
}

/// A 2D grayscale slice stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    range: IntensityRange,
}

impl ImageSlice {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, range: IntensityRange) -> Result<Self> {
        if height == 0 || width == 0 || height % SIZE_DIVISOR != 0 || width % SIZE_DIVISOR != 0 {
            return Err(Error::Shape(format!(
                "slice size {height}x{width} must be nonzero and divisible by {SIZE_DIVISOR}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} pixels for {height}x{width}, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("slice pixel {bad}")));
        }
        if range == IntensityRange::Signed && pixels.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("signed slice has values outside [-1, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            range,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn range(&self) -> IntensityRange {
        self.range
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

/// Result of [`normalize`]. `degenerate` is set when a constant raw image
/// had no range to stretch and was mapped to the midpoint.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub image: ImageSlice,
    pub degenerate: bool,
}

/// Affinely map `img` onto `target`.
///
/// Raw images are stretched from their own min/max; tagged images are mapped
/// between the fixed unit and signed ranges.
pub fn normalize(img: &ImageSlice, target: IntensityRange) -> Result<Normalized> {
    let (lo, hi) = target
        .bounds()
        .ok_or_else(|| Error::InvalidArgument("cannot normalize into the raw range".into()))?;
    if img.range == target {
        return Ok(Normalized {
            image: img.clone(),
            degenerate: false,
        });
    }
    let (src_lo, src_hi) = match img.range.bounds() {
        Some(b) => b,
        None => img
            .pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
    };
    let degenerate = src_hi <= src_lo;
    let pixels = if degenerate {
        vec![0.5 * (lo + hi); img.pixels.len()]
    } else {
        let scale = (hi - lo) / (src_hi - src_lo);
        img.pixels
            .iter()
            .map(|&v| ((v - src_lo) * scale + lo).clamp(lo, hi))
            .collect()
    };
    Ok(Normalized {
        image: ImageSlice::new(img.height, img.width, pixels, target)?,
        degenerate,
    })
}

/// The corrupted input `y`. The mask seed is bookkeeping only and never
/// reaches the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub source_mask_seed: u64,
}

impl CorruptedImage {
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_slice(&self) -> Result<ImageSlice> {
        ImageSlice::new(self.height, self.width, self.pixels.clone(), IntensityRange::Signed)
    }
}

pub fn apply_mask(target: &ImageSlice, mask: &Mask, fill: f64) -> Result<CorruptedImage> {
    if target.size() != mask.size() {
        return Err(Error::Shape(format!(
            "image {:?} vs mask {:?}",
            target.size(),
            mask.size()
        )));
    }
    if target.range != IntensityRange::Signed {
        return Err(Error::InvalidArgument("apply_mask expects a signed slice".into()));
    }
    let pixels = target
        .pixels
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b == 1 { fill } else { v })
        .collect();
    Ok(CorruptedImage {
        height: target.height,
        width: target.width,
        pixels,
        source_mask_seed: mask.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(h: usize, w: usize, f: impl Fn(usize) -> f64) -> ImageSlice {
        ImageSlice::new(h, w, (0..h * w).map(f).collect(), IntensityRange::RawU16).unwrap()
    }

    #[test]
    fn u16_endpoints_map_to_signed_endpoints() {
        let img = raw(16, 16, |i| if i % 2 == 0 { 0.0 } else { 65535.0 });
        let n = normalize(&img, IntensityRange::Signed).unwrap();
        assert!(!n.degenerate);
        for (i, v) in n.image.pixels().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn already_signed_is_unchanged() {
        let img = ImageSlice::new(16, 16, vec![0.25; 256], IntensityRange::Signed).unwrap();
        let n = normalize(&img, IntensityRange::Signed).unwrap();
        assert_eq!(n.image, img);
        assert!(!n.degenerate);
    }

    #[test]
    fn constant_raw_maps_to_midpoint() {
        let img = raw(16, 16, |_| 500.0);
        let n = normalize(&img, IntensityRange::Signed).unwrap();
        assert!(n.degenerate);
        assert!(n.image.pixels().iter().all(|&v| v == 0.0));
        assert_eq!(n.image.range(), IntensityRange::Signed);
    }

    #[test]
    fn rejects_bad_slices() {
        assert!(ImageSlice::new(20, 16, vec![0.0; 320], IntensityRange::Unit).is_err());
        assert!(ImageSlice::new(16, 16, vec![0.0; 10], IntensityRange::Unit).is_err());
        assert!(ImageSlice::new(16, 16, vec![f64::NAN; 256], IntensityRange::Unit).is_err());
        assert!(ImageSlice::new(16, 16, vec![1.5; 256], IntensityRange::Signed).is_err());
    }

    #[test]
    fn apply_mask_identity_and_full_cover() {
        let img = generate_phantom(3, 64, 64).unwrap();
        let empty = Mask::from_bits(64, 64, vec![0; 4096], 0, ShapeKind::Arbitrary).unwrap();
        let y = apply_mask(&img, &empty, FILL_VALUE).unwrap();
        assert_eq!(y.pixels(), img.pixels());

        let full = Mask::from_bits(64, 64, vec![1; 4096], 0, ShapeKind::Arbitrary).unwrap();
        let y = apply_mask(&img, &full, FILL_VALUE).unwrap();
        assert!(y.pixels().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn square_mask_fills_exactly_4096_pixels() {
        let img = ImageSlice::new(256, 256, vec![0.5; 256 * 256], IntensityRange::Signed).unwrap();
        let m = generate_square_mask(11, (256, 256), 64).unwrap();
        let y = apply_mask(&img, &m, FILL_VALUE).unwrap();
        assert_eq!(y.pixels().iter().filter(|&&v| v == FILL_VALUE).count(), 4096);
    }

    #[test]
    fn apply_mask_errors() {
        let img = generate_phantom(3, 64, 64).unwrap();
        let m = generate_square_mask(1, (32, 32), 8).unwrap();
        assert!(matches!(apply_mask(&img, &m, FILL_VALUE), Err(Error::Shape(_))));
        let unit = normalize(&img, IntensityRange::Unit).unwrap().image;
        let m = generate_square_mask(1, (64, 64), 8).unwrap();
        assert!(apply_mask(&unit, &m, FILL_VALUE).is_err());
    }
}
