//! PNG and manifest I/O for slices and masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{normalize, ImageSlice, IntensityRange, Mask, ShapeKind};
use crate::{Error, Result};

/// Writes a signed slice as a 16-bit grayscale PNG using the fixed
/// `[-1, 1] -> [0, 65535]` mapping.
pub fn write_slice_png(path: &Path, img: &ImageSlice) -> Result<()> {
    let signed = normalize(img, IntensityRange::Signed)?.image;
    let data: Vec<u16> = signed
        .pixels()
        .iter()
        .map(|&v| ((v + 1.0) * 0.5 * 65535.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data).expect("buffer size matches");
    buf.save(path)?;
    Ok(())
}

/// Reads a grayscale PNG as a raw-range slice. 8-bit files are widened by 257.
pub fn read_slice_png(path: &Path) -> Result<ImageSlice> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| f64::from(v) * 257.0).collect(),
        other => other.into_luma16().into_raw().into_iter().map(f64::from).collect(),
    };
    ImageSlice::new(h, w, pixels, IntensityRange::RawU16)
}

/// Reads a slice written by [`write_slice_png`] back onto the signed range with
/// the same fixed mapping, without per-image rescaling.
pub fn read_signed_png(path: &Path) -> Result<ImageSlice> {
    let raw = read_slice_png(path)?;
    let (h, w) = raw.size();
    let pixels = raw.into_pixels().into_iter().map(|v| v / 65535.0 * 2.0 - 1.0).collect();
    ImageSlice::new(h, w, pixels, IntensityRange::Signed)
}

/// Reads a grayscale PNG onto the `[0, 255]` float scale used by the metrics.
pub fn read_gray_png_255(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) * 255.0 / 65535.0)
            .collect(),
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) * 255.0 / 65535.0)
            .collect(),
    };
    Ok((h, w, pixels))
}

/// 8-bit PNG, 255 = corrupted.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.size();
    let data = mask.bits().iter().map(|&b| if b == 1 { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, data).expect("buffer size matches");
    buf.save(path)?;
    Ok(())
}

/// Any nonzero pixel counts as corrupted.
pub fn read_mask_png(path: &Path, seed: u64, shape_kind: ShapeKind) -> Result<Mask> {
    let img = open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    Mask::from_bits(h, w, bits, seed, shape_kind)
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(image::open(path)?)
}

/// Lists the slice files of a dataset directory and its train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: [usize; 2],
    pub train_count: usize,
    pub test_count: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    /// Train share of the reference split (3028 train / 1072 test slices).
    pub const TRAIN_SHARE: f64 = 3028.0 / 4100.0;

    pub fn split_counts(n: usize) -> (usize, usize) {
        let train = ((n as f64 * Self::TRAIN_SHARE).round() as usize).clamp(usize::from(n > 0), n);
        (train, n - train)
    }

    /// Loads and normalizes the listed slices to the signed range.
    pub fn load_split(&self, dir: &Path, train: bool) -> Result<Vec<ImageSlice>> {
        let files = if train { &self.train } else { &self.test };
        files
            .iter()
            .map(|f| {
                let raw = read_slice_png(&dir.join(f))?;
                if raw.size() != (self.image_size[0], self.image_size[1]) {
                    return Err(Error::Data(format!(
                        "{f}: size {:?} differs from manifest {:?}",
                        raw.size(),
                        self.image_size
                    )));
                }
                Ok(normalize(&raw, IntensityRange::Signed)?.image)
            })
            .collect()
    }
}

pub fn write_dataset_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = dir.join("dataset.json");
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("dataset.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_arbitrary_mask, generate_phantom, TRAIN_AREA_RANGE};

    #[test]
    fn slice_png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let img = generate_phantom(4, 64, 64).unwrap();
        write_slice_png(&p, &img).unwrap();
        let raw = read_slice_png(&p).unwrap();
        assert_eq!(raw.range(), IntensityRange::RawU16);
        let (_, _, scaled) = read_gray_png_255(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(&scaled) {
            assert!(((a + 1.0) * 127.5 - b).abs() < 255.0 / 65535.0);
        }
        let signed = read_signed_png(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(signed.pixels()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn mask_png_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = generate_arbitrary_mask(2, (64, 64), TRAIN_AREA_RANGE).unwrap();
        write_mask_png(&p, &m).unwrap();
        assert_eq!(read_mask_png(&p, 2, ShapeKind::Arbitrary).unwrap(), m);
    }

    #[test]
    fn default_split_mirrors_reference_ratio() {
        assert_eq!(DatasetManifest::split_counts(4100), (3028, 1072));
        assert_eq!(DatasetManifest::split_counts(40), (30, 10));
        assert_eq!(DatasetManifest::split_counts(1), (1, 0));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_slice_png(Path::new("/nonexistent/x.png")), Err(Error::Io { .. })));
    }
}
