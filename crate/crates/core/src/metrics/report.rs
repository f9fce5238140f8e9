//! Dataset-level evaluation of an output directory against its targets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{mse, psnr_from_mse, ssim, uqi, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, UQI_WINDOW};
use crate::imaging::read_gray_png_255;
use crate::util::sha256_hex;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub uqi_window: usize,
    pub peak: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_k1: SSIM_K1,
            ssim_k2: SSIM_K2,
            uqi_window: UQI_WINDOW,
            peak: super::PEAK,
        }
    }
}

impl EvalConfig {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub uqi: f64,
}

impl MetricRow {
    /// All four metrics for one `[0, 255]` image pair.
    pub fn compute(id: impl Into<String>, target: &[f64], output: &[f64], height: usize, width: usize) -> Result<Self> {
        super::check_pair(target, output, height, width)?;
        let m = mse(target, output);
        Ok(Self {
            id: id.into(),
            mse: m,
            psnr_db: psnr_from_mse(m),
            ssim: ssim(target, output, height, width)?,
            uqi: uqi(target, output, height, width)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub mean_mse: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_uqi: f64,
    pub n_images: usize,
    pub eval_config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets_dir: Option<PathBuf>,
}

impl MetricReport {
    /// Sorts rows by id and takes arithmetic means of every column.
    pub fn from_rows(mut rows: Vec<MetricRow>, config: &EvalConfig) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("no image pairs to evaluate".into()));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_mse: mean(|r| r.mse),
            mean_psnr_db: mean(|r| r.psnr_db),
            mean_ssim: mean(|r| r.ssim),
            mean_uqi: mean(|r| r.uqi),
            n_images: rows.len(),
            per_image: rows,
            eval_config_hash: config.hash(),
            outputs_dir: None,
            targets_dir: None,
        })
    }

    /// Hash of the metric content, independent of the directories evaluated.
    pub fn content_hash(&self) -> String {
        let content = (&self.per_image, self.eval_config_hash.as_str());
        sha256_hex(serde_json::to_string(&content).expect("serializable").as_bytes())
    }

    /// Aligned text table with one row per image followed by the mean row.
    pub fn to_table(&self) -> String {
        let width = self
            .per_image
            .iter()
            .map(|r| r.id.len())
            .max()
            .unwrap_or(0)
            .max("mean".len())
            .max("Image".len());
        let mut out = String::new();
        let rule = "=".repeat(width + 44);
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(out, "{:>width$} | {:>8} {:>9} {:>10} {:>8}", "Image", "SSIM", "PSNR(dB)", "MSE", "UQI");
        let _ = writeln!(out, "{}", "-".repeat(width + 44));
        for r in &self.per_image {
            let _ = writeln!(
                out,
                "{:>width$} | {:>8.4} {:>9.2} {:>10.2} {:>8.4}",
                r.id, r.ssim, r.psnr_db, r.mse, r.uqi
            );
        }
        let _ = writeln!(out, "{}", "-".repeat(width + 44));
        let _ = writeln!(
            out,
            "{:>width$} | {:>8.4} {:>9.2} {:>10.2} {:>8.4}",
            "mean", self.mean_ssim, self.mean_psnr_db, self.mean_mse, self.mean_uqi
        );
        let _ = writeln!(out, "{rule}");
        out
    }
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                files.insert(name.to_owned(), path);
            }
        }
    }
    Ok(files)
}

/// Scores every PNG in `outputs_dir` against the same-named PNG in `targets_dir`.
pub fn evaluate(outputs_dir: &Path, targets_dir: &Path) -> Result<MetricReport> {
    let outputs = png_files(outputs_dir)?;
    let targets = png_files(targets_dir)?;
    let orphans: Vec<&String> = outputs
        .keys()
        .filter(|k| !targets.contains_key(*k))
        .chain(targets.keys().filter(|k| !outputs.contains_key(*k)))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!(
            "unmatched files: {}",
            orphans.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let config = EvalConfig::default();
    let rows = outputs
        .iter()
        .map(|(name, out_path)| {
            let (h, w, out) = read_gray_png_255(out_path)?;
            let (th, tw, target) = read_gray_png_255(&targets[name])?;
            if (h, w) != (th, tw) {
                return Err(Error::Shape(format!("{name}: output {h}x{w} vs target {th}x{tw}")));
            }
            MetricRow::compute(name.clone(), &target, &out, h, w)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::from_rows(rows, &config)?;
    report.outputs_dir = Some(outputs_dir.to_path_buf());
    report.targets_dir = Some(targets_dir.to_path_buf());
    Ok(report)
}
