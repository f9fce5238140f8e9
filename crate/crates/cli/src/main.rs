//! `ipa`: synthetic data, mask corpora, training, inference, evaluation and plots.

mod output;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ipa_core::discriminator::{receptive_field, DiscriminatorSpec};
use ipa_core::imaging::{
    build_mask_corpus, build_square_corpus, generate_phantom, read_gray_png_255, read_mask_png,
    read_signed_png, write_dataset_manifest, write_slice_png, DatasetManifest, MaskRole, ShapeKind,
};
use ipa_core::metrics::{evaluate, MetricReport};
use ipa_core::trainer::{checkpoint_stem, inpaint, load_generator, Checkpoint, EpochMetrics, RunConfig, Trainer, TrainingData};
use ipa_core::util::{child_seed, sha256_hex};

use output::{CliError, CliResult, OutputGuard, Summary, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "ipa", version, about = "Inpainting GAN for grayscale slices")]
struct Cli {
    /// Print a JSON summary (config, seeds, artifacts) on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic head phantoms as 16-bit PNGs plus dataset.json.
    GenPhantoms(GenPhantoms),
    /// Write a mask corpus (PNG files plus manifest.json).
    GenMasks(GenMasks),
    /// Train from a TOML run config.
    Train(Train),
    /// Inpaint one PNG or a directory of PNGs with a trained checkpoint.
    Infer(Infer),
    /// Score outputs against same-named targets.
    Eval(Eval),
    /// Print discriminator receptive fields.
    RfAudit,
    /// Render metric curves and an Input/Output/Target montage.
    Plot(Plot),
}

#[derive(Args)]
struct GenPhantoms {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Square,
    Arbitrary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Train,
    Validation,
}

#[derive(Args)]
struct GenMasks {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    n: usize,
    /// Lower area fraction; defaults to the role's range.
    #[arg(long)]
    area_low: Option<f64>,
    #[arg(long)]
    area_high: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Square side in pixels; a quarter of the image side by default.
    #[arg(long)]
    block: Option<usize>,
    #[arg(long, value_enum, default_value = "train")]
    role: Role,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides run.output_dir.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corrupted input PNG or directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Mask PNG or directory of same-named masks; pixels outside the mask are kept.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    /// JSON report path; a text table is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Plot {
    /// Report written by `eval`.
    #[arg(long)]
    report: PathBuf,
    /// Per-epoch validation log (val_log.jsonl) for training curves.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory of corrupted inputs named like the report rows.
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long)]
    outputs: Option<PathBuf>,
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Montage rows.
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::GenPhantoms(a) => gen_phantoms(a),
        Command::GenMasks(a) => gen_masks(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::RfAudit => rf_audit(),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(summary) => {
            summary.emit(cli.json);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            if cli.json {
                println!("{}", json!({ "exit_code": e.code, "error": e.message }));
            }
            ExitCode::from(e.code)
        }
    }
}

fn gen_phantoms(a: &GenPhantoms) -> CliResult<Summary> {
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    if a.size < 64 || a.size % 16 != 0 {
        return Err(CliError::usage("--size must be a multiple of 16 and at least 64"));
    }
    let mut guard = OutputGuard::default();
    guard.dir(&a.out)?;
    let names: Vec<String> = (0..a.n).map(|i| format!("slice_{i:04}.png")).collect();
    for (i, name) in names.iter().enumerate() {
        let img = generate_phantom(child_seed(a.seed, i as u64), a.size, a.size)?;
        let path = a.out.join(name);
        guard.file(&path)?;
        write_slice_png(&path, &img)?;
    }
    let (train, test) = DatasetManifest::split_counts(a.n);
    let manifest = DatasetManifest {
        image_size: [a.size, a.size],
        train_count: train,
        test_count: test,
        train: names[..train].to_vec(),
        test: names[train..].to_vec(),
        seed: Some(a.seed),
    };
    let manifest_path = a.out.join("dataset.json");
    guard.file(&manifest_path)?;
    write_dataset_manifest(&a.out, &manifest)?;
    let hash = sha256_hex(&std::fs::read(&manifest_path)?);
    guard.commit();

    let mut s = Summary::new("gen-phantoms", json!({ "n": a.n, "size": a.size, "out": a.out }));
    s.seeds(json!({ "seed": a.seed }));
    s.artifact(&a.out);
    s.detail("manifest_hash", hash.clone());
    s.detail("train_count", train);
    s.detail("test_count", test);
    s.line(format!("wrote {} phantoms ({train} train / {test} test) to {}", a.n, a.out.display()));
    s.line(format!("manifest sha256 {hash}"));
    Ok(s)
}

fn gen_masks(a: &GenMasks) -> CliResult<Summary> {
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    if a.size < 16 || a.size % 16 != 0 {
        return Err(CliError::usage("--size must be a positive multiple of 16"));
    }
    let role = match a.role {
        Role::Train => MaskRole::Train,
        Role::Validation => MaskRole::Validation,
    };
    let (default_low, default_high) = role.default_area_range();
    let (low, high) = (a.area_low.unwrap_or(default_low), a.area_high.unwrap_or(default_high));
    if !(low > 0.0 && high < 1.0) {
        return Err(CliError::usage("area fractions must lie in (0, 1)"));
    }
    if high < low {
        return Err(CliError::usage(format!("--area-high ({high}) is below --area-low ({low})")));
    }
    let block = a.block.unwrap_or(a.size / 4);
    let corpus = match a.mode {
        Mode::Arbitrary => build_mask_corpus(a.seed, a.n, (low, high), role, (a.size, a.size))?,
        Mode::Square => build_square_corpus(a.seed, a.n, block, role, (a.size, a.size))?,
    };
    let mut guard = OutputGuard::default();
    guard.dir(&a.out)?;
    let manifest = corpus.save(&a.out)?;
    guard.commit();

    let fractions: Vec<f64> = corpus.masks.iter().map(|m| m.area_fraction).collect();
    let min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mode = match a.mode {
        Mode::Square => "square",
        Mode::Arbitrary => "arbitrary",
    };
    let mut s = Summary::new(
        "gen-masks",
        json!({ "mode": mode, "n": a.n, "area_low": low, "area_high": high, "size": a.size,
                "block": matches!(a.mode, Mode::Square).then_some(block), "role": role, "out": a.out }),
    );
    s.seeds(json!({ "seed": a.seed }));
    s.artifact(&a.out);
    s.detail("corpus_hash", manifest.corpus_hash.clone());
    s.detail("area_min", min);
    s.detail("area_max", max);
    s.line(format!("wrote {} {mode} masks to {}", a.n, a.out.display()));
    s.line(format!("area fraction range [{min:.5}, {max:.5}], corpus sha256 {}", manifest.corpus_hash));
    Ok(s)
}

fn train(a: &Train) -> CliResult<Summary> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(out) = &a.output {
        config.run.output_dir = out.clone();
    }
    let config = config.resolved();
    config.validate()?;
    let out_dir = config.output_dir();
    let data = TrainingData::from_config(&config)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::from_checkpoint(&Checkpoint::load(&checkpoint_stem(ckpt))?, Some(&config))?,
        None => Trainer::new(&config)?,
    };
    let mut guard = OutputGuard::default();
    guard.dir(&out_dir)?;
    let summary = match trainer.fit(&data, Some(&out_dir)) {
        Ok(s) => s,
        // Keep the directory: it holds the snapshot taken at the failing step.
        Err(e @ ipa_core::Error::NonFinite(_)) => {
            guard.commit();
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    guard.commit();

    let mut s = Summary::new("train", serde_json::to_value(&config)?);
    s.seeds(serde_json::to_value(&config.seeds)?);
    s.artifact(&out_dir);
    for p in [&summary.last_checkpoint, &summary.best_checkpoint].into_iter().flatten() {
        s.artifact(p);
    }
    s.detail("config_hash", config.hash());
    s.detail("epochs", summary.epochs_completed);
    s.detail("steps", summary.steps_completed);
    s.detail("best_val_ssim", summary.best_val_ssim);
    s.line(format!(
        "trained {} epochs ({} steps), best validation SSIM {}",
        summary.epochs_completed,
        summary.steps_completed,
        summary.best_val_ssim.map_or("n/a".into(), |v| format!("{v:.4}"))
    ));
    s.line(format!("outputs in {}", out_dir.display()));
    Ok(s)
}

fn png_list(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::data(format!("{}: no such file or directory", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!("{}: no PNG files", path.display())));
    }
    Ok(files)
}

fn infer(a: &Infer) -> CliResult<Summary> {
    let (generator, config) = load_generator(&a.ckpt)?;
    let inputs = png_list(&a.input)?;
    let mut guard = OutputGuard::default();
    guard.dir(&a.out)?;
    let mut written = Vec::new();
    for input in &inputs {
        let name = input.file_name().expect("file path");
        let mask = match &a.mask {
            Some(m) if m.is_dir() => Some(read_mask_png(&m.join(name), 0, ShapeKind::Arbitrary)?),
            Some(m) => Some(read_mask_png(m, 0, ShapeKind::Arbitrary)?),
            None => None,
        };
        let slice = read_signed_png(input)?;
        let out = inpaint(&generator, &slice, mask.as_ref(), config.run.precision.dtype())?;
        let path = a.out.join(name);
        guard.file(&path)?;
        write_slice_png(&path, &out)?;
        written.push(path);
    }
    guard.commit();

    let mut s = Summary::new(
        "infer",
        json!({ "ckpt": a.ckpt, "in": a.input, "out": a.out, "mask": a.mask, "run_config_hash": config.hash() }),
    );
    s.seeds(serde_json::to_value(&config.seeds)?);
    for p in &written {
        s.artifact(p);
    }
    s.line(format!("inpainted {} images into {}", written.len(), a.out.display()));
    Ok(s)
}

fn eval(a: &Eval) -> CliResult<Summary> {
    let report = evaluate(&a.outputs, &a.targets)?;
    let table_path = a.report.with_extension("txt");
    let mut guard = OutputGuard::default();
    guard.file(&a.report)?;
    guard.file(&table_path)?;
    std::fs::write(&a.report, serde_json::to_string_pretty(&report)?)?;
    let table = report.to_table();
    std::fs::write(&table_path, &table)?;
    guard.commit();

    let mut s = Summary::new("eval", json!({ "outputs": a.outputs, "targets": a.targets, "report": a.report }));
    s.artifact(&a.report);
    s.artifact(&table_path);
    s.detail("n_images", report.n_images);
    s.detail("mean_mse", report.mean_mse);
    s.detail("mean_psnr_db", report.mean_psnr_db);
    s.detail("mean_ssim", report.mean_ssim);
    s.detail("mean_uqi", report.mean_uqi);
    s.detail("eval_config_hash", report.eval_config_hash.clone());
    s.line(table.trim_end().to_string());
    Ok(s)
}

fn rf_audit() -> CliResult<Summary> {
    let patch = receptive_field(&DiscriminatorSpec::patch());
    let global = receptive_field(&DiscriminatorSpec::global());
    let mut s = Summary::new("rf-audit", json!({}));
    s.detail("patch", patch);
    s.detail("global", global);
    s.line(format!("patch={patch}"));
    s.line(format!("global={global}"));
    Ok(s)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::from))
        .collect()
}

fn plot(a: &Plot) -> CliResult<Summary> {
    let text = std::fs::read_to_string(&a.report).map_err(|e| CliError::data(format!("{}: {e}", a.report.display())))?;
    let report: MetricReport = serde_json::from_str(&text)?;
    let series = match &a.log {
        Some(log) => {
            let epochs: Vec<EpochMetrics> = read_jsonl(log)?;
            let col = |f: fn(&EpochMetrics) -> f64| epochs.iter().map(f).collect::<Vec<_>>();
            vec![
                plot::Series { title: "val SSIM / epoch", values: col(|e| e.validation.ssim) },
                plot::Series { title: "val PSNR (dB) / epoch", values: col(|e| e.validation.psnr_db) },
                plot::Series { title: "val MSE / epoch", values: col(|e| e.validation.mse) },
                plot::Series { title: "val UQI / epoch", values: col(|e| e.validation.uqi) },
                plot::Series { title: "train L1 / epoch", values: col(|e| e.mean_l1) },
            ]
        }
        None => {
            let col = |f: fn(&ipa_core::MetricRow) -> f64| report.per_image.iter().map(f).collect::<Vec<_>>();
            vec![
                plot::Series { title: "SSIM / image", values: col(|r| r.ssim) },
                plot::Series { title: "PSNR (dB) / image", values: col(|r| r.psnr_db) },
                plot::Series { title: "MSE / image", values: col(|r| r.mse) },
                plot::Series { title: "UQI / image", values: col(|r| r.uqi) },
            ]
        }
    };
    let outputs = a.outputs.clone().or_else(|| report.outputs_dir.clone());
    let targets = a.targets.clone().or_else(|| report.targets_dir.clone());
    let montage_rows = match (&a.inputs, &outputs, &targets) {
        (Some(i), Some(o), Some(t)) => {
            let rows = report
                .per_image
                .iter()
                .take(a.rows)
                .map(|r| {
                    let tile = |dir: &Path| -> CliResult<(usize, usize, Vec<f64>)> { Ok(read_gray_png_255(&dir.join(&r.id))?) };
                    Ok([tile(i)?, tile(o)?, tile(t)?])
                })
                .collect::<CliResult<Vec<_>>>()?;
            Some(rows)
        }
        (None, _, _) => None,
        _ => return Err(CliError::usage("montage needs output and target directories")),
    };

    let mut guard = OutputGuard::default();
    guard.dir(&a.out)?;
    let curves_path = a.out.join("curves.png");
    guard.file(&curves_path)?;
    plot::curves(&series).save(&curves_path)?;
    let montage_path = a.out.join("montage.png");
    if let Some(rows) = &montage_rows {
        guard.file(&montage_path)?;
        plot::montage(rows).save(&montage_path)?;
    }
    guard.commit();

    let mut s = Summary::new(
        "plot",
        json!({ "report": a.report, "log": a.log, "inputs": a.inputs, "outputs": outputs, "targets": targets, "rows": a.rows, "out": a.out }),
    );
    s.artifact(&curves_path);
    s.line(format!("wrote {}", curves_path.display()));
    if let Some(rows) = montage_rows {
        s.artifact(&montage_path);
        s.detail("montage_columns", plot::MONTAGE_COLUMNS.to_vec());
        s.detail("montage_rows", rows.len());
        s.line(format!("wrote {} ({} rows)", montage_path.display(), rows.len()));
    } else {
        s.line("no --inputs given; montage skipped");
    }
    Ok(s)
}

