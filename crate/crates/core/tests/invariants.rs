mod common;

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;

use common::{input_fd, param_fd, small_batch, small_phantom, FD_STEP};
use ipa_core::discriminator::{receptive_field_of, Discriminator, DiscriminatorSpec};
use ipa_core::extractor::Extractor;
use ipa_core::generator::{CascadedGenerator, GeneratorConfig};
use ipa_core::imaging::{
    apply_mask, generate_arbitrary_mask, generate_phantom, read_gray_png_255, write_slice_png, ImageSlice,
    IntensityRange, FILL_VALUE, TRAIN_AREA_RANGE,
};
use ipa_core::losses::{perceptual_loss, style_loss, FeatureStack, LossWeights};
use ipa_core::metrics::{mse, psnr, signed_to_255, ssim, uqi};
use ipa_core::trainer::{Batch, RunConfig, Trainer, TrainingData};

fn mean_scalar(t: &Tensor) -> Tensor {
    t.mean_all().unwrap()
}

#[test]
fn generator_output_mean_matches_finite_differences() {
    let g = CascadedGenerator::new(GeneratorConfig::desk(), DType::F64, 5).unwrap();
    let (_, y) = small_batch(2, 32, DType::F64);
    let loss = || mean_scalar(&g.forward(&y).unwrap().output);
    let r = param_fd(g.params(), &loss, 20, 1, FD_STEP, 1e-3);
    assert!(r.max_rel <= 1e-3, "{r:?}");
}

#[test]
fn generator_parameter_count_is_a_function_of_config() {
    let a = CascadedGenerator::new(GeneratorConfig::desk(), DType::F32, 1).unwrap();
    let b = CascadedGenerator::new(GeneratorConfig::desk(), DType::F32, 2).unwrap();
    assert_eq!(a.num_parameters(), b.num_parameters());
    let wide = CascadedGenerator::new(GeneratorConfig::default(), DType::F32, 1).unwrap();
    assert!(wide.num_parameters() > a.num_parameters());
    println!("desk generator: {} parameters; full: {}", a.num_parameters(), wide.num_parameters());
}

#[test]
fn discriminator_parameter_gradients_match_finite_differences() {
    let (x, y) = small_batch(2, 32, DType::F64);
    for (i, spec) in [DiscriminatorSpec::patch_scaled(8), DiscriminatorSpec::global_for(32, 8)].into_iter().enumerate() {
        let d = Discriminator::new(spec, DType::F64, 10 + i as u64).unwrap();
        let loss = || {
            let out = d.patch_forward(&x, &y).unwrap();
            (out.logits.sqr().unwrap().mean_all().unwrap() + out.features.maps()[1].mean_all().unwrap()).unwrap()
        };
        let r = param_fd(d.params(), &loss, 20, 2 + i as u64, FD_STEP, 1e-3);
        assert!(r.max_rel <= 1e-3, "{r:?}");
    }
}

#[test]
fn extractor_input_gradient_matches_finite_differences() {
    let e = Extractor::random(3, 8, DType::F64).unwrap();
    let img = small_phantom(4, 64);
    let scaled: Vec<f64> = img.pixels().iter().map(|v| v * 0.9).collect();
    let x = Var::from_tensor(&Tensor::from_vec(scaled, (1, 1, 64, 64), &Device::Cpu).unwrap()).unwrap();
    let loss = |t: &Tensor| {
        let taps = e.extract(t).unwrap();
        taps.maps()
            .iter()
            .map(|m| m.sqr().unwrap().mean_all().unwrap())
            .reduce(|a, b| (a + b).unwrap())
            .unwrap()
    };
    let r = input_fd(&x, &loss, 10, 5, FD_STEP);
    assert!(r.max_rel <= 1e-3, "{r:?}");
}

#[test]
fn extractor_is_deterministic_and_batch_order_equivariant() {
    let e = Extractor::random(3, 8, DType::F32).unwrap();
    let (x, _) = small_batch(3, 64, DType::F32);
    let a = e.extract(&x).unwrap();
    let b = e.extract(&x).unwrap();
    let perm = Tensor::cat(&[x.get(2).unwrap().unsqueeze(0).unwrap(), x.narrow(0, 0, 2).unwrap()], 0).unwrap();
    let c = e.extract(&perm).unwrap();
    for ((ma, mb), mc) in a.maps().iter().zip(b.maps()).zip(c.maps()) {
        let va = ma.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, mb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let first = ma.get(2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let moved = mc.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(first, moved);
    }
}

#[test]
fn feature_losses_vanish_only_for_equal_taps() {
    let e = Extractor::random(3, 8, DType::F64).unwrap();
    let (x, y) = small_batch(2, 64, DType::F64);
    let tx = e.extract(&x).unwrap();
    let ty = e.extract(&y).unwrap();
    let w = LossWeights::default();
    let scalar = |t: Tensor| t.to_scalar::<f64>().unwrap();
    assert_eq!(scalar(style_loss(&tx, &tx, &w.style_layers).unwrap()), 0.0);
    assert!(scalar(style_loss(&tx, &ty, &w.style_layers).unwrap()) > 0.0);
    let four = |s: &FeatureStack| FeatureStack::new(s.maps()[..4].to_vec());
    assert_eq!(scalar(perceptual_loss(&four(&tx), &four(&tx), &w.perceptual_layers).unwrap()), 0.0);
    assert!(scalar(perceptual_loss(&four(&tx), &four(&ty), &w.perceptual_layers).unwrap()) > 0.0);
}

fn pair(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let a = signed_to_255(generate_phantom(seed, 64, 64).unwrap().pixels());
    let b = signed_to_255(generate_phantom(seed + 1000, 64, 64).unwrap().pixels());
    (a, b)
}

#[test]
fn metrics_are_symmetric_and_one_only_for_identical_images() {
    for seed in 0..100 {
        let (a, b) = pair(seed);
        assert_eq!(mse(&a, &b), mse(&b, &a));
        assert_eq!(psnr(&a, &b), psnr(&b, &a));
        let (s_ab, s_ba) = (ssim(&a, &b, 64, 64).unwrap(), ssim(&b, &a, 64, 64).unwrap());
        let (q_ab, q_ba) = (uqi(&a, &b, 64, 64).unwrap(), uqi(&b, &a, 64, 64).unwrap());
        assert!((s_ab - s_ba).abs() < 1e-12 && (q_ab - q_ba).abs() < 1e-12);
        assert!(s_ab < 1.0 - 1e-9 && q_ab < 1.0 - 1e-9);
        assert!((ssim(&a, &a, 64, 64).unwrap() - 1.0).abs() <= 1e-9);
        assert!((uqi(&a, &a, 64, 64).unwrap() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn metrics_depend_only_on_decoded_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let img = generate_phantom(8, 64, 64).unwrap();
    let p = dir.path().join("a.png");
    write_slice_png(&p, &img).unwrap();
    let (_, _, decoded) = read_gray_png_255(&p).unwrap();
    // Re-encode the same pixels as an 8-bit file: values change only by quantization.
    let q = dir.path().join("b.png");
    let bytes: Vec<u8> = decoded.iter().map(|v| v.round() as u8).collect();
    image::GrayImage::from_raw(64, 64, bytes.clone()).unwrap().save(&q).unwrap();
    let (_, _, decoded8) = read_gray_png_255(&q).unwrap();
    let expected: Vec<f64> = bytes.iter().map(|&b| f64::from(b)).collect();
    assert_eq!(decoded8, expected);
    assert_eq!(ssim(&decoded8, &expected, 64, 64).unwrap(), ssim(&expected, &expected, 64, 64).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pasting_target_back_over_the_mask_reconstructs_it(img_seed in any::<u64>(), mask_seed in any::<u64>()) {
        let img = generate_phantom(img_seed, 64, 64).unwrap();
        let mask = generate_arbitrary_mask(mask_seed, (64, 64), TRAIN_AREA_RANGE).unwrap();
        let y = apply_mask(&img, &mask, FILL_VALUE).unwrap();
        let restored: Vec<f64> = y
            .pixels()
            .iter()
            .zip(img.pixels())
            .zip(mask.bits())
            .map(|((&c, &t), &b)| if b == 1 { t } else { c })
            .collect();
        prop_assert_eq!(restored.as_slice(), img.pixels());
        prop_assert!(y.pixels().iter().zip(mask.bits()).all(|(&v, &b)| b == 0 || v == FILL_VALUE));
    }

    #[test]
    fn phantom_bounds(seed in any::<u64>()) {
        let img = generate_phantom(seed, 64, 64).unwrap();
        prop_assert!(img.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(img.range(), IntensityRange::Signed);
    }

    #[test]
    fn receptive_field_is_monotone(layers in proptest::collection::vec((1usize..6, 1usize..4), 1..7), extra_k in 1usize..4, extra_s in 1usize..3) {
        let base = receptive_field_of(layers.iter().copied());
        let mut deeper = layers.clone();
        deeper.push((extra_k, extra_s));
        prop_assert!(receptive_field_of(deeper) >= base);
        let mut bigger_k = layers.clone();
        bigger_k[0].0 += extra_k;
        prop_assert!(receptive_field_of(bigger_k) >= base);
        let mut bigger_s = layers.clone();
        bigger_s[0].1 += extra_s;
        prop_assert!(receptive_field_of(bigger_s) >= base);
    }
}

fn probe_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.data.n_train = 4;
    c.data.n_validation = 2;
    c.masks.train_count = 4;
    c.masks.validation_count = 2;
    c
}

fn fixed_batch(data: &TrainingData) -> Batch {
    let imgs: Vec<&ImageSlice> = data.train.iter().collect();
    let masks: Vec<_> = data.train_masks.masks.iter().collect();
    Batch::assemble(&imgs, &masks, DType::F32).unwrap()
}

#[test]
fn discriminators_learn_against_a_frozen_generator() {
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let mut c = probe_config();
        c.seeds.global = seed;
        let data = TrainingData::from_config(&c).unwrap();
        let batch = fixed_batch(&data);
        let mut t = Trainer::new(&c).unwrap();
        let g_hash = t.generator().params().hash().unwrap();
        let first = t.discriminator_step(&batch.x, &batch.y).unwrap();
        let mut last = first;
        for _ in 1..50 {
            last = t.discriminator_step(&batch.x, &batch.y).unwrap();
        }
        assert_eq!(g_hash, t.generator().params().hash().unwrap());
        deltas.push((last.0 - first.0, last.1 - first.1));
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    assert!(median(deltas.iter().map(|d| d.0).collect()) < 0.0, "{deltas:?}");
    assert!(median(deltas.iter().map(|d| d.1).collect()) < 0.0, "{deltas:?}");
}

#[test]
fn pixel_only_objective_is_plain_regression() {
    let mut c = probe_config();
    c.loss = LossWeights::pixel_only();
    let data = TrainingData::from_config(&c).unwrap();
    let batch = fixed_batch(&data);
    let mut t = Trainer::new(&c).unwrap();
    let l1: Vec<f64> = (0..100).map(|_| t.train_step(&batch).unwrap().l1).collect();
    let window_means: Vec<f64> = l1.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(window_means.windows(2).all(|w| w[1] < w[0]), "{window_means:?}");
    assert!(l1[99] < l1[0]);
}

#[test]
fn resumed_training_continues_the_uninterrupted_run() {
    let mut c = probe_config();
    c.run.epochs = 2;
    let data = TrainingData::from_config(&c).unwrap();
    let mut straight = Trainer::new(&c).unwrap();
    straight.fit(&data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = c.clone();
    first.run.epochs = 1;
    let mut part = Trainer::new(&first).unwrap();
    let summary = part.fit(&data, Some(dir.path())).unwrap();
    let ckpt = ipa_core::Checkpoint::load(summary.last_checkpoint.as_ref().unwrap()).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt, Some(&c)).unwrap();
    resumed.fit(&data, Some(dir.path())).unwrap();

    assert_eq!(resumed.step_count(), straight.step_count());
    assert_eq!(resumed.epoch(), 2);
    assert_eq!(
        resumed.generator().params().hash().unwrap(),
        straight.generator().params().hash().unwrap()
    );
    assert_eq!(resumed.history(), straight.history());
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count() as u64, straight.step_count());
    for f in ["last.json", "best.json", "val_log.jsonl", "config.toml"] {
        assert!(dir.path().join(f).exists());
    }
}
