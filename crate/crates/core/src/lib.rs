//! Localization-free inpainting of arbitrarily masked grayscale slices.
//!
//! The crate provides the full training and evaluation stack:
//!
//! * [`imaging`]: slices, masks, synthetic phantoms and mask corpora,
//! * [`generator`]: the cascaded two-stage MultiRes-UNet,
//! * [`discriminator`]: conditional global/patch critics and the receptive-field auditor,
//! * [`extractor`]: the frozen VGG-19 style feature extractor,
//! * [`losses`]: adversarial, perceptual, style and pixel objectives,
//! * [`metrics`]: MSE, PSNR, SSIM, UQI and dataset reports,
//! * [`trainer`]: the joint optimization loop, checkpoints and inference.

pub mod discriminator;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;
pub mod util;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};

pub use discriminator::{receptive_field, ConvLayerSpec, Discriminator, DiscriminatorKind, DiscriminatorSpec};
pub use extractor::{Extractor, ExtractorSource, ExtractorTapPlan};
pub use generator::{CascadedGenerator, GeneratorConfig};
pub use imaging::{
    apply_mask, build_mask_corpus, generate_arbitrary_mask, generate_phantom, generate_square_mask,
    normalize, CorruptedImage, ImageSlice, IntensityRange, Mask, MaskCorpus, MaskRole, ShapeKind,
};
pub use losses::{FeatureStack, LossWeights};
pub use metrics::{MetricReport, MetricRow};
pub use trainer::{Checkpoint, LossRecord, RunConfig, Trainer};
