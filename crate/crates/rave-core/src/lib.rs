//! Rate-adaptive compression of 2D gaussian splat images.
//!
//! A scene is a set of anisotropic 2D gaussians alpha-composited front to
//! back. The crate fits such a set to a target image, orders gaussians by
//! gradient importance into nested detail levels, fine-tunes them under
//! quantization, and serializes any prefix of the importance ranking as a
//! compact bitstream, hitting arbitrary byte budgets between the coarsest and
//! finest level without retraining or gradient recomputation.

pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod hierarchy;
pub mod image;
pub mod imageio;
pub mod importance;
pub mod loss;
pub mod rate;
pub mod render;
pub mod splat;
pub mod train;

pub use checkpoint::Checkpoint;
pub use codec::{
    decode, dequantize, encode_subset, measure_rate, parse_header, quantize, Decoded,
    EntropyBackend, LzmaBackend, PlaneQuant, QuantDepths, QuantSpec, ANCHOR_INTERPOLATED,
    HEADER_LEN,
};
pub use error::{CodecError, Error, RateError, Result};
pub use hierarchy::{build_hierarchy, AnchorHierarchy, LevelSpec, ScoreMode};
pub use image::ImageBuffer;
pub use imageio::{decode_image, encode_png, load_image, save_png, write_atomic};
pub use importance::{rank_descending, score_gaussians, ScoreTable};
pub use loss::{combined_loss, l1_loss, mse, psnr, ssim, LossConfig, SsimConfig};
pub use rate::{
    anchor_rates, locate_anchor, select_delta, target_count, AnchorLocation, EncodeReport,
    RateControlOpts, RateController, RateTable,
};
pub use render::{render, render_backward, render_backward_subset, render_subset};
pub use splat::{
    covariance_from_params, eval_gaussian, Covariance2, Gaussian2D, GaussianSet, ParamGrads,
    Plane, Precision, RenderConfig, ALPHA_MAX, GRAD_PARAMS, PLANE_COUNT,
};
pub use train::{
    finetune_stochastic, init_from_image, train, AdamState, FinetuneConfig, LearningRates,
    TrainConfig, TrainResult,
};
