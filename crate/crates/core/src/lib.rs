//! Core numerics for the selfprompt toolkit: dense volume types with a
//! bit-exact container format, an exact anisotropic distance transform,
//! geometric prompt generation, small dense neural-network building blocks
//! (depth-fused adapters, modality and multi-class adapters, a multi-scale
//! prompt generator), and the training-schedule math that drives them.

pub mod edt;
pub mod error;
pub mod nn;
pub mod prompt;
pub mod spv;
pub mod synth;
pub mod trainmath;
pub mod volume;

pub use edt::{edt_bruteforce, edt_exact, DistanceField, BRUTE_FORCE_MAX_VOXELS};
pub use error::{Error, Result};
pub use prompt::{
    extract_box, generate_prompts, prompts_from_json, prompts_to_json, read_prompts,
    select_point, write_prompts, BoxPrompt, PointPrompt, PromptMode, PromptSet, PROMPT_SCHEMA,
};
pub use spv::{parse_spv, read_spv, spv_bytes, write_spv};
pub use synth::{random_spheres, synth_spheres, Sphere};
pub use trainmath::{
    compose_loss, cross_entropy_loss, dice_ce_loss, dice_score, downsample_labels, ds_weights,
    poly_lr, soft_dice_loss, LossLevel, LossReport, LrSchedule, DICE_EPSILON, LOG_CLAMP,
    PHASE_ONE_EPOCHS, POLY_EXPONENT,
};
pub use volume::{BinaryMask, Dims, LabelVolume, ScalarVolume, Spacing, Volume, MAX_CLASSES};
