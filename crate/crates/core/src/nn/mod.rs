//! The tower network and its training machinery.

pub mod adam;
pub mod checkpoint;
pub mod encoder;
pub mod params;
pub mod scalar;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use encoder::{
    export_attention, forward_backbone, forward_classifier, forward_discriminator, forward_projection,
    train_step, write_attention_csv, Mode, NormMode, SeqBatch,
};
pub use params::{init_params, EncoderConfig, HeadLayout, ModelParams};
pub use scalar::Real;
pub use tape::{Anchor, AnchorPlan, SeqLayout, Tape, Var};
