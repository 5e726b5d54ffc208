//! Synthetic rainy data, unpaired image ingestion, and training batches.

mod batch;
mod image;
mod manifest;
mod synth;

pub use batch::{
    make_batches, Batch, BatchOptions, BatchStream, LabeledBatch, LabeledSample, UnlabeledBatch,
    UnlabeledSample,
};
pub use image::{
    composite, crop_patch, residual_streaks, stack_fields, stack_images, HasSize, Image, RainField,
    CHANNELS,
};
pub use manifest::{LabeledEntry, Manifest, UnlabeledEntry};
pub use synth::{synthesize_background, synthesize_streaks, StreakParams, MIN_STREAK_SIZE};
