//! Downstream uses of learned generators: zero-shot categorization of a
//! transformation amount, and warp-based augmentation during training.

mod augment;
mod zeroshot;

pub use augment::{train_augmented, AugmentConfig, Augmenter, GeneratorChoice};
pub use zeroshot::{
    categorize, estimate_delta, feature_flow_stack, report_from_records, zero_shot_eval, zero_shot_pair, Category, DeltaMatcher,
    ZeroShotConfig, ZeroShotRecord, ZeroShotReport,
};

#[cfg(test)]
mod tests;
