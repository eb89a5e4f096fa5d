//! Command implementations behind the CLI subcommands.

pub mod eval;
pub mod prune;
pub mod report;
pub mod synth;
pub mod train;

use prunefire_core::eval::{
    descriptor_table, pooled_verification, template_table, VerificationSummary,
};
use prunefire_core::model::{build_full_config, build_micro_config, ModelGraph};
use prunefire_core::rng::Rng;
use prunefire_core::tensor::Tensor;

use crate::config::{ModelChoice, RunConfig};
use crate::error::Result;

/// Fixed RNG stream ids, so each stage draws independent, reproducible
/// randomness from the one config seed.
pub const STREAM_MODEL_INIT: u64 = 0;
pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_PRUNE: u64 = 3;

pub fn build_model(cfg: &RunConfig, num_classes: usize) -> Result<ModelGraph> {
    let mut rng = Rng::with_stream(cfg.seed, STREAM_MODEL_INIT);
    Ok(match cfg.model {
        ModelChoice::Full => build_full_config(num_classes, &mut rng),
        ModelChoice::Micro { width_divisor } => {
            build_micro_config(num_classes, width_divisor, &mut rng)?
        }
    })
}

/// Verification summaries for each configured template mode, sharing one
/// descriptor extraction pass.
pub fn verification_summaries(
    model: &ModelGraph,
    test_tensors: &[[Vec<Tensor<f32>>; 3]],
    window: usize,
    per_template: &[usize],
) -> Result<Vec<VerificationSummary>> {
    let descriptors = descriptor_table(model, test_tensors)?;
    let mut out = Vec::with_capacity(per_template.len());
    for pt in per_template {
        let table = template_table(&descriptors, *pt)?;
        out.push(pooled_verification(&table, window, *pt)?);
    }
    Ok(out)
}
