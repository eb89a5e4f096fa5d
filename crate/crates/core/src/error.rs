//! Error type shared across the core engine.

use alloc::string::String;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Tensor construction or op input with an impossible shape.
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A layer was fed the wrong number of channels.
    #[error("layer '{layer}': expected {expected} input channels, got {actual}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },

    /// NaN or Inf showed up where the contract requires finite values.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Classification label outside the class range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// backward() called on a tape that recorded no operations.
    #[error("backward on a tape with no recorded ops")]
    EmptyTape,

    /// backward() root must be a scalar.
    #[error("backward root must be a scalar, got {elements} elements")]
    NotScalar { elements: usize },

    /// Micro config division left a layer with too few filters.
    #[error("width divisor {divisor} leaves layer '{layer}' with {filters} filters (minimum 2)")]
    TooFewFilters {
        layer: String,
        divisor: usize,
        filters: usize,
    },

    /// Graph wiring that the dependency analysis cannot resolve.
    #[error("unresolvable wiring at layer '{layer}': {detail}")]
    UnresolvableWiring { layer: String, detail: String },

    /// Channel-consistency validation failed on a graph edge.
    #[error("inconsistent channels on edge {producer} -> {consumer}: {detail}")]
    InconsistentEdge {
        producer: String,
        consumer: String,
        detail: String,
    },

    /// Checkpoint header is not ours or is damaged.
    #[error("checkpoint: corrupt header ({detail})")]
    CorruptHeader { detail: String },

    /// Checkpoint shape table disagrees with layer attributes.
    #[error("checkpoint: shape table mismatch ({detail})")]
    ShapeTableMismatch { detail: String },

    /// Checkpoint payload shorter than the shape table promises.
    #[error("checkpoint: truncated payload (needed {needed} bytes, had {available})")]
    TruncatedPayload { needed: usize, available: usize },

    /// Manifest parsing or validation failure, with the offending row.
    #[error("manifest row {row}: {detail}")]
    ManifestRow { row: usize, detail: String },

    /// Manifest with no data rows.
    #[error("manifest is empty")]
    EmptyManifest,

    /// Image bytes that are not a decodable PPM/PGM.
    #[error("image decode: {detail}")]
    ImageDecode { detail: String },

    /// Image too small for the requested geometry.
    #[error("image geometry: {detail}")]
    ImageGeometry { detail: String },

    /// A class cannot satisfy both train and validation splits.
    #[error("class '{class}' has {images} image(s); cannot split into train and validation")]
    UnsplittableClass { class: String, images: usize },

    /// Training loss went NaN; diagnostic carries where.
    #[error("NaN loss at epoch {epoch}, batch {batch}, lr {lr}")]
    NanLoss { epoch: usize, batch: usize, lr: f64 },

    /// Scoring requested over an empty subset.
    #[error("scoring subset is empty")]
    EmptySubset,

    /// Gradient and parameter lengths disagree while scoring.
    #[error("score_batch: gradient/parameter length mismatch in group {group} ({detail})")]
    ScoreLengthMismatch { group: usize, detail: String },

    /// Brute-force importance guarded against large models.
    #[error(
        "brute-force importance: {groups} groups exceeds ceiling {ceiling}; use sampled evaluation"
    )]
    BruteForceCeiling { groups: usize, ceiling: usize },

    /// Verification protocol needs more identities than available.
    #[error("impostor window {window} needs at least {window}+1 identities, got {identities}")]
    ImpostorWindow { window: usize, identities: usize },

    /// Template construction fed the wrong number of descriptors.
    #[error("template: expected {expected} descriptors per identity-pose, got {actual}")]
    TemplateCount { expected: usize, actual: usize },

    /// Cosine of a zero vector is undefined.
    #[error("cosine: zero vector")]
    ZeroVector,

    /// EER needs both genuine and impostor scores.
    #[error("EER: empty {which} score list")]
    EmptyScores { which: &'static str },

    /// A pruning/session hook failed (IO etc. on the caller's side).
    #[error("hook failed: {0}")]
    Hook(String),
}

impl Error {
    /// Re-attribute a channel mismatch to a named layer.
    pub fn with_layer(self, name: &str) -> Self {
        match self {
            Error::ChannelMismatch {
                expected, actual, ..
            } => Error::ChannelMismatch {
                layer: String::from(name),
                expected,
                actual,
            },
            other => other,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
