//! Deterministic parametric image-editing sandbox.
//!
//! Tools are pure functions of `(ImageBuffer, ToolCall)`. Calls are checked
//! against a [`Registry`] before execution; output is always clamped to
//! `[0, 1]`. Quantisation to 8 bits happens only in [`encode_png`].

mod call;
pub mod color;
mod image;
pub mod kernels;
mod registry;

use std::path::PathBuf;

pub use call::{CallSyntaxError, ParamValue, ToolCall};
pub use image::{
    decode_png, encode_png, quantize_channel, read_png, write_png, ContentHash, DirStore,
    ImageBuffer, ImageRef, ImageStore, MemoryStore,
};
pub use registry::{ColorSpace, ParamKind, ParamSpec, Registry, ToolSpec, ValidationReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("invalid tool call `{name}` (name ok: {}, params ok: {:.3})", report.name_ok, report.params_ok_fraction)]
    InvalidCall {
        name: String,
        report: ValidationReport,
    },
    #[error("invalid tool call at index {index}: {source}")]
    InvalidCallAt {
        index: usize,
        #[source]
        source: Box<ToolError>,
    },
    #[error("image must have positive dimensions")]
    EmptyImage,
    #[error("buffer holds {actual} values, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("PNG decode failed: {0}")]
    Decode(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("image `{0}` cannot be resolved to its recorded hash")]
    Unresolvable(String),
    #[error("registry: {0}")]
    Registry(String),
}

/// Validates and applies one call.
pub fn apply(
    img: &ImageBuffer,
    call: &ToolCall,
    registry: &Registry,
) -> Result<ImageBuffer, ToolError> {
    let report = registry.validate(call);
    if !report.is_valid() {
        return Err(ToolError::InvalidCall {
            name: call.name.clone(),
            report,
        });
    }
    Ok(kernels::apply_valid(img, call))
}

/// Folds `calls` over `img`, returning the final image and every intermediate
/// (`intermediates[k]` is the result after `calls[..=k]`).
pub fn apply_sequence(
    img: &ImageBuffer,
    calls: &[ToolCall],
    registry: &Registry,
) -> Result<(ImageBuffer, Vec<ImageBuffer>), ToolError> {
    let mut current = img.clone();
    let mut intermediates = Vec::with_capacity(calls.len());
    for (index, call) in calls.iter().enumerate() {
        current = apply(&current, call, registry).map_err(|e| ToolError::InvalidCallAt {
            index,
            source: Box::new(e),
        })?;
        intermediates.push(current.clone());
    }
    Ok((current, intermediates))
}

/// Applies the calls that pass validation and skips the rest; this is how
/// the agent environment executes model-issued tool calls.
pub fn execute_lenient(img: &ImageBuffer, calls: &[ToolCall], registry: &Registry) -> ImageBuffer {
    calls.iter().fold(img.clone(), |acc, call| {
        if registry.validate(call).is_valid() {
            kernels::apply_valid(&acc, call)
        } else {
            acc
        }
    })
}
