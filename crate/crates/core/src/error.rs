//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not fit together.
    /// `detail` names the offending dimension.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Convolution output extent (in + 2*pad - kernel) is not divisible by stride.
    #[error("conv2d: {axis} extent ({input} + 2*{pad} - {kernel}) is not divisible by stride {stride}")]
    ConvNotExact {
        axis: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{what} has zero norm")]
    ZeroNorm { what: &'static str },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("prompt size p={p} out of bounds for {template} on {height}x{width} (allowed 1..={max})")]
    PromptSizeOutOfBounds {
        template: &'static str,
        p: usize,
        height: usize,
        width: usize,
        max: usize,
    },

    #[error("backbone is frozen; {op} requires an unfrozen backbone")]
    BackboneFrozen { op: &'static str },

    #[error("backbone is not frozen; {op} requires a frozen backbone")]
    BackboneNotFrozen { op: &'static str },

    #[error("inconsistent architecture spec: {detail}")]
    BadArchSpec { detail: String },

    #[error("{what} is empty")]
    Empty { what: &'static str },

    #[error("{op} needs at least {need} samples, got {got}")]
    TooFewSamples {
        op: &'static str,
        need: usize,
        got: usize,
    },

    #[error("mapping needs {downstream} downstream classes <= {pretrain} pretrain classes")]
    TooManyDownstreamClasses { downstream: usize, pretrain: usize },

    #[error("mapping target {target} out of range for {pretrain} pretrain classes")]
    MappingTargetOutOfRange { target: usize, pretrain: usize },

    #[error("mapping assignment is not injective: pretrain index {target} assigned twice")]
    MappingNotInjective { target: usize },

    #[error("domain split needs at least 2 distinct domains, found {found}")]
    TooFewDomains { found: usize },

    #[error("domain split: dataset has no per-image domain tags")]
    MissingDomainTags,

    #[error("domain split: no image carries held-out domain {domain:?}")]
    UnknownDomain { domain: String },

    #[error("shift magnitude {magnitude} outside [0, 1]")]
    BadMagnitude { magnitude: f32 },

    #[error("invalid dataset spec: {detail}")]
    BadDatasetSpec { detail: String },

    #[error("covariance matrix square root failed: eigenvalue {eigenvalue} below tolerance")]
    NotPositiveSemiDefinite { eigenvalue: f64 },

    #[error("correlation input {series} has zero variance")]
    ZeroVariance { series: &'static str },

    #[error("correlation needs series of equal length >= 3, got {x_len} and {y_len}")]
    BadSeries { x_len: usize, y_len: usize },

    #[error("{path}: bad magic: expected \"VPT1\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported dtype {dtype} (only 0 = f32)")]
    BadDtype { path: PathBuf, dtype: u8 },

    #[error("{path}: truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {field}: {detail}")]
    BadField {
        path: PathBuf,
        field: String,
        detail: String,
    },

    #[error("{path}: missing required field {field}")]
    MissingField { path: PathBuf, field: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for numeric failures (exit code 3); false for data/usage errors (exit code 2).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveSemiDefinite { .. } | Error::NonFinite { .. } | Error::ZeroNorm { .. }
        )
    }
}
