//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;

/// Everything that can go wrong in the compute core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Shapes disagree; the message names both shapes and the operation.
    Dimension(String),
    /// A scalar hyperparameter is out of its valid range.
    Parameter(String),
    /// An operation received an empty bag or empty axis it cannot handle.
    EmptyInput(&'static str),
    /// Model or dataset configuration is inconsistent.
    Config(String),
    /// A feature source does not match its declared spec; names the source id.
    Schema(String),
    /// Sources disagree on instance count or ordering.
    Alignment(String),
    /// Class label outside `[0, K)`.
    Label { label: usize, classes: usize },
    /// A non-finite value reached a boundary where finiteness is required.
    NonFinite(String),
    /// Autodiff graph misuse (second backward, non-scalar loss, ...).
    GraphState(&'static str),
    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    UndefinedMetric(&'static str),
    /// A stratified split cannot be formed (class too small).
    Stratification(String),
    /// Parameter lookup by unknown name or id.
    Lookup(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dimension(m) => write!(f, "dimension error: {m}"),
            CoreError::Parameter(m) => write!(f, "parameter error: {m}"),
            CoreError::EmptyInput(m) => write!(f, "empty input: {m}"),
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::Schema(m) => write!(f, "schema error: {m}"),
            CoreError::Alignment(m) => write!(f, "alignment error: {m}"),
            CoreError::Label { label, classes } => {
                write!(f, "label error: label {label} outside [0, {classes})")
            }
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::GraphState(m) => write!(f, "graph state error: {m}"),
            CoreError::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            CoreError::Stratification(m) => write!(f, "stratification error: {m}"),
            CoreError::Lookup(m) => write!(f, "lookup error: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}
