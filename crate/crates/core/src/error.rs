//! Crate-wide error type.

use crate::store::StoreKey;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("{what} ({value}) must be divisible by {by}")]
    Divisibility {
        what: &'static str,
        value: usize,
        by: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("layout mismatch: expected {expected:?}, got {got:?}")]
    LayoutMismatch {
        expected: crate::tensor::Layout,
        got: crate::tensor::Layout,
    },

    #[error("store: duplicate key {0}")]
    DuplicateKey(StoreKey),

    #[error("store: key {0} not resident")]
    MissingKey(StoreKey),

    #[error("store: key {0} already checked out")]
    AlreadyCheckedOut(StoreKey),

    #[error("store: key {0} not checked out")]
    NotCheckedOut(StoreKey),

    #[error("store capacity exceeded: {needed} bytes needed, {available} available")]
    CapacityExceeded { needed: u64, available: u64 },

    #[error("label {label} out of vocab range {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },

    #[error("hbm budget {budget} bytes cannot hold model state of {model_state} bytes")]
    ModelDoesNotFit { budget: u64, model_state: u64 },

    #[error("inconsistent plan: {0}")]
    InvalidPlan(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
