use alloc::string::String;

use crate::model::{ModelKind, ValidationReport};

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(ValidationReport),

    #[error("model/policy kind mismatch: expected {expected:?}, got {got:?}")]
    KindMismatch { expected: ModelKind, got: ModelKind },

    #[error("step {t} out of range for horizon {horizon}")]
    StepOutOfRange { t: usize, horizon: usize },

    #[error("enumeration budget exceeded: needs about {required} terms, budget {budget}")]
    BudgetExceeded { required: u128, budget: u64 },

    #[error("singular matrix {descriptor} (condition number {condition:.3e})")]
    SingularMatrix { descriptor: String, condition: f64 },

    #[error("empty dataset")]
    EmptyData,

    #[error("descriptor out of range: {0}")]
    DescriptorOutOfRange(String),

    #[error("all records were excluded by the context count threshold")]
    AllRecordsExcluded,

    #[error("no model accepted after {tries} tries (best condition number {best_condition:.3e})")]
    MaxTriesExceeded { tries: u32, best_condition: f64 },

    #[error("sample count must be positive")]
    ZeroSamples,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("realized action has zero behavior probability at step {step}; inputs mismatched")]
    ZeroProbabilityAction { step: usize },

    #[error("invalid index sets: {0}")]
    InvalidIndexSets(String),
}
