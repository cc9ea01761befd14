use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report. Variant names are stable and are
/// what the CLI prints, so scripts can match on them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm input vector (norm {norm:e} below 1e-12)")]
    ZeroNormInput { norm: f64 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("schema violation{}: field `{field}`: {detail}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    SchemaViolation {
        line: Option<usize>,
        field: String,
        detail: String,
    },
    #[error("failed writing output: {0}")]
    SinkFailure(#[source] std::io::Error),
    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("invalid config: `{field}`: {detail}")]
    InvalidConfig { field: String, detail: String },
    #[error("sequence length {len} outside [1, {max}]")]
    SequenceTooLong { len: usize, max: usize },
    #[error("plan does not fit model: {0}")]
    PlanModelMismatch(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("layer {0} has no records for this domain")]
    MissingLayerCoverage(usize),
    #[error("domain `{0}` has no samples")]
    EmptyDomain(String),
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("layer sets differ between score tables")]
    LayerSetMismatch,

    #[error("subtask `{subtask}` missing at layer {layer}")]
    MissingSubtask { subtask: String, layer: usize },
    #[error("budget of {k} removals infeasible: only {supplied} satisfy the spacing constraints")]
    BudgetInfeasible { k: usize, supplied: usize },
    #[error("budget {k} exceeds {available} pruneable layers")]
    BudgetTooLarge { k: usize, available: usize },
    #[error("budget fraction {0} outside [0, 1]")]
    BudgetOutOfRange(f64),
    #[error("ranking does not cover the pruneable set: {0}")]
    RankingCoverageMismatch(String),

    #[error("models are not comparable: {0}")]
    ModelMismatch(String),
    #[error("plans disagree on depth: {0} vs {1}")]
    InconsistentDepth(usize, usize),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("method `random` requires a seed")]
    MissingSeed,
    #[error("no methods selected")]
    NoMethods,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Variant name, e.g. `"SchemaViolation"`.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ZeroNormInput { .. } => "ZeroNormInput",
            Error::EmptyInput(_) => "EmptyInput",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::SchemaViolation { .. } => "SchemaViolation",
            Error::SinkFailure(_) => "SinkFailure",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::PlanModelMismatch(_) => "PlanModelMismatch",
            Error::UnknownDomain(_) => "UnknownDomain",
            Error::MissingLayerCoverage(_) => "MissingLayerCoverage",
            Error::EmptyDomain(_) => "EmptyDomain",
            Error::AlphaOutOfRange(_) => "AlphaOutOfRange",
            Error::LayerSetMismatch => "LayerSetMismatch",
            Error::MissingSubtask { .. } => "MissingSubtask",
            Error::BudgetInfeasible { .. } => "BudgetInfeasible",
            Error::BudgetTooLarge { .. } => "BudgetTooLarge",
            Error::BudgetOutOfRange(_) => "BudgetOutOfRange",
            Error::RankingCoverageMismatch(_) => "RankingCoverageMismatch",
            Error::ModelMismatch(_) => "ModelMismatch",
            Error::InconsistentDepth(..) => "InconsistentDepth",
            Error::UnknownMethod(_) => "UnknownMethod",
            Error::MissingSeed => "MissingSeed",
            Error::NoMethods => "NoMethods",
            Error::Io(_) => "Io",
        }
    }

    /// True when the failure stems from bad user input (config, flags, files)
    /// rather than from the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::SchemaViolation { .. }
                | Error::InvalidConfig { .. }
                | Error::SequenceTooLong { .. }
                | Error::PlanModelMismatch(_)
                | Error::UnknownDomain(_)
                | Error::AlphaOutOfRange(_)
                | Error::BudgetTooLarge { .. }
                | Error::BudgetOutOfRange(_)
                | Error::UnknownMethod(_)
                | Error::MissingSeed
                | Error::NoMethods
                | Error::TruncatedFile(_)
        )
    }

    pub(crate) fn schema(line: Option<usize>, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::SchemaViolation {
            line,
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
