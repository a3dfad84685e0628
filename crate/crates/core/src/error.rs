use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {reason}")]
    InvalidDesign { reason: String },

    #[error("assignment space has {count} elements, above the cap of {cap}")]
    SpaceTooLarge { count: f64, cap: u64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, trace {trace:e})")]
    NotPsd { min_eigenvalue: f64, trace: f64 },

    #[error("matrix is singular (reciprocal condition {rcond:e}): {what}")]
    Singular { what: &'static str, rcond: f64 },

    #[error("chi-square probability underflow for k={k}, d={d}")]
    Underflow { k: usize, d: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rejection budget of {budget} proposals exhausted")]
    RejectionBudgetExceeded {
        budget: u64,
        best_distance: Option<f64>,
        best: Option<Box<crate::design::Assignment>>,
    },

    #[error("arm {arm} has no units")]
    EmptyArm { arm: usize },

    #[error("whole plot {plot} has a single subplot; such plots are left out of the analysis with --drop-degenerate")]
    DegenerateWholePlot { plot: String },

    #[error("factor-A arm {arm} has {count} whole plots; at least 2 are needed")]
    InsufficientArms { arm: usize, count: usize },

    #[error("design matrix is rank deficient: {0}")]
    RankDeficientDesignMatrix(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code for error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDesign { .. } => "InvalidDesign",
            Error::SpaceTooLarge { .. } => "SpaceTooLarge",
            Error::NotPsd { .. } => "NotPSD",
            Error::Singular { what, .. } => match *what {
                "sigma_xx" => "SingularSigmaXX",
                "sigma_vv" => "SingularSigmaVV",
                "perp" => "SingularPerp",
                _ => "Singular",
            },
            Error::Underflow { .. } => "Underflow",
            Error::Domain(_) => "DomainError",
            Error::RejectionBudgetExceeded { .. } => "RejectionBudgetExceeded",
            Error::EmptyArm { .. } => "EmptyArm",
            Error::DegenerateWholePlot { .. } => "DegenerateWholePlot",
            Error::InsufficientArms { .. } => "InsufficientArms",
            Error::RankDeficientDesignMatrix(_) => "RankDeficientDesignMatrix",
            Error::Dimension(_) => "DimensionMismatch",
            Error::Config(_) => "ConfigError",
            Error::Schema(_) => "SchemaError",
            Error::CountMismatch(_) => "CountMismatch",
            Error::Io { .. } => "IoError",
        }
    }

    /// Process exit code: 2 for configuration and input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPsd { .. }
            | Error::Singular { .. }
            | Error::Underflow { .. }
            | Error::RejectionBudgetExceeded { .. }
            | Error::RankDeficientDesignMatrix(_)
            | Error::EmptyArm { .. } => 3,
            _ => 2,
        }
    }

    /// Structured details for error JSON.
    pub fn context(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Error::InvalidDesign { reason } => json!({ "reason": reason }),
            Error::SpaceTooLarge { count, cap } => json!({ "count": count, "cap": cap }),
            Error::NotPsd { min_eigenvalue, trace } => json!({ "min_eigenvalue": min_eigenvalue, "trace": trace }),
            Error::Singular { what, rcond } => json!({ "matrix": what, "rcond": rcond }),
            Error::Underflow { k, d } => json!({ "k": k, "d": d }),
            Error::RejectionBudgetExceeded {
                budget,
                best_distance,
                best,
            } => json!({
                "budget": budget,
                "best_distance": best_distance,
                "best_assignment": best.as_ref().map(|a| json!({ "a": a.a_levels, "b": a.b_flat })),
            }),
            Error::EmptyArm { arm } => json!({ "arm": arm }),
            Error::DegenerateWholePlot { plot } => json!({ "whole_plot": plot }),
            Error::InsufficientArms { arm, count } => json!({ "arm": arm, "count": count }),
            Error::Io { path, .. } => json!({ "path": path }),
            _ => json!({}),
        }
    }

    pub fn invalid_design(reason: impl Into<String>) -> Self {
        Error::InvalidDesign { reason: reason.into() }
    }
}
