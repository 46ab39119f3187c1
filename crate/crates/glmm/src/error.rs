use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlmmError>;

#[derive(Debug, Error)]
pub enum GlmmError {
    #[error("design needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("probability {0} is outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("covariance is not positive semi-definite: {0}")]
    NotPositiveSemiDefinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("estimation did not converge: {0}")]
    NonConvergence(NonConvergenceReport),
}

/// Why both estimation routes gave up on a design.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NonConvergenceReport {
    pub design_hash: String,
    pub ml_failure: Option<String>,
    pub pql_failure: Option<String>,
}

impl std::fmt::Display for NonConvergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "design {}", &self.design_hash[..self.design_hash.len().min(12)])?;
        if let Some(ml) = &self.ml_failure {
            write!(f, "; ML: {ml}")?;
        }
        if let Some(pql) = &self.pql_failure {
            write!(f, "; PQL: {pql}")?;
        }
        Ok(())
    }
}
