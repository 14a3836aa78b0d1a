use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("no wave train exists at wavenumber q = {q} (needs q^2 < kappa = {kappa})")]
    NoWaveTrain { q: f64, kappa: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("degenerate family: {0}")]
    DegenerateFamily(String),

    #[error("eigensolver failed at xi = {xi}")]
    Eigensolver { xi: f64 },

    #[error("critical eigenvalue at xi = {xi} is within {gap:e} of another eigenvalue")]
    NearDegeneracy { xi: f64, gap: f64 },

    #[error("ill-conditioned critical expansion: fit residual {residual:e} exceeds {threshold:e}")]
    IllConditionedExpansion { residual: f64, threshold: f64 },

    #[error("kernel quadrature not resolved: doubling the xi nodes changed the result by {rel_change:e}")]
    QuadratureResolution { rel_change: f64 },

    #[error("Bloch and direct linear evolutions disagree: relative discrepancy {discrepancy:e} at t = {t}")]
    Inconsistency { discrepancy: f64, t: f64 },

    #[error("rejected configuration: {0}")]
    RejectedConfig(String),

    #[error("solution diverged at t = {t}: sup norm grew by a factor {ratio}")]
    Divergence { t: f64, ratio: f64 },

    #[error("ambiguous phase near x = {x}: two local minima within 10% misfit")]
    AmbiguousPhase { x: f64 },

    #[error("modulation ansatz broke down: max |psi_x| = {max_psi_x}")]
    AnsatzBreakdown { max_psi_x: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
