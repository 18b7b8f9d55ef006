use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("time argument must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("ill-posed resolvent: {0}")]
    IllPosedResolvent(String),

    #[error("insufficient control history: need coverage of [{needed_from}, {needed_to}], have [{have_from}, {have_to}]")]
    InsufficientHistory {
        needed_from: f64,
        needed_to: f64,
        have_from: f64,
        have_to: f64,
    },

    #[error("singular smoothing at t = {t}: covariance condition number {condition:.3e} exceeds 1e12")]
    SingularSmoothing { t: f64, condition: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("structure hypotheses fail (max residuals {regular:.3e} / {combined:.3e})")]
    StructureHypotheses { regular: f64, combined: f64 },

    #[error("B-gradient undefined at the terminal time for a non-differentiable terminal cost")]
    BoundaryDerivative,

    #[error("B-gradient magnitude {observed:.3e} exceeds the configured cap {cap:.3e} at tau = {tau}")]
    GradientCap { observed: f64, cap: f64, tau: f64 },

    #[error("divergence alarm: {0}")]
    Divergence(String),

    #[error("smoothing bound violated: |gradB| = {observed:.6e} > bound {bound:.6e}")]
    BoundViolation { observed: f64, bound: f64 },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("time-step alignment: {0}")]
    Alignment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration at `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("configuration parse error: {0}")]
    ConfigParse(String),

    #[error("Riccati solution blew up at t = {t}")]
    RiccatiBlowUp { t: f64 },

    #[error("oracle not applicable: {0}")]
    NotOracleCompatible(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
