use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("orbit radius {radius:e} below the 1e-6 guard")]
    SingularRadius { radius: f64 },

    #[error("Riccati divergence after {iterations} iterations")]
    RiccatiDivergence { iterations: usize },

    #[error(
        "feature matrix is rank deficient (rank {rank} < {features}); enable ridge regularization"
    )]
    RankDeficient { rank: usize, features: usize },

    #[error(
        "inner minimization failed on every start; best value {best_value:e} at u = {best_input:?}"
    )]
    InnerMinimizationFailed {
        best_value: f64,
        best_input: Vec<f64>,
    },

    #[error("approximator not positive on the domain (value {value:e} at {point:?})")]
    NotPositive { point: Vec<f64>, value: f64 },

    #[error(
        "gamma estimation unreliable: {excluded} of {total} rollouts left the inflated domain"
    )]
    GammaUnreliable { excluded: usize, total: usize },

    #[error("sublevel-set admissibility unverifiable: no epsilon candidate passes, failing witness {witness:?}")]
    EpsilonUnverifiable { witness: Vec<f64> },

    #[error("rho_gamma undefined: gamma = {gamma} must exceed 1")]
    GammaNotAboveOne { gamma: f64 },

    #[error("c_e + c_delta = {sum} violates the decrease hypothesis c_e + c_delta < 1")]
    ErrorBoundTooLarge { sum: f64 },

    #[error("c_V nonpositive: horizon {horizon} must exceed N_lower = {lower}")]
    CvNonpositive { horizon: usize, lower: i64 },

    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("closed-loop step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn at_step(step: usize, source: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}
