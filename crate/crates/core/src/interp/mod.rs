//! Background/motion decomposition, token interactions and empirical checks
//! of the Taylor and drift bounds.

pub mod background;
pub mod drift;
pub mod harsanyi;
pub mod probe;
pub mod taylor;

pub use background::{fit_background, motion_residual, BackgroundFit, BackgroundModel, BackgroundTracker, Decomposition};
pub use drift::{drift_bound_check, DriftReport, DriftSetting};
pub use harsanyi::{cache_trigger, harsanyi, shapley_singletons, InteractionReport, BRUTE_FORCE_CAP};
pub use probe::{AnalyticProbe, ExpProbe, PolynomialProbe, ProbeFunction};
pub use taylor::{first_order_equivalence, taylor_residual_check, SlopeReport, TaylorReport};

#[derive(Debug, thiserror::Error)]
pub enum InterpError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("need at least {needed} history frames, got {got}")]
    History { needed: usize, got: usize },
    #[error("brute-force interactions are capped at {cap} tokens, got {n}")]
    TooManyTokens { n: usize, cap: usize },
    #[error("probe has no known Lipschitz constant")]
    MissingLipschitz,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, InterpError>;
