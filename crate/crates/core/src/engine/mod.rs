//! Penalized maximum-likelihood fitting of distributional regression models.

mod bootstrap;
mod design;
mod effects;
mod fit;
mod model;
mod objective;
mod optim;
mod residuals;
mod select;
mod spec;


pub use bootstrap::{
    bootstrap_ci, percentile, replicate_seed, stratified_resample, BandPoint, BootstrapOptions,
    BootstrapResult, ReplicateFailure,
};
pub(crate) use design::Design;
pub use design::{Covariates, Encoding, Features, RowWarnings, PARAM_NAMES};
pub use effects::{deviation, study_effects, EffectUnit, StudyEffect};
pub use fit::{fit, fit_with, FitInternals, FitOptions};
pub use model::{ChartModel, FitReport, ParameterBlock, RandomEffects};
pub use objective::{negloglik, negloglik_grad};
pub use residuals::{ks_normal, normal_positions, quantile_residuals, QqSummary, Residuals};
pub use select::{select_fp, select_fp_with, BicEntry, SearchStage, SelectOptions, Selection};
pub use spec::{ModelSpec, Observation, Response, StudyEffectMode};
