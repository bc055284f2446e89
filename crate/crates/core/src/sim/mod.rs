//! Deterministic cloud-edge simulation over synthetic regression domains.

pub mod domains;
pub mod eval;
pub mod pipeline;
pub mod train;

pub use domains::{effective_map, gen_domains, CrossDomainTask, Scenario, SyntheticDomain};
pub use eval::{evaluate, score_model, ModelScores, PairScore};
pub use pipeline::{run_pipeline, run_pipeline_detailed, PipelineRun, RunReport};
pub use train::{loss_and_gradients, local_train, FactorGradients, TrainConfig, TrainOutcome};
