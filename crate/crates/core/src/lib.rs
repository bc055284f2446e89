//! Cloud-edge low-rank adapter toolkit: structured pruning of a backbone,
//! adapter training on the pruned model, zero-pad recovery to full
//! dimensions, direction-wise conflict resolution across adapters, and fusion
//! back into the cloud model. A deterministic simulator exercises the whole
//! pipeline on synthetic multi-domain regression tasks.

pub mod backbone;
pub mod cli;
pub mod conflict;
pub mod error;
pub mod fusion;
pub mod io;
pub mod lora;
pub mod matrix;
pub mod pruning;
pub mod recovery;
mod rng;
pub mod sim;

pub use backbone::{Backbone, Batch, Layer, Topology};
pub use conflict::{
    analyze, conflict_scores, deconflict, mean_conflict, project, shared_subspace, ConflictReport,
    DeconflictedAdapterSet, DirectionReport, SharedSubspace,
};
pub use error::{Error, Result};
pub use fusion::{apply_fusion, fedavg, fedavg_factors, fedsa_fuse, ffa_fuse, FusionMethod};
pub use lora::{init_adapter, materialize, LoraAdapter};
pub use matrix::{cosine, matmul, svd_thin, DenseMatrix, SvdResult};
pub use pruning::{
    apply_prune, group_importance, pruning_ratio, select_groups, GroupImportance, LayerPrune, PruneMap,
};
pub use recovery::{recover, RecoveredAdapter};
pub use sim::{run_pipeline, RunReport};
