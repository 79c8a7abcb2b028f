//! Dataset ingestion, encoding, splitting and per-stratum statistics.

mod dataset;
mod graph;
pub mod io;
mod split;
mod stats;

pub use dataset::{ExpressionDataset, Levels};
pub use graph::RelationGraph;
pub use io::{load_dataset, load_graph};
pub use split::{
    most_distant_treatments, select_ood, split_train_val, treatment_distances, SplitAssignment, SplitTag,
};
pub use stats::{
    de_scores, fit_stratum_gaussians, pseudobulk, pseudobulk_cells, select_de_genes, StratumFits,
    StratumGaussian,
};
