//! The graph-structured variational counterfactual model.

mod config;
mod eval;
mod network;
mod train;

pub use config::{Aggregation, CounterfactualMode, ModelConfig, TrainingConfig};
pub use eval::{
    evaluate_r2, group_predictions, predict_cells, r2_report, reconstruction_r2, EncodedData, GroupPrediction, GroupR2,
    R2Report,
};
pub use network::{
    one_hot, Batch, CounterfactualPass, Decoded, ForwardNoise, GraphInput, GraphVciModel, LatentState, ModelDims,
    ObjectiveTerms,
};
pub use train::{make_batch, metrics_csv, sample_counterfactual_treatment, train, EpochMetrics, TrainOutcome, METRICS_HEADER};
