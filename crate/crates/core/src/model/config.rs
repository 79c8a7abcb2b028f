use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, AttentionMode};

/// How node embeddings are pooled into the graph-level input of `q_H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
    Max,
}

/// How counterfactual treatments are drawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CounterfactualMode {
    /// Uniform over the observed treatments other than the factual one.
    #[default]
    UniformOther,
    /// A random permutation of the batch's treatments.
    Permute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Dimension `d` of `Z_M`, `Z_H` and `Y_M`.
    pub latent_dim: usize,
    /// Dimension `d_G` of the node embeddings.
    pub graph_dim: usize,
    pub hidden_width: usize,
    /// Hidden layers in every dense stack; zero gives single affine maps.
    pub hidden_layers: usize,
    pub graph_hidden: usize,
    pub graph_layers: usize,
    pub activation: Activation,
    pub aggregation: Aggregation,
    pub attention: AttentionMode,
    pub self_loops: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            graph_dim: 16,
            hidden_width: 64,
            hidden_layers: 0,
            graph_hidden: 32,
            graph_layers: 2,
            activation: Activation::Relu,
            aggregation: Aggregation::Mean,
            attention: AttentionMode::KeyIndependent,
            self_loops: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("graph_dim", self.graph_dim),
            ("graph_layers", self.graph_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("model.hidden_width must be positive".into()));
        }
        if self.graph_layers > 1 && self.graph_hidden == 0 {
            return Err(Error::Config("model.graph_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation R̄² is computed every this many epochs.
    pub eval_every: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub counterfactual: CounterfactualMode,
    /// Draw `Y_M` by reparameterization during training (mean otherwise).
    pub sample_decoder: bool,
    pub variance_floor: f64,
    pub min_stratum_size: usize,
    pub control_label: String,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 0.1,
            learning_rate: 3e-3,
            batch_size: 32,
            max_epochs: 200,
            eval_every: 5,
            patience: 4,
            seed: 0,
            counterfactual: CounterfactualMode::UniformOther,
            sample_decoder: true,
            variance_floor: 1e-4,
            min_stratum_size: 3,
            control_label: "control".into(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Config(format!("training.{f} {why}")));
        if !(self.omega1 >= 0.0) || !(self.omega2 >= 0.0) {
            return bad("omega1/omega2", "must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        if !(self.variance_floor > 0.0) {
            return bad("variance_floor", "must be positive");
        }
        Ok(())
    }
}
