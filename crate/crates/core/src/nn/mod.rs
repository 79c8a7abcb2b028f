//! Differentiable building blocks.

pub mod checkpoint;
pub mod gaussian;
pub mod gradcheck;
pub mod layers;
pub mod mask;
pub mod params;
pub mod tape;

pub use gaussian::{gaussian_log_likelihood, kl_diag_gaussian, reparam_sample};
pub use layers::{
    dense_forward, gcn_forward, normalize_adjacency, Activation,
    AttentionHead, AttentionMode, DenseStack, DiagGaussianHead, GraphConvStack,
};
pub use mask::KeepMask;
pub use params::{Adam, Bound, ParamId, ParamSet};
pub use tape::{logistic, Gradients, Mat, Tape, Var};
