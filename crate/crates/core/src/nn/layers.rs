use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian::{LOGVAR_MAX, LOGVAR_MIN};
use super::params::{Bound, ParamId, ParamSet};
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Chain of affine layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStack {
    layers: Vec<DenseLayer>,
}

impl DenseStack {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last layer `output`.
    pub fn build<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "a dense stack needs at least one layer");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| DenseLayer {
                weight: params.add_weight(format!("{prefix}.{l}.weight"), w[0], w[1], rng),
                bias: params.add(format!("{prefix}.{l}.bias"), Array2::zeros((1, w[1]))),
                activation: if l == last { output } else { hidden },
                in_dim: w[0],
                out_dim: w[1],
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let (_, width) = tape.shape(x);
        if width != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "dense stack expects width {}, got {width}",
                self.input_dim()
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let z = tape.matmul(h, bound.var(layer.weight));
            let z = tape.add_row(z, bound.var(layer.bias));
            h = layer.activation.apply(tape, z);
        }
        Ok(h)
    }
}

/// Evaluates a dense stack on a plain input matrix.
pub fn dense_forward(stack: &DenseStack, params: &ParamSet, input: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(input.clone());
    let out = stack.forward(&mut tape, &bound, x)?;
    Ok(tape.value(out).clone())
}

/// Diagonal Gaussian head: one stack for the mean, one for the log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianHead {
    pub mean: DenseStack,
    pub logvar: DenseStack,
}

impl DiagGaussianHead {
    pub fn build<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            mean: DenseStack::build(params, &format!("{prefix}.mean"), dims, hidden, Activation::Identity, rng),
            logvar: DenseStack::build(params, &format!("{prefix}.logvar"), dims, hidden, Activation::Identity, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.output_dim()
    }

    /// Returns `(mean, logvar)`; the log-variance is clamped to `[-15, 15]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let mean = self.mean.forward(tape, bound, x)?;
        let lv = self.logvar.forward(tape, bound, x)?;
        Ok((mean, tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
    }
}

/// Row-normalizes `adjacency ∨ I` (or `adjacency` alone without self-loops)
/// so every nonzero row sums to one.
pub fn normalize_adjacency(adjacency: &Mat, self_loops: bool) -> Result<Mat> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "adjacency must be square, got {:?}",
            adjacency.dim()
        )));
    }
    let mut a = adjacency.mapv(|x| if x != 0.0 { 1.0 } else { 0.0 });
    if self_loops {
        for i in 0..n {
            a[[i, i]] = 1.0;
        }
    }
    for (i, mut row) in a.rows_mut().into_iter().enumerate() {
        let deg = row.sum();
        if deg == 0.0 {
            return Err(Error::InvalidInput(format!(
                "node {i} is isolated and self-loops are disabled"
            )));
        }
        row.mapv_inplace(|x| x / deg);
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConvLayer {
    pub weight: ParamId,
    pub activation: Activation,
}

/// Stack of `σ(Â H Θ)` layers over a fixed normalized adjacency `Â`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConvStack {
    layers: Vec<GraphConvLayer>,
    in_dim: usize,
    out_dim: usize,
}

impl GraphConvStack {
    pub fn build<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "a graph conv stack needs at least one layer");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| GraphConvLayer {
                weight: params.add_weight(format!("{prefix}.{l}.weight"), w[0], w[1], rng),
                activation: if l == last { output } else { hidden },
            })
            .collect();
        Self {
            layers,
            in_dim: dims[0],
            out_dim: *dims.last().unwrap(),
        }
    }

    pub fn layers(&self) -> &[GraphConvLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var, norm_adj: &Arc<Mat>) -> Result<Var> {
        let (n, v) = tape.shape(features);
        if v != self.in_dim || norm_adj.dim() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "graph conv expects {}-wide features on an n×n adjacency; got features {n}×{v}, adjacency {:?}",
                self.in_dim,
                norm_adj.dim()
            )));
        }
        let mut h = features;
        for layer in &self.layers {
            let agg = tape.const_left_mul(Arc::clone(norm_adj), h);
            let z = tape.matmul(agg, bound.var(layer.weight));
            h = layer.activation.apply(tape, z);
        }
        Ok(h)
    }
}

/// Evaluates a graph conv stack: self-loops are added, the adjacency is
/// row-mean normalized, then every layer applies `σ(Â H Θ)`.
pub fn gcn_forward(
    stack: &GraphConvStack,
    params: &ParamSet,
    node_features: &Mat,
    adjacency: &Mat,
    self_loops: bool,
) -> Result<Mat> {
    let norm = Arc::new(normalize_adjacency(adjacency, self_loops)?);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(node_features.clone());
    let out = stack.forward(&mut tape, &bound, x, &norm)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    #[default]
    KeyDependent,
    KeyIndependent,
}

/// Decoding aggregator: per-gene attention over the latent feature dimensions.
///
/// The score logits for node `i` and value vector `y` are
/// `z_i · W_q + b (+ y · W_k in key-dependent mode)`, softmax-normalized over
/// the `d` feature dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub bias: ParamId,
    pub mode: AttentionMode,
}

impl AttentionHead {
    pub fn build<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        query_dim: usize,
        value_dim: usize,
        mode: AttentionMode,
        rng: &mut R,
    ) -> Self {
        Self {
            w_query: params.add_weight(format!("{prefix}.query"), query_dim, value_dim, rng),
            w_key: params.add_weight(format!("{prefix}.key"), value_dim, value_dim, rng),
            bias: params.add(format!("{prefix}.bias"), Array2::zeros((1, value_dim))),
            mode,
        }
    }

    /// `node_emb`: `n × d_G`; `values`: `b × d`. Returns `b × n`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, node_emb: Var, values: Var) -> Var {
        let q = tape.matmul(node_emb, bound.var(self.w_query));
        let q = tape.add_row(q, bound.var(self.bias));
        let key = match self.mode {
            AttentionMode::KeyDependent => Some(tape.matmul(values, bound.var(self.w_key))),
            AttentionMode::KeyIndependent => None,
        };
        tape.attention(q, key, values)
    }

    /// Score vector for one query embedding and one key vector.
    pub fn scores(&self, params: &ParamSet, query: ArrayView1<f64>, key: ArrayView1<f64>) -> Array1<f64> {
        let mut logits = query.dot(params.get(self.w_query)) + params.get(self.bias).row(0);
        if self.mode == AttentionMode::KeyDependent {
            logits = logits + key.dot(params.get(self.w_key));
        }
        softmax(logits.view())
    }
}

pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let z = e.sum();
    e / z
}
