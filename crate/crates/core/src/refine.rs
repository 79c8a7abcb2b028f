//! Graph refinement: a GCN with a dense matrix of learnable edge logits `L`,
//! trained on node-level expression prediction under asymmetric edge dropout.
//! After training, `W̃ = logistic(L)` is thresholded into a new adjacency.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionDataset, RelationGraph, SplitAssignment, SplitTag};
use crate::error::{Error, Result};
use crate::nn::gradcheck::{check_params, GradCheckReport};
use crate::nn::{logistic, Activation, Adam, KeepMask, Mat, ParamId, ParamSet, Tape, Var};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    /// Dropout rate of prior edges.
    pub r_l: f64,
    /// Dropout rate of non-edges.
    pub r_h: f64,
    /// Lasso weight on `W̃`.
    pub omega: f64,
    /// Extra lasso weight on the diagonal of `W̃` (0 disables it).
    pub diagonal_penalty: f64,
    /// Exempt the diagonal from dropout. Otherwise self-relations drop at
    /// rate `r_l` like prior edges, and only rows left empty keep theirs.
    pub keep_diagonal: bool,
    /// Initial logit of entries in `Ẽ`.
    pub init_logit_edge: f64,
    /// Initial logit of entries outside `Ẽ`.
    pub init_logit_non_edge: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    /// Keep only the `k` largest weights in `edge_weights.tsv`; all when unset.
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            r_l: 0.1,
            r_h: 0.9,
            omega: 0.01,
            diagonal_penalty: 0.0,
            keep_diagonal: true,
            init_logit_edge: 1.0,
            init_logit_non_edge: -2.0,
            alpha: 0.3,
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 64,
            layers: 2,
            hidden_width: 64,
            activation: Activation::Relu,
            top_k: None,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Config(format!("refinement.{f} {why}")));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.r_l) || !prob(self.r_h) {
            return bad("r_l/r_h", "must lie in [0, 1]");
        }
        if self.r_l >= self.r_h {
            return bad("r_l", "must be smaller than r_h");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if !(self.omega >= 0.0) || !(self.diagonal_penalty >= 0.0) {
            return bad("omega", "must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 || self.layers == 0 {
            return bad("batch_size/layers", "must be positive");
        }
        if self.layers > 1 && self.hidden_width == 0 {
            return bad("hidden_width", "must be positive");
        }
        Ok(())
    }
}

/// `Ẽ`: the prior adjacency with every diagonal entry set to one.
pub fn prior_with_self_loops(adjacency: &Mat) -> Mat {
    let mut e = adjacency.mapv(|a| if a != 0.0 { 1.0 } else { 0.0 });
    e.diag_mut().fill(1.0);
    e
}

/// Keeps entry `(i, j)` with probability `1 − r_l` when `Ẽ[i, j] = 1` and
/// `1 − r_h` otherwise. The diagonal is always kept.
pub fn sample_keep_mask(prior: &Mat, r_l: f64, r_h: f64, rng: &mut Rng) -> KeepMask {
    sample_mask(prior, r_l, r_h, true, rng)
}

/// As [`sample_keep_mask`]; with `keep_diagonal` off the diagonal drops at
/// rate `r_l` unless its row would be left empty.
pub fn sample_mask(prior: &Mat, r_l: f64, r_h: f64, keep_diagonal: bool, rng: &mut Rng) -> KeepMask {
    let n = prior.nrows();
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<usize> = (0..n)
                .filter(|&j| {
                    if i == j && keep_diagonal {
                        return true;
                    }
                    let drop = if i == j || prior[[i, j]] != 0.0 { r_l } else { r_h };
                    rng.random::<f64>() >= drop
                })
                .collect();
            if row.is_empty() {
                row.push(i);
            }
            row
        })
        .collect();
    KeepMask::from_rows(n, rows)
}

/// One layer `σ(softmax_r(M ⊙ L) H Θ)`, masked entries excluded from the
/// row softmax.
pub fn masked_softmax_conv(h: &Mat, logits: &Mat, mask: &KeepMask, theta: &Mat, activation: Activation) -> Mat {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let lv = tape.leaf(logits.clone());
    let tv = tape.leaf(theta.clone());
    let agg = tape.masked_softmax_agg(lv, Arc::new(mask.clone()), hv);
    let z = tape.matmul(agg, tv);
    let out = activation.apply(&mut tape, z);
    tape.value(out).clone()
}

/// Node inputs for one cell: row `i` is `[y_i, features row i, x]`.
pub fn build_node_inputs(y: ArrayView1<f64>, features: &Mat, x: ArrayView1<f64>) -> Result<Mat> {
    let n = y.len();
    if features.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} expression values but {} feature rows",
            features.nrows()
        )));
    }
    let v = features.ncols();
    let mut o = Mat::zeros((n, 1 + v + x.len()));
    o.column_mut(0).assign(&y);
    o.slice_mut(s![.., 1..1 + v]).assign(features);
    for mut row in o.rows_mut() {
        row.slice_mut(s![1 + v..]).assign(&x);
    }
    Ok(o)
}

/// `W̃ = (1 + exp(L)^{-1})^{-1}`, i.e. the logistic function of `L`.
pub fn rescale_weights(logits: &Mat) -> Mat {
    logits.mapv(logistic)
}

/// `Ê[i, j] = 1` iff `W̃[i, j] > α`.
pub fn threshold_graph(weights: &Mat, alpha: f64) -> Mat {
    weights.mapv(|w| if w > alpha { 1.0 } else { 0.0 })
}

/// Loss minimized by refinement: squared error per cell summed over genes and
/// averaged over cells, plus `ω` times the mean entry of `W̃`.
/// `output` and `target` are `cells × genes`.
pub fn refinement_objective(output: &Mat, target: &Mat, weights: &Mat, omega: f64) -> f64 {
    let cells = output.nrows().max(1) as f64;
    let sq: f64 = (output - target).mapv(|d| d * d).sum();
    sq / cells + omega * weights.mean().unwrap_or(0.0)
}

/// Trainable state: the logits and the per-layer weights.
#[derive(Clone, Debug)]
pub struct RefinementState {
    params: ParamSet,
    logits: ParamId,
    thetas: Vec<ParamId>,
    activation: Activation,
    prior: Mat,
}

impl RefinementState {
    pub fn new(prior_adjacency: &Mat, input_dim: usize, cfg: &RefinementConfig, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let prior = prior_with_self_loops(prior_adjacency);
        let init = prior.mapv(|e| if e != 0.0 { cfg.init_logit_edge } else { cfg.init_logit_non_edge });
        let logits = params.add("refine.logits", init);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(cfg.hidden_width, cfg.layers - 1));
        dims.push(1);
        let thetas = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| params.add_weight(format!("refine.theta.{l}"), w[0], w[1], rng))
            .collect();
        Self {
            params,
            logits,
            thetas,
            activation: cfg.activation,
            prior,
        }
    }

    pub fn logits(&self) -> &Mat {
        self.params.get(self.logits)
    }

    pub fn prior(&self) -> &Mat {
        &self.prior
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn weights(&self) -> Mat {
        rescale_weights(self.logits())
    }

    /// Builds `g(O)` on the tape for stacked node inputs (`cells·n` rows).
    fn tape_forward(&self, tape: &mut Tape, bound: &crate::nn::Bound, inputs: Var, mask: &Arc<KeepMask>) -> Var {
        let l = bound.var(self.logits);
        let mut h = inputs;
        let last = self.thetas.len() - 1;
        for (k, &theta) in self.thetas.iter().enumerate() {
            let agg = tape.masked_softmax_agg(l, Arc::clone(mask), h);
            let z = tape.matmul(agg, bound.var(theta));
            h = if k == last { z } else { self.activation.apply(tape, z) };
        }
        h
    }

    /// Network output for stacked inputs under `mask`, reshaped to `cells × n`.
    pub fn forward(&self, inputs: &Mat, mask: &KeepMask) -> Mat {
        let n = self.prior.nrows();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(inputs.clone());
        let out = self.tape_forward(&mut tape, &bound, x, &Arc::new(mask.clone()));
        let v = tape.value(out);
        Array2::from_shape_vec((v.nrows() / n, n), v.iter().copied().collect()).expect("stacked output")
    }

    /// Objective and gradients for stacked inputs with `targets` of shape
    /// `cells·n × 1`.
    pub fn loss_with_grads(
        &self,
        inputs: &Mat,
        targets: &Mat,
        mask: &Arc<KeepMask>,
        omega: f64,
        diagonal_penalty: f64,
    ) -> (f64, Vec<Mat>) {
        let n = self.prior.nrows() as f64;
        let cells = inputs.nrows() as f64 / n;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(inputs.clone());
        let y = tape.leaf(targets.clone());
        let out = self.tape_forward(&mut tape, &bound, x, mask);
        let r = tape.sub(out, y);
        let sq = tape.mul(r, r);
        let sq = tape.sum(sq);
        let mut loss = tape.scale(sq, 1.0 / cells);
        let w = tape.sigmoid(bound.var(self.logits));
        if omega > 0.0 {
            let l1 = tape.sum(w);
            let l1 = tape.scale(l1, omega / (n * n));
            loss = tape.add(loss, l1);
        }
        if diagonal_penalty > 0.0 {
            let eye = tape.leaf(Mat::eye(self.prior.nrows()));
            let d = tape.mul(w, eye);
            let d = tape.sum(d);
            let d = tape.scale(d, diagonal_penalty / n);
            loss = tape.add(loss, d);
        }
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss);
        (value, self.params.collect_grads(&bound, &mut grads))
    }

    /// Central-difference check of [`Self::loss_with_grads`] over every parameter.
    pub fn objective_gradcheck(
        &self,
        inputs: &Mat,
        targets: &Mat,
        mask: &Arc<KeepMask>,
        omega: f64,
        diagonal_penalty: f64,
        step: f64,
    ) -> GradCheckReport {
        let (_, analytic) = self.loss_with_grads(inputs, targets, mask, omega, diagonal_penalty);
        let mut probe = self.clone();
        check_params(&self.params, &analytic, step, |p| {
            probe.params = p.clone();
            probe.loss_with_grads(inputs, targets, mask, omega, diagonal_penalty).0
        })
    }
}

/// Per-gene standardization of expression and stacked node inputs.
struct NodeData {
    z: Mat,
    x: Mat,
    features: Mat,
}

impl NodeData {
    fn new(ds: &ExpressionDataset, features: &Mat, fit_cells: &[usize]) -> Self {
        let y = ds.outcomes();
        let sub = y.select(Axis(0), fit_cells);
        let mean = sub.mean_axis(Axis(0)).expect("nonempty fit cells");
        let sd = sub.std_axis(Axis(0), 0.0).mapv(|s| 1.0 / s.max(1e-6));
        let z = (y - &mean) * &sd;
        Self {
            z,
            x: ds.encode_covariates(),
            features: features.clone(),
        }
    }

    fn stacked(&self, cells: &[usize]) -> (Mat, Mat) {
        let n = self.z.ncols();
        let width = 1 + self.features.ncols() + self.x.ncols();
        let mut inputs = Mat::zeros((cells.len() * n, width));
        let mut targets = Mat::zeros((cells.len() * n, 1));
        for (k, &c) in cells.iter().enumerate() {
            let o = build_node_inputs(self.z.row(c), &self.features, self.x.row(c)).expect("consistent dims");
            inputs.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&o);
            targets.slice_mut(s![k * n..(k + 1) * n, 0]).assign(&self.z.row(c));
        }
        (inputs, targets)
    }
}

#[derive(Clone, Debug)]
pub struct RefinementResult {
    /// `Ê` without self-relations.
    pub graph: RelationGraph,
    /// Dense `W̃`.
    pub weights: Mat,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Trains the refinement network on the train split and thresholds `W̃`.
pub fn refine(
    ds: &ExpressionDataset,
    graph: &RelationGraph,
    split: &SplitAssignment,
    cfg: &RefinementConfig,
) -> Result<RefinementResult> {
    cfg.validate()?;
    graph.check_genes(ds.gene_names())?;
    let cells = split.cells(SplitTag::Train);
    if cells.is_empty() {
        return Err(Error::InvalidInput("the train split is empty".into()));
    }
    let data = NodeData::new(ds, graph.node_features(), &cells);
    let input_dim = 1 + graph.node_features().ncols() + ds.covariate_dim();
    let mut state = RefinementState::new(graph.adjacency(), input_dim, cfg, &mut rng::derived_rng(cfg.seed, "refine/init"));
    let mut shuffle_rng = rng::derived_rng(cfg.seed, "refine/shuffle");
    let mut mask_rng = rng::derived_rng(cfg.seed, "refine/mask");
    let mut adam = Adam::new(state.params(), cfg.learning_rate);
    let mut order = cells;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mask = Arc::new(sample_mask(state.prior(), cfg.r_l, cfg.r_h, cfg.keep_diagonal, &mut mask_rng));
            let (inputs, targets) = data.stacked(chunk);
            let (loss, grads) = state.loss_with_grads(&inputs, &targets, &mask, cfg.omega, cfg.diagonal_penalty);
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence(format!("refinement loss became non-finite at epoch {epoch}")));
            }
            adam.step(state.params_mut(), &grads);
            total += loss * chunk.len() as f64;
        }
        let mean = total / order.len() as f64;
        log::debug!("refinement epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }

    let weights = state.weights();
    let mut adjacency = threshold_graph(&weights, cfg.alpha);
    adjacency.diag_mut().fill(0.0);
    Ok(RefinementResult {
        graph: graph.with_adjacency(adjacency)?,
        weights,
        history,
    })
}

/// `source target weight` rows of `W̃` off the diagonal, largest first;
/// truncated to `top_k` rows when given.
pub fn edge_weights_tsv(weights: &Mat, genes: &[String], top_k: Option<usize>) -> String {
    let mut rows: Vec<(usize, usize, f64)> = weights
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|((i, j), &w)| (i, j, w))
        .collect();
    rows.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    if let Some(k) = top_k {
        rows.truncate(k);
    }
    let mut out = String::from("source\ttarget\tweight\n");
    for (i, j, w) in rows {
        out.push_str(&format!("{}\t{}\t{w}\n", genes[i], genes[j]));
    }
    out
}
