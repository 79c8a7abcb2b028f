use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::config::{Aggregation, ModelConfig};
use crate::data::RelationGraph;
use crate::error::{Error, Result};
use crate::nn::gaussian::{LOGVAR_MAX, LOGVAR_MIN};
use crate::nn::gradcheck::{numeric_grad, relative_error, GradCheckReport};
use crate::nn::{
    checkpoint, normalize_adjacency, Activation, AttentionHead, Bound, DenseStack, DiagGaussianHead, GraphConvStack,
    Mat, ParamId, ParamSet, Tape, Var,
};
use crate::rng;

/// Sizes fixed by the data: genes `n`, covariate width `m`, treatments `r`,
/// node feature width `v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub genes: usize,
    pub covariates: usize,
    pub treatments: usize,
    pub node_features: usize,
}

/// A relation graph prepared for the model: node features and the
/// normalized adjacency.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub features: Mat,
    pub norm_adj: Arc<Mat>,
}

impl GraphInput {
    pub fn new(graph: &RelationGraph, self_loops: bool) -> Result<Self> {
        Ok(Self {
            features: graph.node_features().clone(),
            norm_adj: Arc::new(normalize_adjacency(graph.adjacency(), self_loops)?),
        })
    }
}

/// Encoder output for a batch of cells.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// Node embeddings, `n × d_G`, shared by every cell.
    pub z_g: Mat,
    pub mean: Mat,
    pub logvar: Mat,
    /// Reparameterized draw (the mean when noise is off).
    pub sample: Mat,
}

impl LatentState {
    pub fn variance(&self) -> Mat {
        self.logvar.mapv(f64::exp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Per-cell output means, `b × n`.
    pub mean: Mat,
    /// Per-gene output log-variance.
    pub logvar: Array1<f64>,
    pub y_m: Mat,
}

/// Standard normal draws used by one training forward pass. Zero noise gives
/// the deterministic evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardNoise {
    pub z: Mat,
    pub y_m: Option<Mat>,
    pub y_m_cf: Option<Mat>,
}

impl ForwardNoise {
    pub fn zeros(batch: usize, d: usize) -> Self {
        Self {
            z: Mat::zeros((batch, d)),
            y_m: None,
            y_m_cf: None,
        }
    }
}

/// One training batch: factual inputs, counterfactual treatments, and the
/// stratum Gaussian each counterfactual is scored against.
#[derive(Clone, Debug)]
pub struct Batch {
    pub y: Mat,
    pub x: Mat,
    pub t: Mat,
    pub t_cf: Mat,
    pub stratum_mean: Mat,
    pub stratum_logvar: Mat,
}

/// Batch-mean loss terms; `total = recon_nll + ω1·dist_loss + ω2·kl`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub recon_nll: f64,
    pub dist_loss: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct CounterfactualPass {
    pub latent: LatentState,
    pub y_cf: Mat,
    pub cf_latent: LatentState,
}

#[derive(Clone, Debug)]
pub struct GraphVciModel {
    config: ModelConfig,
    dims: ModelDims,
    params: ParamSet,
    f_m: DenseStack,
    f_g: GraphConvStack,
    q_h: DiagGaussianHead,
    p_m: DiagGaussianHead,
    f_h: AttentionHead,
    output_logvar: ParamId,
    /// Fixed per-gene standardization of the encoder's expression input.
    input_shift: ParamId,
    input_scale: ParamId,
}

struct TapeEncoding {
    mean: Var,
    logvar: Var,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    dims: ModelDims,
}

impl GraphVciModel {
    pub fn new(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.genes == 0 || dims.treatments == 0 || dims.node_features == 0 {
            return Err(Error::Config("model needs genes, treatments and node features".into()));
        }
        let mut r = rng::derived_rng(seed, "model/init");
        let mut params = ParamSet::new();
        let d = config.latent_dim;
        let hidden = vec![config.hidden_width; config.hidden_layers];
        let chain = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend(&hidden);
            v.push(output);
            v
        };
        let act = config.activation;
        let f_m = DenseStack::build(
            &mut params,
            "encoder.f_m",
            &chain(dims.genes + dims.covariates + dims.treatments, d),
            act,
            Activation::Identity,
            &mut r,
        );
        let mut g_dims = vec![dims.node_features];
        g_dims.extend(vec![config.graph_hidden; config.graph_layers - 1]);
        g_dims.push(config.graph_dim);
        let f_g = GraphConvStack::build(&mut params, "encoder.f_g", &g_dims, act, Activation::Identity, &mut r);
        let q_h = DiagGaussianHead::build(&mut params, "encoder.q_h", &chain(d + config.graph_dim, d), act, &mut r);
        let p_m = DiagGaussianHead::build(&mut params, "decoder.p_m", &chain(d + dims.treatments, d), act, &mut r);
        let f_h = AttentionHead::build(&mut params, "decoder.f_h", config.graph_dim, d, config.attention, &mut r);
        let output_logvar = params.add("decoder.output_logvar", Array2::zeros((1, dims.genes)));
        let input_shift = params.add("encoder.input_shift", Array2::zeros((1, dims.genes)));
        let input_scale = params.add("encoder.input_scale", Array2::ones((1, dims.genes)));
        // log-variance heads start at unit variance
        for head in [&q_h, &p_m] {
            let last = head.logvar.layers().last().expect("nonempty stack").weight;
            params.get_mut(last).fill(0.0);
        }
        Ok(Self {
            config,
            dims,
            params,
            f_m,
            f_g,
            q_h,
            p_m,
            f_h,
            output_logvar,
            input_shift,
            input_scale,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Sets a named parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Mat) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name:?}")))?;
        if self.params.get(id).dim() != value.dim() {
            return Err(Error::DimensionMismatch(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params.get(id).dim(),
                value.dim()
            )));
        }
        *self.params.get_mut(id) = value;
        Ok(())
    }

    /// Standardizes the encoder's expression input with per-gene means and
    /// standard deviations of `y`. These values are stored with the model and
    /// never trained.
    pub fn fit_input_normalizer(&mut self, y: &Mat) -> Result<()> {
        if y.ncols() != self.dims.genes || y.nrows() == 0 {
            return Err(Error::DimensionMismatch("normalizer needs a nonempty cells × genes matrix".into()));
        }
        let mean = y.mean_axis(ndarray::Axis(0)).expect("nonempty");
        let sd = y.std_axis(ndarray::Axis(0), 0.0);
        *self.params.get_mut(self.input_shift) = mean.insert_axis(ndarray::Axis(0));
        *self.params.get_mut(self.input_scale) = sd.mapv(|s| 1.0 / s.max(1e-6)).insert_axis(ndarray::Axis(0));
        Ok(())
    }

    pub fn graph_input(&self, graph: &RelationGraph) -> Result<GraphInput> {
        if graph.n_nodes() != self.dims.genes || graph.node_features().ncols() != self.dims.node_features {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} nodes with {} features, graph has {} with {}",
                self.dims.genes,
                self.dims.node_features,
                graph.n_nodes(),
                graph.node_features().ncols()
            )));
        }
        GraphInput::new(graph, self.config.self_loops)
    }

    fn check_inputs(&self, y: &Mat, x: &Mat, t: &Mat) -> Result<()> {
        let b = y.nrows();
        let ok = y.ncols() == self.dims.genes
            && x.dim() == (b, self.dims.covariates)
            && t.dim() == (b, self.dims.treatments);
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "inputs Y {:?}, X {:?}, T {:?} do not fit n={}, m={}, r={}",
                y.dim(),
                x.dim(),
                t.dim(),
                self.dims.genes,
                self.dims.covariates,
                self.dims.treatments
            )));
        }
        Ok(())
    }

    fn tape_graph(&self, tape: &mut Tape, bound: &Bound, graph: &GraphInput) -> Result<(Var, Var)> {
        let feats = tape.leaf(graph.features.clone());
        let z_g = self.f_g.forward(tape, bound, feats, &graph.norm_adj)?;
        let pooled = match self.config.aggregation {
            Aggregation::Mean => tape.mean_rows(z_g),
            Aggregation::Sum => tape.sum_rows(z_g),
            Aggregation::Max => tape.max_rows(z_g),
        };
        Ok((z_g, pooled))
    }

    fn tape_encode(&self, tape: &mut Tape, bound: &Bound, pooled: Var, y: Var, x: Var, t: Var) -> Result<TapeEncoding> {
        let rows = tape.shape(y).0;
        let shift = tape.leaf(-self.params.get(self.input_shift));
        let scale = tape.leaf(self.params.get(self.input_scale).clone());
        let scale = tape.broadcast_rows(scale, rows);
        let centered = tape.add_row(y, shift);
        let y_std = tape.mul(centered, scale);
        let input = tape.concat_cols(&[y_std, x, t]);
        let z_m = self.f_m.forward(tape, bound, input)?;
        let g = tape.broadcast_rows(pooled, rows);
        let h = tape.concat_cols(&[z_m, g]);
        let (mean, logvar) = self.q_h.forward(tape, bound, h)?;
        Ok(TapeEncoding { mean, logvar })
    }

    /// Returns the output means and `Y_M`.
    fn tape_decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z_g: Var,
        z_h: Var,
        t: Var,
        noise: Option<&Mat>,
    ) -> Result<(Var, Var)> {
        let input = tape.concat_cols(&[z_h, t]);
        let (m, lv) = self.p_m.forward(tape, bound, input)?;
        let y_m = match noise {
            Some(e) => tape.reparam(m, lv, e.clone()),
            None => m,
        };
        Ok((self.f_h.forward(tape, bound, z_g, y_m), y_m))
    }

    fn tape_output_logvar(&self, tape: &mut Tape, bound: &Bound) -> Var {
        tape.clamp(bound.var(self.output_logvar), LOGVAR_MIN, LOGVAR_MAX)
    }

    /// Node embeddings `Z_G = f_G(𝒢)`.
    pub fn graph_embedding(&self, graph: &GraphInput) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (z_g, _) = self.tape_graph(&mut tape, &bound, graph)?;
        Ok(tape.value(z_g).clone())
    }

    /// Encodes a batch. `noise` (`b × d`) perturbs the latent sample; `None`
    /// returns the mean as the sample.
    pub fn encode(&self, graph: &GraphInput, y: &Mat, x: &Mat, t: &Mat, noise: Option<&Mat>) -> Result<LatentState> {
        self.check_inputs(y, x, t)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (z_g, pooled) = self.tape_graph(&mut tape, &bound, graph)?;
        let (yv, xv, tv) = (tape.leaf(y.clone()), tape.leaf(x.clone()), tape.leaf(t.clone()));
        let enc = self.tape_encode(&mut tape, &bound, pooled, yv, xv, tv)?;
        let sample = match noise {
            Some(e) => tape.reparam(enc.mean, enc.logvar, e.clone()),
            None => enc.mean,
        };
        Ok(LatentState {
            z_g: tape.value(z_g).clone(),
            mean: tape.value(enc.mean).clone(),
            logvar: tape.value(enc.logvar).clone(),
            sample: tape.value(sample).clone(),
        })
    }

    /// Decodes latent samples `z_h` (`b × d`) under treatments `t`.
    pub fn decode(&self, graph: &GraphInput, z_h: &Mat, t: &Mat, noise: Option<&Mat>) -> Result<Decoded> {
        if z_h.ncols() != self.config.latent_dim || t.dim() != (z_h.nrows(), self.dims.treatments) {
            return Err(Error::DimensionMismatch("latent/treatment shapes do not fit the model".into()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (z_g, _) = self.tape_graph(&mut tape, &bound, graph)?;
        let (zv, tv) = (tape.leaf(z_h.clone()), tape.leaf(t.clone()));
        let (mean, y_m) = self.tape_decode(&mut tape, &bound, z_g, zv, tv, noise)?;
        let lv = self.tape_output_logvar(&mut tape, &bound);
        Ok(Decoded {
            mean: tape.value(mean).clone(),
            logvar: tape.value(lv).row(0).to_owned(),
            y_m: tape.value(y_m).clone(),
        })
    }

    /// Encodes `(Y, X, T)`, decodes under `T'`, and re-encodes the
    /// counterfactual with `(X, T')`.
    pub fn counterfactual_forward(
        &self,
        graph: &GraphInput,
        y: &Mat,
        x: &Mat,
        t: &Mat,
        t_cf: &Mat,
        noise: &ForwardNoise,
    ) -> Result<CounterfactualPass> {
        let latent = self.encode(graph, y, x, t, Some(&noise.z))?;
        let y_cf = self.decode(graph, &latent.sample, t_cf, noise.y_m_cf.as_ref())?.mean;
        let cf_latent = self.encode(graph, &y_cf, x, t_cf, None)?;
        Ok(CounterfactualPass {
            latent,
            y_cf,
            cf_latent,
        })
    }

    /// Eval-mode counterfactual means: latent means in, `Y_M` means out.
    pub fn predict(&self, graph: &GraphInput, y: &Mat, x: &Mat, t: &Mat, t_cf: &Mat) -> Result<Mat> {
        let latent = self.encode(graph, y, x, t, None)?;
        Ok(self.decode(graph, &latent.mean, t_cf, None)?.mean)
    }

    fn build_objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &GraphInput,
        batch: &Batch,
        noise: &ForwardNoise,
        omega: (f64, f64),
    ) -> Result<[Var; 4]> {
        self.check_inputs(&batch.y, &batch.x, &batch.t)?;
        let b = batch.y.nrows();
        let n = self.dims.genes;
        if batch.t_cf.dim() != batch.t.dim() || batch.stratum_mean.dim() != (b, n) || batch.stratum_logvar.dim() != (b, n)
        {
            return Err(Error::DimensionMismatch("counterfactual batch blocks do not match".into()));
        }
        let (z_g, pooled) = self.tape_graph(tape, bound, graph)?;
        let y = tape.leaf(batch.y.clone());
        let x = tape.leaf(batch.x.clone());
        let t = tape.leaf(batch.t.clone());
        let t_cf = tape.leaf(batch.t_cf.clone());

        let enc = self.tape_encode(tape, bound, pooled, y, x, t)?;
        let z_h = tape.reparam(enc.mean, enc.logvar, noise.z.clone());
        let out_lv = self.tape_output_logvar(tape, bound);

        let (recon_mean, _) = self.tape_decode(tape, bound, z_g, z_h, t, noise.y_m.as_ref())?;
        let recon = tape.gaussian_log_lik(y, recon_mean, out_lv);

        let (y_cf, _) = self.tape_decode(tape, bound, z_g, z_h, t_cf, noise.y_m_cf.as_ref())?;
        let s_mean = tape.leaf(batch.stratum_mean.clone());
        let s_lv = tape.leaf(batch.stratum_logvar.clone());
        let dist = tape.gaussian_log_lik(y_cf, s_mean, s_lv);

        let cf_enc = self.tape_encode(tape, bound, pooled, y_cf, x, t_cf)?;
        let kl = tape.kl_diag(enc.mean, enc.logvar, cf_enc.mean, cf_enc.logvar);

        let scale = -1.0 / b as f64;
        let recon_nll = tape.sum(recon);
        let recon_nll = tape.scale(recon_nll, scale);
        let dist_loss = tape.sum(dist);
        let dist_loss = tape.scale(dist_loss, scale);
        let kl_mean = tape.sum(kl);
        let kl_mean = tape.scale(kl_mean, 1.0 / b as f64);
        let w_dist = tape.scale(dist_loss, omega.0);
        let w_kl = tape.scale(kl_mean, omega.1);
        let total = tape.add(recon_nll, w_dist);
        let total = tape.add(total, w_kl);
        Ok([total, recon_nll, dist_loss, kl_mean])
    }

    fn terms(tape: &Tape, vars: &[Var; 4]) -> ObjectiveTerms {
        ObjectiveTerms {
            total: tape.scalar(vars[0]),
            recon_nll: tape.scalar(vars[1]),
            dist_loss: tape.scalar(vars[2]),
            kl: tape.scalar(vars[3]),
        }
    }

    /// Loss terms of one batch, without gradients.
    pub fn objective(&self, graph: &GraphInput, batch: &Batch, noise: &ForwardNoise, omega: (f64, f64)) -> Result<ObjectiveTerms> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = self.build_objective(&mut tape, &bound, graph, batch, noise, omega)?;
        Ok(Self::terms(&tape, &vars))
    }

    /// Loss terms plus the gradient of the total w.r.t. every parameter, in
    /// parameter order.
    pub fn objective_with_grads(
        &self,
        graph: &GraphInput,
        batch: &Batch,
        noise: &ForwardNoise,
        omega: (f64, f64),
    ) -> Result<(ObjectiveTerms, Vec<Mat>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = self.build_objective(&mut tape, &bound, graph, batch, noise, omega)?;
        let mut grads = tape.backward(vars[0]);
        Ok((Self::terms(&tape, &vars), self.params.collect_grads(&bound, &mut grads)))
    }

    /// Whether a parameter is updated by training (input standardization
    /// tensors are not).
    pub fn is_trainable(&self, id: ParamId) -> bool {
        id != self.input_shift && id != self.input_scale
    }

    /// Central-difference check of [`Self::objective_with_grads`] over every
    /// trainable parameter.
    pub fn objective_gradcheck(
        &self,
        graph: &GraphInput,
        batch: &Batch,
        noise: &ForwardNoise,
        omega: (f64, f64),
        step: f64,
    ) -> Result<GradCheckReport> {
        let (_, analytic) = self.objective_with_grads(graph, batch, noise, omega)?;
        let mut probe = self.clone();
        let mut per_param = Vec::new();
        let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
        for id in self.params.ids().filter(|&id| self.is_trainable(id)) {
            let base = self.params.get(id).clone();
            let num = numeric_grad(&base, step, |x| {
                probe.params.get_mut(id).assign(x);
                probe.objective(graph, batch, noise, omega).map_or(f64::NAN, |t| t.total)
            });
            probe.params.get_mut(id).assign(&base);
            let a = &analytic[id.0];
            per_param.push((self.params.name(id).to_string(), relative_error(a, &num)));
            all_a.extend(a.iter().copied());
            all_n.extend(num.iter().copied());
        }
        let flat = |v: Vec<f64>| Mat::from_shape_vec((1, v.len()), v).expect("flat row");
        Ok(GradCheckReport {
            per_param,
            overall: relative_error(&flat(all_a), &flat(all_n)),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: self.config.clone(),
            dims: self.dims,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(checkpoint::encode(&meta, &self.params))
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        let mut model = Self::new(meta.config, meta.dims, 0)?;
        model.params.load_from(&params).map_err(Error::Checkpoint)?;
        Ok(model)
    }
}

/// One-hot rows for a list of codes.
pub fn one_hot(codes: &[usize], width: usize) -> Mat {
    let mut m = Mat::zeros((codes.len(), width));
    for (r, &c) in codes.iter().enumerate() {
        m[[r, c]] = 1.0;
    }
    m
}
