//! Seeded structural causal model over a planted gene graph.
//!
//! Every gene follows `y_i = u_i + Σ_p C[p,i] · link(y_p)` in topological order,
//! with exogenous term `u_i = baseline_i(X) + effect_i(T) + ε_i`. With the
//! identity link the model is linear-Gaussian and every marginal is available
//! in closed form; the `tanh` link is for stress tests and only supports
//! Monte-Carlo oracles.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionDataset, Levels, RelationGraph};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Linear,
    Tanh,
}

impl Link {
    fn apply(self, x: f64) -> f64 {
        match self {
            Link::Linear => x,
            Link::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_genes: usize,
    pub n_cells: usize,
    pub n_treatments: usize,
    /// Level count of every covariate; the first covariate is `cell_type`.
    pub covariate_levels: Vec<usize>,
    /// Expected number of edges per gene in the planted DAG.
    pub edges_per_gene: f64,
    pub coefficient_min: f64,
    pub coefficient_max: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    pub baseline_scale: f64,
    pub covariate_scale: f64,
    /// Fraction of genes each perturbation hits directly.
    pub effect_fraction: f64,
    pub effect_scale: f64,
    /// Random per-gene embedding columns appended to the structural features.
    pub embedding_features: usize,
    pub feature_noise: f64,
    /// Fraction of true edges removed from the prior graph; the same number of
    /// false edges is added.
    pub prior_delete_rate: f64,
    pub link: Link,
    /// Explicit edge list `(source, target)`; replaces the random DAG.
    pub edges: Option<Vec<(usize, usize)>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_genes: 50,
            n_cells: 2000,
            n_treatments: 5,
            covariate_levels: vec![2],
            edges_per_gene: 1.5,
            coefficient_min: 0.4,
            coefficient_max: 0.9,
            noise_min: 0.3,
            noise_max: 0.6,
            baseline_scale: 2.0,
            covariate_scale: 0.75,
            effect_fraction: 0.3,
            effect_scale: 1.5,
            embedding_features: 28,
            feature_noise: 0.1,
            prior_delete_rate: 0.2,
            link: Link::Linear,
            edges: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("synth.{field}: {why}")));
        if self.n_genes < 2 {
            return bad("n_genes", "must be at least 2");
        }
        if self.n_treatments < 2 {
            return bad("n_treatments", "must be at least 2");
        }
        if self.n_cells == 0 {
            return bad("n_cells", "must be positive");
        }
        if self.covariate_levels.is_empty() || self.covariate_levels.contains(&0) {
            return bad("covariate_levels", "need at least one covariate with at least one level");
        }
        if !(self.noise_min > 0.0 && self.noise_max >= self.noise_min) {
            return bad("noise_min", "noise scales must be positive and ordered");
        }
        if self.coefficient_max < self.coefficient_min {
            return bad("coefficient_max", "must be at least coefficient_min");
        }
        if !(0.0..=1.0).contains(&self.prior_delete_rate) {
            return bad("prior_delete_rate", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.effect_fraction) {
            return bad("effect_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }
}

pub fn treatment_label(t: usize) -> String {
    if t == 0 {
        "control".to_string()
    } else {
        format!("pert{t}")
    }
}

pub fn covariate_name(k: usize) -> String {
    if k == 0 {
        "cell_type".to_string()
    } else {
        format!("cov{k}")
    }
}

pub fn level_label(k: usize, level: usize) -> String {
    if k == 0 {
        ((b'A' + (level % 26) as u8) as char).to_string() + &"'".repeat(level / 26)
    } else {
        format!("c{k}_{level}")
    }
}

pub fn gene_name(g: usize) -> String {
    format!("G{g:03}")
}

/// Topological order of the graph with coefficient matrix `c` (rows are
/// parents); `None` if the graph has a cycle.
pub fn topological_order(c: &Array2<f64>) -> Option<Vec<usize>> {
    let n = c.nrows();
    let mut indeg: Vec<usize> = (0..n).map(|j| (0..n).filter(|&i| c[[i, j]] != 0.0).count()).collect();
    let mut ready: Vec<usize> = (0..n).filter(|&j| indeg[j] == 0).collect();
    ready.reverse();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for j in 0..n {
            if c[[i, j]] != 0.0 {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// A planted SCM together with the exogenous state of every generated cell.
#[derive(Clone, Debug)]
pub struct SyntheticScm {
    /// `C[p, i]`: coefficient of parent `p` in child `i`.
    coefficients: Array2<f64>,
    order: Vec<usize>,
    noise_scale: Array1<f64>,
    gene_baseline: Array1<f64>,
    /// Per covariate: `levels × genes` additive offsets.
    covariate_offsets: Vec<Array2<f64>>,
    /// `treatments × genes` direct effects; row 0 is the control.
    effects: Array2<f64>,
    link: Link,
    seed: u64,
    cell_covariates: Vec<Vec<usize>>,
    cell_treatments: Vec<usize>,
    /// Per cell: the realized noise ε.
    cell_noise: Array2<f64>,
}

impl SyntheticScm {
    pub fn new(
        coefficients: Array2<f64>,
        noise_scale: Array1<f64>,
        gene_baseline: Array1<f64>,
        covariate_offsets: Vec<Array2<f64>>,
        effects: Array2<f64>,
        link: Link,
        seed: u64,
    ) -> Result<Self> {
        let n = coefficients.nrows();
        if coefficients.ncols() != n || noise_scale.len() != n || gene_baseline.len() != n || effects.ncols() != n {
            return Err(Error::DimensionMismatch("SCM parameter shapes disagree".into()));
        }
        if covariate_offsets.iter().any(|o| o.ncols() != n) {
            return Err(Error::DimensionMismatch("covariate offsets must have one column per gene".into()));
        }
        if noise_scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("noise scales must be positive".into()));
        }
        let order = topological_order(&coefficients)
            .ok_or_else(|| Error::InvalidInput("requested adjacency is cyclic".into()))?;
        Ok(Self {
            coefficients,
            order,
            noise_scale,
            gene_baseline,
            covariate_offsets,
            effects,
            link,
            seed,
            cell_covariates: Vec::new(),
            cell_treatments: Vec::new(),
            cell_noise: Array2::zeros((0, n)),
        })
    }

    pub fn n_genes(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn n_treatments(&self) -> usize {
        self.effects.nrows()
    }

    pub fn coefficients(&self) -> &Array2<f64> {
        &self.coefficients
    }

    pub fn effects(&self) -> &Array2<f64> {
        &self.effects
    }

    pub fn noise_scale(&self) -> &Array1<f64> {
        &self.noise_scale
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_cells(&self) -> usize {
        self.cell_treatments.len()
    }

    pub fn cell_treatment(&self, cell: usize) -> usize {
        self.cell_treatments[cell]
    }

    pub fn cell_covariates(&self, cell: usize) -> &[usize] {
        &self.cell_covariates[cell]
    }

    pub fn true_adjacency(&self) -> Array2<f64> {
        self.coefficients.mapv(|c| if c != 0.0 { 1.0 } else { 0.0 })
    }

    /// Covariate-dependent baseline `baseline + Σ_k offset_k[level_k]`.
    pub fn baseline(&self, covariates: &[usize]) -> Result<Array1<f64>> {
        if covariates.len() != self.covariate_offsets.len() {
            return Err(Error::InvalidInput("wrong covariate tuple length".into()));
        }
        let mut b = self.gene_baseline.clone();
        for (off, &lvl) in self.covariate_offsets.iter().zip(covariates) {
            if lvl >= off.nrows() {
                return Err(Error::InvalidInput(format!("unknown covariate level {lvl}")));
            }
            b += &off.row(lvl);
        }
        Ok(b)
    }

    fn check_treatment(&self, a: usize) -> Result<()> {
        if a >= self.n_treatments() {
            return Err(Error::InvalidInput(format!("unknown treatment {a}")));
        }
        Ok(())
    }

    /// Propagates exogenous terms through the structural equations.
    pub fn propagate(&self, exogenous: &Array1<f64>) -> Array1<f64> {
        let mut y = Array1::zeros(self.n_genes());
        for &i in &self.order {
            let mut v = exogenous[i];
            for p in 0..self.n_genes() {
                let c = self.coefficients[[p, i]];
                if c != 0.0 {
                    v += c * self.link.apply(y[p]);
                }
            }
            y[i] = v;
        }
        y
    }

    /// Recovers the noise realization that produces `y` under `(covariates, treatment)`.
    pub fn abduct(&self, y: &Array1<f64>, covariates: &[usize], treatment: usize) -> Result<Array1<f64>> {
        self.check_treatment(treatment)?;
        let mut noise = y - &(self.baseline(covariates)? + &self.effects.row(treatment));
        for i in 0..self.n_genes() {
            for p in 0..self.n_genes() {
                let c = self.coefficients[[p, i]];
                if c != 0.0 {
                    noise[i] -= c * self.link.apply(y[p]);
                }
            }
        }
        Ok(noise)
    }

    /// Simulates one cell with noise `noise` (not stored).
    pub fn simulate(&self, covariates: &[usize], treatment: usize, noise: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_treatment(treatment)?;
        let u = self.baseline(covariates)? + &self.effects.row(treatment) + noise;
        Ok(self.propagate(&u))
    }

    /// Abduction-action-prediction for a stored cell: keeps its noise
    /// realization and swaps the treatment for `a`.
    pub fn true_counterfactual(&self, cell: usize, a: usize) -> Result<Array1<f64>> {
        if cell >= self.n_cells() {
            return Err(Error::InvalidInput(format!("cell {cell} was not generated by this model")));
        }
        let noise = self.cell_noise.row(cell).to_owned();
        self.simulate(&self.cell_covariates[cell], a, &noise)
    }

    /// Closed-form `E[Y | X = c, do(T = a)]`; linear link only.
    pub fn true_marginal(&self, a: usize, covariates: &[usize]) -> Result<Array1<f64>> {
        if self.link != Link::Linear {
            return Err(Error::InvalidInput(
                "closed-form marginals require the linear link; use monte_carlo_marginal".into(),
            ));
        }
        self.simulate(covariates, a, &Array1::zeros(self.n_genes()))
    }

    /// Monte-Carlo estimate of the same marginal, any link.
    pub fn monte_carlo_marginal(&self, a: usize, covariates: &[usize], samples: usize, seed: u64) -> Result<Array1<f64>> {
        let mut r = rng::rng(seed);
        let mut acc = Array1::zeros(self.n_genes());
        let mut noise = Array1::zeros(self.n_genes());
        for _ in 0..samples {
            for (e, s) in noise.iter_mut().zip(&self.noise_scale) {
                let z: f64 = StandardNormal.sample(&mut r);
                *e = s * z;
            }
            acc += &self.simulate(covariates, a, &noise)?;
        }
        Ok(acc / samples as f64)
    }

    /// Appends cells to the model's record, sampling noise; returns their outcomes.
    pub fn sample_cells(&mut self, covariates: Vec<Vec<usize>>, treatments: Vec<usize>, r: &mut rng::Rng) -> Result<Array2<f64>> {
        let n = self.n_genes();
        let mut out = Array2::zeros((treatments.len(), n));
        let mut noise_rows = Array2::zeros((treatments.len(), n));
        for (k, (cov, &t)) in covariates.iter().zip(&treatments).enumerate() {
            let noise: Array1<f64> = self.noise_scale.mapv(|s| {
                let z: f64 = StandardNormal.sample(r);
                s * z
            });
            out.row_mut(k).assign(&self.simulate(cov, t, &noise)?);
            noise_rows.row_mut(k).assign(&noise);
        }
        self.cell_noise = ndarray::concatenate![ndarray::Axis(0), self.cell_noise, noise_rows];
        self.cell_covariates.extend(covariates);
        self.cell_treatments.extend(treatments);
        Ok(out)
    }

    pub fn truth_dump(&self, genes: &[String], treatments: &[String]) -> ScmTruth {
        let mut edges = Vec::new();
        for ((p, c), &w) in self.coefficients.indexed_iter() {
            if w != 0.0 {
                edges.push(TruthEdge {
                    source: genes[p].clone(),
                    target: genes[c].clone(),
                    coefficient: w,
                });
            }
        }
        ScmTruth {
            link: self.link,
            seed: self.seed,
            genes: genes.to_vec(),
            edges,
            noise_scale: self.noise_scale.to_vec(),
            gene_baseline: self.gene_baseline.to_vec(),
            covariate_offsets: self
                .covariate_offsets
                .iter()
                .map(|o| o.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            effects: treatments
                .iter()
                .zip(self.effects.rows())
                .map(|(t, r)| (t.clone(), r.to_vec()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthEdge {
    pub source: String,
    pub target: String,
    pub coefficient: f64,
}

/// Structured dump of the planted model, for audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScmTruth {
    pub link: Link,
    pub seed: u64,
    pub genes: Vec<String>,
    pub edges: Vec<TruthEdge>,
    pub noise_scale: Vec<f64>,
    pub gene_baseline: Vec<f64>,
    pub covariate_offsets: Vec<Vec<Vec<f64>>>,
    pub effects: Vec<(String, Vec<f64>)>,
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: ExpressionDataset,
    pub truth: RelationGraph,
    pub prior: RelationGraph,
    pub scm: SyntheticScm,
}

fn planted_coefficients(cfg: &SynthConfig, r: &mut rng::Rng) -> Result<Array2<f64>> {
    let n = cfg.n_genes;
    let mut coeff = Array2::zeros((n, n));
    let draw = |r: &mut rng::Rng| {
        let mag = r.random_range(cfg.coefficient_min..=cfg.coefficient_max);
        if r.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    match &cfg.edges {
        Some(edges) => {
            for &(s, t) in edges {
                if s >= n || t >= n || s == t {
                    return Err(Error::Config(format!("synth.edges: invalid edge ({s}, {t})")));
                }
                coeff[[s, t]] = draw(r);
            }
            if topological_order(&coeff).is_none() {
                return Err(Error::Config("synth.edges: requested adjacency is cyclic".into()));
            }
        }
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(r);
            let p = (2.0 * cfg.edges_per_gene / (n as f64 - 1.0)).clamp(0.0, 1.0);
            for a in 0..n {
                for b in (a + 1)..n {
                    if r.random_bool(p) {
                        coeff[[order[a], order[b]]] = draw(r);
                    }
                }
            }
        }
    }
    Ok(coeff)
}

fn node_features(cfg: &SynthConfig, coeff: &Array2<f64>, r: &mut rng::Rng) -> Array2<f64> {
    let n = cfg.n_genes;
    let structural = 4;
    let mut f = Array2::zeros((n, structural + cfg.embedding_features));
    for g in 0..n {
        let col = coeff.column(g);
        let row = coeff.row(g);
        f[[g, 0]] = col.iter().filter(|&&c| c != 0.0).count() as f64;
        f[[g, 1]] = row.iter().filter(|&&c| c != 0.0).count() as f64;
        f[[g, 2]] = col.iter().map(|c| c.abs()).sum();
        f[[g, 3]] = row.iter().map(|c| c.abs()).sum();
    }
    for k in 0..structural {
        let mut c = f.column_mut(k);
        let mean = c.mean().unwrap_or(0.0);
        let sd = c.std(0.0);
        c.mapv_inplace(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 });
    }
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("finite noise");
    for g in 0..n {
        for k in 0..structural {
            f[[g, k]] += noise.sample(r);
        }
        for k in structural..f.ncols() {
            f[[g, k]] = StandardNormal.sample(r);
        }
    }
    f
}

fn corrupt(truth: &Array2<f64>, delete_rate: f64, r: &mut rng::Rng) -> Array2<f64> {
    let n = truth.nrows();
    let mut prior = truth.clone();
    let mut edges: Vec<(usize, usize)> = truth.indexed_iter().filter(|(_, &v)| v != 0.0).map(|(ij, _)| ij).collect();
    edges.shuffle(r);
    let n_del = (delete_rate * edges.len() as f64).round() as usize;
    for &(i, j) in &edges[..n_del] {
        prior[[i, j]] = 0.0;
    }
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && truth[[i, j]] == 0.0)
        .collect();
    candidates.shuffle(r);
    for &(i, j) in candidates.iter().take(n_del) {
        prior[[i, j]] = 1.0;
    }
    prior
}

/// Draws a planted SCM and `n_cells` cells from it.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let n = cfg.n_genes;
    let mut r_graph = rng::derived_rng(cfg.seed, "synth/graph");
    let mut r_params = rng::derived_rng(cfg.seed, "synth/params");
    let mut r_cells = rng::derived_rng(cfg.seed, "synth/cells");

    let coeff = planted_coefficients(cfg, &mut r_graph)?;
    let features = node_features(cfg, &coeff, &mut r_graph);
    let truth_adj = coeff.mapv(|c| if c != 0.0 { 1.0 } else { 0.0 });
    let prior_adj = corrupt(&truth_adj, cfg.prior_delete_rate, &mut r_graph);

    let noise_scale = Array1::from_shape_simple_fn(n, || r_params.random_range(cfg.noise_min..=cfg.noise_max));
    let base_dist = Normal::new(0.0, cfg.baseline_scale).map_err(|e| Error::Config(e.to_string()))?;
    let gene_baseline = Array1::from_shape_simple_fn(n, || base_dist.sample(&mut r_params));
    let cov_dist = Normal::new(0.0, cfg.covariate_scale).map_err(|e| Error::Config(e.to_string()))?;
    let covariate_offsets = cfg
        .covariate_levels
        .iter()
        .map(|&l| Array2::from_shape_simple_fn((l, n), || cov_dist.sample(&mut r_params)))
        .collect();
    let eff_dist = Normal::new(0.0, cfg.effect_scale).map_err(|e| Error::Config(e.to_string()))?;
    let n_hit = ((cfg.effect_fraction * n as f64).round() as usize).min(n);
    let mut effects = Array2::zeros((cfg.n_treatments, n));
    for t in 1..cfg.n_treatments {
        let mut genes: Vec<usize> = (0..n).collect();
        genes.shuffle(&mut r_params);
        for &g in &genes[..n_hit] {
            effects[[t, g]] = eff_dist.sample(&mut r_params);
        }
    }

    let mut scm = SyntheticScm::new(coeff, noise_scale, gene_baseline, covariate_offsets, effects, cfg.link, cfg.seed)?;

    let covariates: Vec<Vec<usize>> = (0..cfg.n_cells)
        .map(|_| cfg.covariate_levels.iter().map(|&l| r_cells.random_range(0..l)).collect())
        .collect();
    let treatments: Vec<usize> = (0..cfg.n_cells).map(|_| r_cells.random_range(0..cfg.n_treatments)).collect();
    let outcomes = scm.sample_cells(covariates.clone(), treatments.clone(), &mut r_cells)?;

    let genes: Vec<String> = (0..n).map(gene_name).collect();
    let cov_names = (0..cfg.covariate_levels.len()).map(covariate_name).collect();
    let cov_levels = cfg
        .covariate_levels
        .iter()
        .enumerate()
        .map(|(k, &l)| Levels::from_labels((0..l).map(|v| level_label(k, v)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let trt_levels = Levels::from_labels((0..cfg.n_treatments).map(treatment_label).collect())?;
    let dataset = ExpressionDataset::from_parts(outcomes, genes.clone(), cov_names, cov_levels, covariates, trt_levels, treatments)?;
    let truth = RelationGraph::new(features.clone(), truth_adj, genes.clone())?;
    let prior = RelationGraph::new(features, prior_adj, genes)?;
    Ok(SyntheticData {
        dataset,
        truth,
        prior,
        scm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn chain() -> SyntheticScm {
        // 0 → 1 → 2 with coefficients 2 and −0.5
        let mut c = Array2::zeros((3, 3));
        c[[0, 1]] = 2.0;
        c[[1, 2]] = -0.5;
        SyntheticScm::new(
            c,
            array![1.0, 1.0, 1.0],
            array![1.0, 0.0, 3.0],
            vec![array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]],
            array![[0.0, 0.0, 0.0], [0.0, 4.0, 0.0]],
            Link::Linear,
            0,
        )
        .unwrap()
    }

    #[test]
    fn chain_propagation_by_hand() {
        let mut scm = chain();
        let mut r = rng::rng(1);
        scm.sample_cells(vec![vec![1]], vec![0], &mut r).unwrap();
        let e = scm.cell_noise.row(0).to_owned();
        // factual under control, covariate level 1
        let y0 = 1.0 + 1.0 + e[0];
        let y1 = 1.0 + e[1] + 2.0 * y0;
        let y2 = 3.0 + 1.0 + e[2] - 0.5 * y1;
        let cf = scm.true_counterfactual(0, 0).unwrap();
        for (a, b) in cf.iter().zip([y0, y1, y2]) {
            assert!((a - b).abs() < 1e-12);
        }
        // swap to treatment 1: +4 on gene 1 propagates −2 into gene 2
        let cf1 = scm.true_counterfactual(0, 1).unwrap();
        assert!((cf1[0] - y0).abs() < 1e-12);
        assert!((cf1[1] - (y1 + 4.0)).abs() < 1e-12);
        assert!((cf1[2] - (y2 - 2.0)).abs() < 1e-12);
        assert!(scm.true_counterfactual(1, 0).is_err());
    }

    #[test]
    fn cyclic_request_is_rejected() {
        let cfg = SynthConfig {
            n_genes: 3,
            edges: Some(vec![(0, 1), (1, 2), (2, 0)]),
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig {
            n_genes: 10,
            n_cells: 50,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.prior, b.prior);
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn prior_corruption_counts() {
        let data = generate(&SynthConfig {
            n_cells: 10,
            ..Default::default()
        })
        .unwrap();
        let t = data.truth.adjacency();
        let p = data.prior.adjacency();
        let true_edges = data.truth.n_edges();
        let kept = t.iter().zip(p.iter()).filter(|(&a, &b)| a == 1.0 && b == 1.0).count();
        let deleted = true_edges - kept;
        assert_eq!(deleted, (0.2 * true_edges as f64).round() as usize);
        assert_eq!(data.prior.n_edges(), true_edges);
        assert!(p.diag().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn zero_coefficients_give_independent_baselines() {
        let cfg = SynthConfig {
            n_genes: 4,
            n_cells: 20_000,
            edges_per_gene: 0.0,
            effect_scale: 0.0,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.truth.n_edges(), 0);
        let scm = &data.scm;
        for c in 0..2 {
            let m = scm.true_marginal(1, &[c]).unwrap();
            assert_eq!(m, scm.baseline(&[c]).unwrap());
        }
        // factual/counterfactual differ by effect(a) − effect(T) exactly
        let t = scm.cell_treatment(0);
        let d = scm.true_counterfactual(0, 2).unwrap() - scm.true_counterfactual(0, t).unwrap();
        let expect = &scm.effects().row(2) - &scm.effects().row(t);
        for (a, b) in d.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_link_has_no_closed_form() {
        let data = generate(&SynthConfig {
            n_genes: 5,
            n_cells: 5,
            link: Link::Tanh,
            ..Default::default()
        })
        .unwrap();
        assert!(data.scm.true_marginal(0, &[0]).is_err());
        assert!(data.scm.monte_carlo_marginal(0, &[0], 100, 1).is_ok());
    }
}
