//! Covariate-stratified marginal effect estimation: the empirical mean of
//! model predictions and the influence-function-corrected robust estimator.

use std::fmt::Write as _;

use ndarray::{Array1, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{pseudobulk_cells, ExpressionDataset, RelationGraph};
use crate::error::{Error, Result};
use crate::metrics::{finite_mean, finite_std, r_squared};
use crate::model::{one_hot, EncodedData, ForwardNoise, GraphInput, GraphVciModel};
use crate::nn::Mat;
use crate::rng;
use crate::synth::SyntheticScm;

/// Source of `E[Y' | Z_k, T' = a]` for individual cells.
pub trait CounterfactualPredictor {
    /// One row per entry of `cells`.
    fn predict(&self, cells: &[usize], a: usize) -> Result<Mat>;
}

/// Predictions of a trained model. Latents are encoder means unless
/// sampling is switched on.
pub struct ModelPredictor<'a> {
    model: &'a GraphVciModel,
    data: EncodedData,
    graph: GraphInput,
    sample_seed: Option<u64>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a GraphVciModel, ds: &ExpressionDataset, graph: &RelationGraph) -> Result<Self> {
        graph.check_genes(ds.gene_names())?;
        Ok(Self {
            model,
            data: EncodedData::new(ds),
            graph: model.graph_input(graph)?,
            sample_seed: None,
        })
    }

    /// Draws `Z̃ ~ q(Z | Y, X, T)` instead of using its mean.
    pub fn with_sampling(mut self, seed: u64) -> Self {
        self.sample_seed = Some(seed);
        self
    }
}

impl CounterfactualPredictor for ModelPredictor<'_> {
    fn predict(&self, cells: &[usize], a: usize) -> Result<Mat> {
        let (y, x, t) = self.data.rows(cells);
        let t_cf = one_hot(&vec![a; cells.len()], self.model.dims().treatments);
        match self.sample_seed {
            None => self.model.predict(&self.graph, &y, &x, &t, &t_cf),
            Some(seed) => {
                let mut r = rng::derived_rng(seed, &format!("estimate/latent/{a}"));
                let d = self.model.config().latent_dim;
                let z = Mat::from_shape_simple_fn((cells.len(), d), || StandardNormal.sample(&mut r));
                let noise = ForwardNoise {
                    z,
                    y_m: None,
                    y_m_cf: None,
                };
                Ok(self.model.counterfactual_forward(&self.graph, &y, &x, &t, &t_cf, &noise)?.y_cf)
            }
        }
    }
}

/// Exact counterfactuals of a synthetic SCM by abduction of each cell's noise.
pub struct OraclePredictor<'a> {
    scm: &'a SyntheticScm,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(scm: &'a SyntheticScm) -> Self {
        Self { scm }
    }
}

impl CounterfactualPredictor for OraclePredictor<'_> {
    fn predict(&self, cells: &[usize], a: usize) -> Result<Mat> {
        let mut out = Mat::zeros((cells.len(), self.scm.n_genes()));
        for (k, &c) in cells.iter().enumerate() {
            out.row_mut(k).assign(&self.scm.true_counterfactual(c, a)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Robust,
    EmpiricalMean,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Robust => "robust",
            Method::EmpiricalMean => "empirical-mean",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalEstimate {
    pub treatment: usize,
    pub covariates: Vec<usize>,
    pub method: Method,
    pub estimate: Array1<f64>,
    /// Cells of the population in covariate stratum `c`.
    pub n_stratum: usize,
    /// Of those, cells that received `a`.
    pub n_treated: usize,
}

fn stratum(ds: &ExpressionDataset, population: &[usize], c: &[usize]) -> Result<Vec<usize>> {
    if c.len() != ds.covariate_names().len() {
        return Err(Error::DimensionMismatch(format!(
            "covariate tuple of length {} for {} covariates",
            c.len(),
            ds.covariate_names().len()
        )));
    }
    let cells: Vec<usize> = population.iter().copied().filter(|&k| ds.covariates_of(k) == c).collect();
    if cells.is_empty() {
        return Err(Error::EmptyStratum(format!("no cells with covariates {}", ds.covariate_label(c))));
    }
    Ok(cells)
}

/// Both estimates from one set of predictions: `(robust, empirical mean)`.
/// The robust one is `None` when no cell of the stratum received `a`.
fn estimate_pair(
    predictor: &dyn CounterfactualPredictor,
    ds: &ExpressionDataset,
    population: &[usize],
    a: usize,
    c: &[usize],
) -> Result<(Option<MarginalEstimate>, MarginalEstimate)> {
    if a >= ds.n_treatments() {
        return Err(Error::InvalidInput(format!("unknown treatment code {a}")));
    }
    let cells = stratum(ds, population, c)?;
    let preds = predictor.predict(&cells, a)?;
    let plug_in = preds.mean_axis(Axis(0)).expect("nonempty stratum");
    let treated: Vec<usize> = (0..cells.len()).filter(|&k| ds.treatment_of(cells[k]) == a).collect();
    let make = |method, estimate| MarginalEstimate {
        treatment: a,
        covariates: c.to_vec(),
        method,
        estimate,
        n_stratum: cells.len(),
        n_treated: treated.len(),
    };
    let robust = (!treated.is_empty()).then(|| {
        let mut residual = Array1::<f64>::zeros(ds.n_genes());
        for &k in &treated {
            residual += &(&ds.outcome(cells[k]) - &preds.row(k));
        }
        make(Method::Robust, &plug_in + &(residual / treated.len() as f64))
    });
    Ok((robust, make(Method::EmpiricalMean, plug_in)))
}

/// `Ψ̂ = mean over treated cells of (Y_k − Ŷ_k) + mean over the stratum of Ŷ_k`,
/// with `Ŷ_k` the prediction for cell `k` under treatment `a`.
pub fn robust_estimate(
    predictor: &dyn CounterfactualPredictor,
    ds: &ExpressionDataset,
    population: &[usize],
    a: usize,
    c: &[usize],
) -> Result<MarginalEstimate> {
    estimate_pair(predictor, ds, population, a, c)?.0.ok_or_else(|| {
        Error::EmptyStratum(format!(
            "no cell with covariates {} received {}; use the empirical-mean estimator",
            ds.covariate_label(c),
            ds.treatment_levels().label(a)
        ))
    })
}

/// Mean prediction under `a` over the cells of stratum `c`.
pub fn empirical_mean_estimate(
    predictor: &dyn CounterfactualPredictor,
    ds: &ExpressionDataset,
    population: &[usize],
    a: usize,
    c: &[usize],
) -> Result<MarginalEstimate> {
    Ok(estimate_pair(predictor, ds, population, a, c)?.1)
}

/// One observation as seen by the influence function of `Ψ(a, c)`.
#[derive(Clone, Debug)]
pub struct InfluenceObservation<'a> {
    /// `X = c`.
    pub in_stratum: bool,
    /// `T = a`.
    pub treated: bool,
    pub y: ArrayView1<'a, f64>,
    /// `E[Y | Z, T]` at the observed treatment.
    pub factual_mean: ArrayView1<'a, f64>,
    /// `E[Y' | Z, T' = a]`.
    pub counterfactual_mean: ArrayView1<'a, f64>,
}

/// `ψ̃ = I(X=c, T=a)/p(c, a) · (Y − E[Y|Z,T]) + I(X=c)/p(c) · (E[Y'|Z,T'=a] − Ψ)`.
pub fn efficient_influence(
    obs: &InfluenceObservation,
    p_stratum_treated: f64,
    p_stratum: f64,
    psi: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    for (name, p) in [("p(c, a)", p_stratum_treated), ("p(c)", p_stratum)] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidInput(format!("{name} = {p} is not in (0, 1]")));
        }
    }
    let mut out = Array1::zeros(psi.len());
    if obs.in_stratum && obs.treated {
        out += &((&obs.y - &obs.factual_mean) / p_stratum_treated);
    }
    if obs.in_stratum {
        out += &((&obs.counterfactual_mean - &psi) / p_stratum);
    }
    Ok(out)
}

/// Both estimators on one stratum, scored against a reference population.
#[derive(Clone, Debug)]
pub struct StratumComparison {
    pub robust: MarginalEstimate,
    pub empirical: MarginalEstimate,
    pub reference_mean: Array1<f64>,
    pub n_reference: usize,
    pub r2_robust: f64,
    pub r2_robust_de: f64,
    pub r2_empirical: f64,
    pub r2_empirical_de: f64,
}

fn r2_on(truth: &Array1<f64>, pred: &Array1<f64>, genes: Option<&[usize]>) -> f64 {
    match genes {
        None => r_squared(truth.view(), pred.view()),
        Some(g) => r_squared(truth.select(Axis(0), g).view(), pred.select(Axis(0), g).view()),
    }
}

/// For every (covariate tuple, non-control treatment) present in both
/// populations, estimates on `estimation` and scores R² against the observed
/// mean of `reference`. Strata missing from either side are skipped.
pub fn compare_estimators(
    predictor: &dyn CounterfactualPredictor,
    ds: &ExpressionDataset,
    estimation: &[usize],
    reference: &[usize],
    de_sets: &[Vec<usize>],
    control_label: &str,
) -> Result<Vec<StratumComparison>> {
    let control = ds.treatment_levels().code(control_label);
    let mut out = Vec::new();
    for c in ds.covariate_tuples() {
        for a in (0..ds.n_treatments()).filter(|&a| Some(a) != control) {
            let ref_cells: Vec<usize> = reference
                .iter()
                .copied()
                .filter(|&k| ds.treatment_of(k) == a && ds.covariates_of(k) == c.as_slice())
                .collect();
            let label = || format!("{} / {}", ds.covariate_label(&c), ds.treatment_levels().label(a));
            if ref_cells.is_empty() {
                log::warn!("stratum {} is absent from the reference cells; skipped", label());
                continue;
            }
            let (robust, empirical) = match estimate_pair(predictor, ds, estimation, a, &c) {
                Ok((Some(r), e)) => (r, e),
                Ok((None, _)) | Err(Error::EmptyStratum(_)) => {
                    log::warn!("stratum {} has no treated estimation cells; skipped", label());
                    continue;
                }
                Err(e) => return Err(e),
            };
            let reference_mean = pseudobulk_cells(ds, &ref_cells).expect("nonempty reference");
            let de = de_sets.get(a).map(Vec::as_slice).filter(|g| !g.is_empty());
            let de_r2 = |est: &MarginalEstimate| de.map_or(f64::NAN, |g| r2_on(&reference_mean, &est.estimate, Some(g)));
            out.push(StratumComparison {
                r2_robust: r2_on(&reference_mean, &robust.estimate, None),
                r2_robust_de: de_r2(&robust),
                r2_empirical: r2_on(&reference_mean, &empirical.estimate, None),
                r2_empirical_de: de_r2(&empirical),
                robust,
                empirical,
                reference_mean,
                n_reference: ref_cells.len(),
            });
        }
    }
    Ok(out)
}

/// One line of `estimator_comparison.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: Method,
    pub gene_set: &'static str,
    /// Mean over runs of the stratum-averaged R².
    pub r2: f64,
    /// Standard deviation of the same over runs.
    pub std: f64,
}

/// Aggregates comparisons of several runs (seeds) into the table layout.
pub fn summarize_comparisons(runs: &[Vec<StratumComparison>]) -> Vec<ComparisonRow> {
    type Pick = fn(&StratumComparison) -> f64;
    let cells: [(Method, &'static str, Pick); 4] = [
        (Method::Robust, "all", |s| s.r2_robust),
        (Method::Robust, "de", |s| s.r2_robust_de),
        (Method::EmpiricalMean, "all", |s| s.r2_empirical),
        (Method::EmpiricalMean, "de", |s| s.r2_empirical_de),
    ];
    cells
        .iter()
        .map(|&(method, gene_set, pick)| {
            let per_run: Vec<f64> = runs
                .iter()
                .map(|run| finite_mean(&run.iter().map(pick).collect::<Vec<_>>()))
                .collect();
            ComparisonRow {
                method,
                gene_set,
                r2: finite_mean(&per_run),
                std: finite_std(&per_run),
            }
        })
        .collect()
}

pub const COMPARISON_HEADER: &str = "method,gene_set,r2,std";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.method.as_str(), r.gene_set, r.r2, r.std);
    }
    s
}

/// `marginals.tsv`: one row per estimate with per-gene columns.
pub fn marginals_tsv(ds: &ExpressionDataset, estimates: &[MarginalEstimate]) -> String {
    let mut s = String::from("treatment\tcovariates\tmethod");
    for g in ds.gene_names() {
        s.push('\t');
        s.push_str(g);
    }
    s.push('\n');
    for e in estimates {
        let _ = write!(
            s,
            "{}\t{}\t{}",
            ds.treatment_levels().label(e.treatment),
            ds.covariate_label(&e.covariates),
            e.method.as_str()
        );
        for v in &e.estimate {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}
