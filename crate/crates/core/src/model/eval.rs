use ndarray::{Array1, Axis};

use super::network::{one_hot, GraphInput, GraphVciModel};
use crate::data::{pseudobulk_cells, ExpressionDataset, SplitAssignment, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{finite_mean, r_squared};
use crate::nn::Mat;

/// Dataset blocks in model input layout.
#[derive(Clone, Debug)]
pub struct EncodedData {
    pub y: Mat,
    pub x: Mat,
    pub t: Mat,
    pub treatments: Vec<usize>,
}

impl EncodedData {
    pub fn new(ds: &ExpressionDataset) -> Self {
        Self {
            y: ds.outcomes().clone(),
            x: ds.encode_covariates(),
            t: ds.encode_treatments(),
            treatments: ds.treatments().to_vec(),
        }
    }

    pub fn rows(&self, cells: &[usize]) -> (Mat, Mat, Mat) {
        (
            self.y.select(Axis(0), cells),
            self.x.select(Axis(0), cells),
            self.t.select(Axis(0), cells),
        )
    }
}

/// Eval-mode counterfactual means for `cells` under treatment `a`.
pub fn predict_cells(model: &GraphVciModel, data: &EncodedData, graph: &GraphInput, cells: &[usize], a: usize) -> Result<Mat> {
    let (y, x, t) = data.rows(cells);
    let t_cf = one_hot(&vec![a; cells.len()], model.dims().treatments);
    model.predict(graph, &y, &x, &t, &t_cf)
}

/// Counterfactual predictions for one (covariate tuple, perturbation) group.
#[derive(Clone, Debug)]
pub struct GroupPrediction {
    pub covariates: Vec<usize>,
    pub treatment: usize,
    /// Control cells used as factual inputs.
    pub input_cells: Vec<usize>,
    pub predictions: Mat,
    /// Observed mean of the group's evaluation cells.
    pub truth_mean: Array1<f64>,
    pub n_truth_cells: usize,
}

impl GroupPrediction {
    pub fn predicted_mean(&self) -> Array1<f64> {
        self.predictions.mean_axis(Axis(0)).expect("nonempty input cells")
    }
}

/// Predicts every non-control (covariate tuple, treatment) group present in
/// the `tag` split from the control cells sharing its covariates.
pub fn group_predictions(
    model: &GraphVciModel,
    ds: &ExpressionDataset,
    graph: &GraphInput,
    split: &SplitAssignment,
    tag: SplitTag,
    control_label: &str,
) -> Result<Vec<GroupPrediction>> {
    let control = ds
        .treatment_levels()
        .code(control_label)
        .ok_or_else(|| Error::InvalidInput(format!("control treatment {control_label:?} not present")))?;
    let data = EncodedData::new(ds);
    let mut groups: std::collections::BTreeMap<(Vec<usize>, usize), Vec<usize>> = Default::default();
    for cell in split.cells(tag) {
        let t = ds.treatment_of(cell);
        if t != control {
            groups.entry((ds.covariates_of(cell).to_vec(), t)).or_default().push(cell);
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((cov, a), members) in groups {
        let inputs: Vec<usize> = ds
            .cells_with_covariates(&cov)
            .into_iter()
            .filter(|&c| ds.treatment_of(c) == control)
            .collect();
        if inputs.is_empty() {
            return Err(Error::EmptyStratum(format!(
                "no control cells with {} to seed counterfactuals",
                ds.covariate_label(&cov)
            )));
        }
        let predictions = predict_cells(model, &data, graph, &inputs, a)?;
        out.push(GroupPrediction {
            covariates: cov,
            treatment: a,
            input_cells: inputs,
            predictions,
            truth_mean: pseudobulk_cells(ds, &members).expect("nonempty group"),
            n_truth_cells: members.len(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupR2 {
    pub covariates: Vec<usize>,
    pub treatment: usize,
    pub r2_all: f64,
    pub r2_de: f64,
}

/// Group-averaged R² over all genes and over each treatment's DE genes.
#[derive(Clone, Debug, PartialEq)]
pub struct R2Report {
    pub all: f64,
    pub de: f64,
    pub groups: Vec<GroupR2>,
}

/// R² of predicted against observed group means, averaged over groups.
/// `de_sets` is indexed by treatment code.
pub fn r2_report(groups: &[GroupPrediction], de_sets: &[Vec<usize>]) -> R2Report {
    let scored: Vec<GroupR2> = groups
        .iter()
        .map(|g| {
            let pred = g.predicted_mean();
            let de = &de_sets[g.treatment];
            let r2_de = if de.is_empty() {
                f64::NAN
            } else {
                r_squared(g.truth_mean.select(Axis(0), de).view(), pred.select(Axis(0), de).view())
            };
            GroupR2 {
                covariates: g.covariates.clone(),
                treatment: g.treatment,
                r2_all: r_squared(g.truth_mean.view(), pred.view()),
                r2_de,
            }
        })
        .collect();
    R2Report {
        all: finite_mean(&scored.iter().map(|g| g.r2_all).collect::<Vec<_>>()),
        de: finite_mean(&scored.iter().map(|g| g.r2_de).collect::<Vec<_>>()),
        groups: scored,
    }
}

pub fn evaluate_r2(
    model: &GraphVciModel,
    ds: &ExpressionDataset,
    graph: &GraphInput,
    split: &SplitAssignment,
    tag: SplitTag,
    de_sets: &[Vec<usize>],
    control_label: &str,
) -> Result<R2Report> {
    let groups = group_predictions(model, ds, graph, split, tag, control_label)?;
    Ok(r2_report(&groups, de_sets))
}

/// Mean over `cells` of the per-cell R² between observed expression and its
/// eval-mode reconstruction under the factual treatment.
pub fn reconstruction_r2(model: &GraphVciModel, ds: &ExpressionDataset, graph: &GraphInput, cells: &[usize]) -> Result<f64> {
    let data = EncodedData::new(ds);
    let (y, x, t) = data.rows(cells);
    let recon = model.predict(graph, &y, &x, &t, &t)?;
    let per_cell: Vec<f64> = y
        .rows()
        .into_iter()
        .zip(recon.rows())
        .map(|(a, b)| r_squared(a, b))
        .collect();
    Ok(finite_mean(&per_cell))
}
