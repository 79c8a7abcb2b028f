use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, Axis};

use super::dataset::ExpressionDataset;
use crate::error::{Error, Result};
use crate::nn::gaussian::gaussian_log_likelihood;

/// Mean outcome vector over a set of cells; `None` for an empty set.
pub fn pseudobulk_cells(ds: &ExpressionDataset, cells: &[usize]) -> Option<Array1<f64>> {
    if cells.is_empty() {
        return None;
    }
    let mut acc = Array1::zeros(ds.n_genes());
    for &c in cells {
        acc += &ds.outcome(c);
    }
    Some(acc / cells.len() as f64)
}

/// Per-treatment mean expression, indexed by treatment code.
pub fn pseudobulk(ds: &ExpressionDataset) -> Vec<Array1<f64>> {
    let mut sums = vec![Array1::<f64>::zeros(ds.n_genes()); ds.n_treatments()];
    let mut counts = vec![0usize; ds.n_treatments()];
    for i in 0..ds.n_cells() {
        let t = ds.treatment_of(i);
        sums[t] += &ds.outcome(i);
        counts[t] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s / c.max(1) as f64)
        .collect()
}

fn mean_and_population_var(ds: &ExpressionDataset, cells: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let rows = ds.outcomes().select(Axis(0), cells);
    let mean = rows.mean_axis(Axis(0)).expect("nonempty cell set");
    let var = rows.var_axis(Axis(0), 0.0);
    (mean, var)
}

const DE_EPS: f64 = 1e-8;

/// Differential-expression score of every gene for treatment `t` against the
/// control: `|μ_t − μ_ctrl| / (σ_pooled + ε)` with
/// `σ_pooled = sqrt((σ²_t + σ²_ctrl) / 2)` (population variances).
pub fn de_scores(ds: &ExpressionDataset, t: usize, control: usize) -> Array1<f64> {
    let cells_of = |k: usize| (0..ds.n_cells()).filter(|&i| ds.treatment_of(i) == k).collect::<Vec<_>>();
    let (mt, vt) = mean_and_population_var(ds, &cells_of(t));
    let (mc, vc) = mean_and_population_var(ds, &cells_of(control));
    let mut out = Array1::zeros(ds.n_genes());
    for g in 0..ds.n_genes() {
        let pooled = (0.5 * (vt[g] + vc[g])).sqrt();
        out[g] = (mt[g] - mc[g]).abs() / (pooled + DE_EPS);
    }
    out
}

/// Top-`count` genes per treatment by [`de_scores`], indexed by treatment code.
/// Ties keep the lower gene index first.
pub fn select_de_genes(ds: &ExpressionDataset, control_label: &str, count: usize) -> Result<Vec<Vec<usize>>> {
    let control = ds
        .treatment_levels()
        .code(control_label)
        .ok_or_else(|| Error::InvalidInput(format!("control treatment {control_label:?} not present")))?;
    Ok((0..ds.n_treatments())
        .map(|t| {
            let s = de_scores(ds, t, control);
            let mut order: Vec<usize> = (0..ds.n_genes()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            order.truncate(count.min(ds.n_genes()));
            order
        })
        .collect())
}

/// Diagonal Gaussian fit of one (covariate tuple, treatment) stratum.
#[derive(Clone, Debug, PartialEq)]
pub struct StratumGaussian {
    pub covariates: Vec<usize>,
    pub treatment: usize,
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub count: usize,
}

impl StratumGaussian {
    pub fn log_density(&self, y: ArrayView1<f64>) -> f64 {
        gaussian_log_likelihood(y, self.mean.view(), self.variance.view())
    }
}

/// Stratum fits plus per-treatment fits pooled over covariates.
#[derive(Clone, Debug)]
pub struct StratumFits {
    strata: BTreeMap<(Vec<usize>, usize), StratumGaussian>,
    pooled: Vec<StratumGaussian>,
    min_stratum_size: usize,
}

impl StratumFits {
    /// Fit for `(covariates, treatment)`; strata below the minimum size use
    /// the treatment's pooled fit.
    pub fn lookup(&self, covariates: &[usize], treatment: usize) -> &StratumGaussian {
        match self.strata.get(&(covariates.to_vec(), treatment)) {
            Some(s) if s.count >= self.min_stratum_size => s,
            _ => &self.pooled[treatment],
        }
    }

    pub fn strata(&self) -> impl Iterator<Item = &StratumGaussian> {
        self.strata.values()
    }

    pub fn pooled(&self, treatment: usize) -> &StratumGaussian {
        &self.pooled[treatment]
    }
}

/// Fits diagonal Gaussians (mean, population variance clamped at
/// `variance_floor`) to every nonempty stratum among `cells`.
pub fn fit_stratum_gaussians(
    ds: &ExpressionDataset,
    cells: &[usize],
    variance_floor: f64,
    min_stratum_size: usize,
) -> Result<StratumFits> {
    if !(variance_floor > 0.0) {
        return Err(Error::InvalidInput("variance floor must be positive".into()));
    }
    let mut groups: BTreeMap<(Vec<usize>, usize), Vec<usize>> = BTreeMap::new();
    let mut by_treatment = vec![Vec::new(); ds.n_treatments()];
    for &c in cells {
        let t = ds.treatment_of(c);
        groups.entry((ds.covariates_of(c).to_vec(), t)).or_default().push(c);
        by_treatment[t].push(c);
    }
    let fit = |covariates: Vec<usize>, treatment: usize, members: &[usize]| {
        let (mean, var) = mean_and_population_var(ds, members);
        StratumGaussian {
            covariates,
            treatment,
            mean,
            variance: var.mapv(|v| v.max(variance_floor)),
            count: members.len(),
        }
    };
    let mut pooled = Vec::with_capacity(ds.n_treatments());
    for (t, members) in by_treatment.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyStratum(format!(
                "treatment {:?} has no cells to fit",
                ds.treatment_levels().label(t)
            )));
        }
        pooled.push(fit(Vec::new(), t, members));
    }
    let strata = groups
        .into_iter()
        .map(|((cov, t), members)| ((cov.clone(), t), fit(cov, t, &members)))
        .collect();
    Ok(StratumFits {
        strata,
        pooled,
        min_stratum_size,
    })
}
