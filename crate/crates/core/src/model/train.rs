use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::config::{CounterfactualMode, TrainingConfig};
use super::eval::{evaluate_r2, EncodedData};
use super::network::{one_hot, Batch, ForwardNoise, GraphInput, GraphVciModel, ObjectiveTerms};
use crate::data::{fit_stratum_gaussians, ExpressionDataset, SplitAssignment, SplitTag, StratumFits};
use crate::error::{Error, Result};
use crate::nn::{Adam, Mat};
use crate::rng::{self, Rng};

/// Draws counterfactual treatments for a batch with factual codes `factual`.
/// `available` lists the treatment codes observed in training.
pub fn sample_counterfactual_treatment(
    factual: &[usize],
    available: &[usize],
    mode: CounterfactualMode,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    match mode {
        CounterfactualMode::UniformOther => {
            if available.len() < 2 {
                return Err(Error::InvalidInput(
                    "uniform-other counterfactuals need at least two observed treatments".into(),
                ));
            }
            factual
                .iter()
                .map(|&t| {
                    let others: Vec<usize> = available.iter().copied().filter(|&a| a != t).collect();
                    Ok(others[rng.random_range(0..others.len())])
                })
                .collect()
        }
        CounterfactualMode::Permute => {
            let mut out = factual.to_vec();
            out.shuffle(rng);
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon_nll: f64,
    pub dist_loss: f64,
    pub kl: f64,
    pub val_r2_all: Option<f64>,
    pub val_r2_de: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_r2: Option<f64>,
    pub stopped_early: bool,
}

pub const METRICS_HEADER: &str = "epoch,recon_nll,dist_loss,kl,val_r2_all,val_r2_de";

/// Renders the history as `metrics.csv`; validation fields stay empty on
/// epochs without an evaluation.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch,
            m.recon_nll,
            m.dist_loss,
            m.kl,
            opt(m.val_r2_all),
            opt(m.val_r2_de)
        );
    }
    s
}

fn standard_normal(rows: usize, cols: usize, r: &mut Rng) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || StandardNormal.sample(r))
}

/// Assembles one batch: counterfactual treatments and their stratum targets.
pub fn make_batch(
    ds: &ExpressionDataset,
    data: &EncodedData,
    fits: &StratumFits,
    cells: &[usize],
    t_cf: &[usize],
) -> Batch {
    let (y, x, t) = data.rows(cells);
    let n = ds.n_genes();
    let mut stratum_mean = Mat::zeros((cells.len(), n));
    let mut stratum_logvar = Mat::zeros((cells.len(), n));
    for (k, (&c, &a)) in cells.iter().zip(t_cf).enumerate() {
        let s = fits.lookup(ds.covariates_of(c), a);
        stratum_mean.row_mut(k).assign(&s.mean);
        stratum_logvar.row_mut(k).assign(&s.variance.mapv(f64::ln));
    }
    Batch {
        y,
        x,
        t,
        t_cf: one_hot(t_cf, ds.n_treatments()),
        stratum_mean,
        stratum_logvar,
    }
}

/// Optimizes the weighted objective with Adam over shuffled mini-batches of
/// the train split, with early stopping on validation R̄² (all genes).
/// The model is left holding the best validated parameters.
pub fn train(
    model: &mut GraphVciModel,
    ds: &ExpressionDataset,
    graph: &GraphInput,
    split: &SplitAssignment,
    cfg: &TrainingConfig,
    de_sets: &[Vec<usize>],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_cells = split.cells(SplitTag::Train);
    if train_cells.is_empty() {
        return Err(Error::InvalidInput("the train split is empty".into()));
    }
    let has_val = split.count(SplitTag::Val) > 0;
    let fits = fit_stratum_gaussians(ds, &train_cells, cfg.variance_floor, cfg.min_stratum_size)?;
    let data = EncodedData::new(ds);
    model.fit_input_normalizer(&data.rows(&train_cells).0)?;
    let mut available: Vec<usize> = train_cells.iter().map(|&c| ds.treatment_of(c)).collect();
    available.sort_unstable();
    available.dedup();

    let mut shuffle_rng = rng::derived_rng(cfg.seed, "train/shuffle");
    let mut noise_rng = rng::derived_rng(cfg.seed, "train/noise");
    let mut cf_rng = rng::derived_rng(cfg.seed, "train/counterfactual");
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let d = model.config().latent_dim;
    let omega = (cfg.omega1, cfg.omega2);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::nn::ParamSet)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order = train_cells.clone();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = ObjectiveTerms::default();
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let factual: Vec<usize> = chunk.iter().map(|&c| ds.treatment_of(c)).collect();
            let t_cf = sample_counterfactual_treatment(&factual, &available, cfg.counterfactual, &mut cf_rng)?;
            let batch = make_batch(ds, &data, &fits, chunk, &t_cf);
            let b = chunk.len();
            let noise = ForwardNoise {
                z: standard_normal(b, d, &mut noise_rng),
                y_m: cfg.sample_decoder.then(|| standard_normal(b, d, &mut noise_rng)),
                y_m_cf: cfg.sample_decoder.then(|| standard_normal(b, d, &mut noise_rng)),
            };
            let (terms, grads) = model.objective_with_grads(graph, &batch, &noise, omega)?;
            if !terms.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {k} (recon {}, dist {}, kl {})",
                    terms.recon_nll, terms.dist_loss, terms.kl
                )));
            }
            adam.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(Error::Divergence(format!("parameters became non-finite at epoch {epoch}, batch {k}")));
            }
            let w = b as f64;
            sums.recon_nll += w * terms.recon_nll;
            sums.dist_loss += w * terms.dist_loss;
            sums.kl += w * terms.kl;
        }
        let n = order.len() as f64;
        let mut metrics = EpochMetrics {
            epoch,
            recon_nll: sums.recon_nll / n,
            dist_loss: sums.dist_loss / n,
            kl: sums.kl / n,
            val_r2_all: None,
            val_r2_de: None,
        };
        let mut stop = false;
        if has_val && (epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs) {
            let report = evaluate_r2(model, ds, graph, split, SplitTag::Val, de_sets, &cfg.control_label)?;
            metrics.val_r2_all = Some(report.all);
            metrics.val_r2_de = Some(report.de);
            log::debug!("epoch {epoch}: recon {:.4} val R2 {:.4}", metrics.recon_nll, report.all);
            if report.all.is_finite() {
                let improved = best.as_ref().is_none_or(|(score, _, _)| report.all > *score);
                if improved {
                    best = Some((report.all, epoch, model.params().clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    stop = since_best > cfg.patience;
                }
            }
        }
        history.push(metrics);
        if stop {
            stopped_early = true;
            break;
        }
    }

    let last_epoch = history.last().map_or(0, |m| m.epoch);
    let (best_epoch, best_val_r2) = match best {
        Some((score, epoch, params)) => {
            model.params_mut().load_from(&params).map_err(Error::Checkpoint)?;
            (epoch, Some(score))
        }
        None => (last_epoch, None),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_r2,
        stopped_early,
    })
}
