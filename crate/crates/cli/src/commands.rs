use std::fmt::Write as _;
use std::fs;

use graphvci::data::io::{edges_tsv, features_tsv, write_dataset, write_split, write_string};
use graphvci::data::{
    load_dataset, load_graph, select_de_genes, select_ood, split_train_val, ExpressionDataset, RelationGraph,
    SplitAssignment, SplitTag,
};
use graphvci::marginal::{
    compare_estimators, comparison_csv, empirical_mean_estimate, marginals_tsv, robust_estimate, summarize_comparisons,
    CounterfactualPredictor, ModelPredictor,
};
use graphvci::model::{
    group_predictions, metrics_csv, r2_report, reconstruction_r2, train, GraphVciModel, ModelDims,
};
use graphvci::refine::{edge_weights_tsv, refine};
use graphvci::synth::generate;
use graphvci::{Error, Result};

use crate::config::{GraphSource, RunConfig, Strata};

/// Threshold below which `refine-graph` warns about a dense `Ê`.
const DENSE_ALPHA: f64 = 0.05;

fn create_output(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.output;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })
}

fn load_data(cfg: &RunConfig) -> Result<ExpressionDataset> {
    let dir = cfg.paths.dataset_dir();
    load_dataset(
        &dir.join("expression.tsv"),
        &dir.join("covariates.tsv"),
        &dir.join("treatments.tsv"),
    )
}

fn load_prior(cfg: &RunConfig, ds: &ExpressionDataset) -> Result<RelationGraph> {
    load_graph(&cfg.paths.graph_edges(), &cfg.paths.graph_features(), ds.gene_names())
}

/// The graph the model trains and predicts with.
fn load_model_graph(cfg: &RunConfig, ds: &ExpressionDataset) -> Result<RelationGraph> {
    match cfg.paths.model_graph {
        GraphSource::Prior => load_prior(cfg, ds),
        GraphSource::Refined => {
            let edges = cfg.paths.out("refined.edges.tsv");
            if !edges.exists() {
                return Err(Error::InvalidInput(format!(
                    "{} not found; run refine-graph first or set paths.model_graph = \"prior\"",
                    edges.display()
                )));
            }
            load_graph(&edges, &cfg.paths.graph_features(), ds.gene_names())
        }
    }
}

fn make_split(cfg: &RunConfig, ds: &ExpressionDataset) -> Result<SplitAssignment> {
    let ood = select_ood(ds, &cfg.split.covariate, &cfg.split.category, cfg.split.k)?;
    Ok(split_train_val(&ood, cfg.split.seed))
}

fn load_model(cfg: &RunConfig) -> Result<GraphVciModel> {
    let path = cfg.paths.out("model.ckpt");
    let bytes = fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
    GraphVciModel::from_checkpoint(&bytes)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let data = generate(&cfg.synth)?;
    create_output(cfg)?;
    let ds = &data.dataset;
    write_dataset(&cfg.paths.output, ds)?;
    write_string(&cfg.paths.out("graph.edges.tsv"), &edges_tsv(&data.prior))?;
    write_string(&cfg.paths.out("graph.features.tsv"), &features_tsv(&data.prior))?;
    write_string(&cfg.paths.out("truth.edges.tsv"), &edges_tsv(&data.truth))?;
    let truth = data.scm.truth_dump(ds.gene_names(), ds.treatment_levels().labels());
    let json = serde_json::to_string_pretty(&truth).map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_string(&cfg.paths.out("scm_truth.json"), &(json + "\n"))?;
    println!(
        "synth: {} cells x {} genes, {} treatments; prior graph {} edges, true graph {} edges -> {}",
        ds.n_cells(),
        ds.n_genes(),
        ds.n_treatments(),
        data.prior.n_edges(),
        data.truth.n_edges(),
        cfg.paths.output.display()
    );
    Ok(())
}

pub fn refine_graph(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let prior = load_prior(cfg, &ds)?;
    let split = make_split(cfg, &ds)?;
    let result = refine(&ds, &prior, &split, &cfg.refinement)?;
    create_output(cfg)?;
    write_split(&cfg.paths.out("split.tsv"), &split)?;
    write_string(&cfg.paths.out("refined.edges.tsv"), &edges_tsv(&result.graph))?;
    write_string(
        &cfg.paths.out("edge_weights.tsv"),
        &edge_weights_tsv(&result.weights, ds.gene_names(), cfg.refinement.top_k),
    )?;

    let before = prior.adjacency();
    let after = result.graph.adjacency();
    let kept = before.iter().zip(after).filter(|(&b, &a)| b != 0.0 && a != 0.0).count();
    let n = ds.n_genes();
    let possible = n * (n - 1);
    println!(
        "refine-graph: edges before {}, after {} ({kept} kept, {} added, {} removed)",
        prior.n_edges(),
        result.graph.n_edges(),
        result.graph.n_edges() - kept,
        prior.n_edges() - kept
    );
    if cfg.refinement.alpha < DENSE_ALPHA || 2 * result.graph.n_edges() > possible {
        log::warn!(
            "dense output: {} of {possible} possible edges exceed alpha = {}",
            result.graph.n_edges(),
            cfg.refinement.alpha
        );
    }
    Ok(())
}

fn de_sets(cfg: &RunConfig, ds: &ExpressionDataset) -> Result<Vec<Vec<usize>>> {
    select_de_genes(ds, &cfg.training.control_label, cfg.split.de_genes.min(ds.n_genes()))
}

pub fn train_model(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let graph = load_model_graph(cfg, &ds)?;
    let split = make_split(cfg, &ds)?;
    let de = de_sets(cfg, &ds)?;
    let dims = ModelDims {
        genes: ds.n_genes(),
        covariates: ds.covariate_dim(),
        treatments: ds.n_treatments(),
        node_features: graph.node_features().ncols(),
    };
    let mut model = GraphVciModel::new(cfg.model.clone(), dims, cfg.model_seed)?;
    let input = model.graph_input(&graph)?;
    let outcome = train(&mut model, &ds, &input, &split, &cfg.training, &de)?;
    create_output(cfg)?;
    write_split(&cfg.paths.out("split.tsv"), &split)?;
    write_string(&cfg.paths.out("metrics.csv"), &metrics_csv(&outcome.history))?;
    let bytes = model.to_checkpoint()?;
    fs::write(cfg.paths.out("model.ckpt"), bytes).map_err(|e| Error::Io {
        path: cfg.paths.out("model.ckpt"),
        source: e,
    })?;
    let recon = reconstruction_r2(&model, &ds, &input, &split.cells(SplitTag::Train))?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "train: {} epochs{}, best epoch {} (val R2 {}), train reconstruction R2 {recon:.4}",
        outcome.history.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best_epoch,
        fmt(outcome.best_val_r2)
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let ds = load_data(cfg)?;
    let graph = load_model_graph(cfg, &ds)?;
    let input = model.graph_input(&graph)?;
    let split = make_split(cfg, &ds)?;
    let de = de_sets(cfg, &ds)?;
    let control = &cfg.training.control_label;

    let mut preds = String::from("cell\ttreatment");
    for g in ds.gene_names() {
        preds.push('\t');
        preds.push_str(g);
    }
    preds.push('\n');
    let mut table = String::from("split\tcovariates\ttreatment\tn_cells\tr2_all\tr2_de\n");
    let mut summary = Vec::new();
    for tag in [SplitTag::Ood, SplitTag::Val] {
        let groups = group_predictions(&model, &ds, &input, &split, tag, control)?;
        let report = r2_report(&groups, &de);
        for (g, scored) in groups.iter().zip(&report.groups) {
            let label = ds.treatment_levels().label(g.treatment);
            for (k, &cell) in g.input_cells.iter().enumerate() {
                let _ = write!(preds, "{cell}\t{label}");
                for v in g.predictions.row(k) {
                    let _ = write!(preds, "\t{v}");
                }
                preds.push('\n');
            }
            let _ = writeln!(
                table,
                "{}\t{}\t{label}\t{}\t{}\t{}",
                tag.as_str(),
                ds.covariate_label(&g.covariates),
                g.n_truth_cells,
                scored.r2_all,
                scored.r2_de
            );
        }
        let _ = writeln!(table, "{}\t*\t*\t{}\t{}\t{}", tag.as_str(), groups.len(), report.all, report.de);
        summary.push(format!(
            "{} R2 {:.4} (DE {:.4}, {} groups)",
            tag.as_str(),
            report.all,
            report.de,
            groups.len()
        ));
    }
    create_output(cfg)?;
    write_string(&cfg.paths.out("predictions.tsv"), &preds)?;
    write_string(&cfg.paths.out("evaluation.tsv"), &table)?;
    let recon = reconstruction_r2(&model, &ds, &input, &split.cells(SplitTag::Train))?;
    println!("evaluate: {}; train reconstruction R2 {recon:.4}", summary.join("; "));
    Ok(())
}

pub fn estimate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let ds = load_data(cfg)?;
    let graph = load_model_graph(cfg, &ds)?;
    let split = make_split(cfg, &ds)?;
    let de = de_sets(cfg, &ds)?;
    let est = &cfg.estimator;
    let control = ds.treatment_levels().code(&cfg.training.control_label);

    let strata: Vec<Vec<usize>> = match &est.strata {
        Strata::All => ds.covariate_tuples(),
        Strata::List(list) => list
            .iter()
            .map(|s| ds.covariate_codes_for(&s.split(',').map(str::trim).collect::<Vec<_>>()))
            .collect::<Result<_>>()?,
    };
    let estimation = split.cells(SplitTag::Train);
    let reference = split.cells(SplitTag::Val);

    let predictor = |replicate: usize| -> Result<ModelPredictor<'_>> {
        let p = ModelPredictor::new(&model, &ds, &graph)?;
        Ok(if est.sample_latent {
            p.with_sampling(graphvci::rng::derive_seed(est.seed, &format!("replicate/{replicate}")))
        } else {
            p
        })
    };

    let first = predictor(0)?;
    let mut estimates = Vec::new();
    for c in &strata {
        for a in (0..ds.n_treatments()).filter(|&a| Some(a) != control) {
            match robust_estimate(&first, &ds, &estimation, a, c) {
                Ok(r) => estimates.push(r),
                Err(Error::EmptyStratum(msg)) if est.strata == Strata::All => {
                    log::warn!("robust estimate skipped: {msg}");
                }
                Err(e) => return Err(e),
            }
            match empirical_mean_estimate(&first, &ds, &estimation, a, c) {
                Ok(m) => estimates.push(m),
                Err(Error::EmptyStratum(msg)) if est.strata == Strata::All => {
                    log::warn!("empirical-mean estimate skipped: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
    }

    let mut runs = Vec::with_capacity(est.replicates);
    for replicate in 0..est.replicates {
        let p = predictor(replicate)?;
        let pred: &dyn CounterfactualPredictor = &p;
        let mut run = compare_estimators(pred, &ds, &estimation, &reference, &de, &cfg.training.control_label)?;
        run.retain(|s| strata.contains(&s.robust.covariates));
        runs.push(run);
    }
    let rows = summarize_comparisons(&runs);
    create_output(cfg)?;
    write_string(&cfg.paths.out("marginals.tsv"), &marginals_tsv(&ds, &estimates))?;
    write_string(&cfg.paths.out("estimator_comparison.csv"), &comparison_csv(&rows))?;
    let n_strata = runs.first().map_or(0, Vec::len);
    let line: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {} {:.4}", r.method.as_str(), r.gene_set, r.r2))
        .collect();
    println!(
        "estimate: {} estimates written; R2 against validation means over {n_strata} strata: {}",
        estimates.len(),
        line.join(", ")
    );
    Ok(())
}

/// Writes the resolved configuration next to the outputs.
pub fn record_config(cfg: &RunConfig, command: &str) -> Result<()> {
    create_output(cfg)?;
    write_string(&cfg.paths.out(&format!("{command}.config.toml")), &cfg.to_toml())
}
