use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use graphvci_cli::{exit_code, RunConfig};
use tempfile::TempDir;

const SMALL: &str = r#"
[synth]
n_genes = 12
n_cells = 300
n_treatments = 3
embedding_features = 4

[model]
latent_dim = 8
graph_dim = 4
graph_hidden = 8

[training]
max_epochs = 6
eval_every = 2

[refinement]
epochs = 3
hidden_width = 8

[split]
de_genes = 4
"#;

fn graphvci(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_graphvci"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = graphvci(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, file: &str) -> String {
    fs::read_to_string(dir.join("out").join(file)).unwrap()
}

fn data_lines(text: &str) -> usize {
    text.lines().count() - 1
}

#[test]
fn synth_writes_consistent_files() {
    let d = TempDir::new().unwrap();
    let stdout = ok(d.path(), &["synth"]);
    assert!(stdout.starts_with("synth: 300 cells x 12 genes"));
    for f in ["expression.tsv", "covariates.tsv", "treatments.tsv"] {
        assert_eq!(data_lines(&read(d.path(), f)), 300, "{f}");
    }
    let expr = read(d.path(), "expression.tsv");
    assert_eq!(expr.lines().next().unwrap().split('\t').count(), 12);
    assert_eq!(data_lines(&read(d.path(), "graph.features.tsv")), 12);
    assert_eq!(read(d.path(), "graph.edges.tsv").lines().next(), Some("source\ttarget"));
    let truth: serde_json::Value = serde_json::from_str(&read(d.path(), "scm_truth.json")).unwrap();
    assert_eq!(truth["genes"].as_array().unwrap().len(), 12);
    assert_eq!(
        truth["edges"].as_array().unwrap().len(),
        data_lines(&read(d.path(), "truth.edges.tsv"))
    );
}

#[test]
fn synth_is_reproducible_and_seed_sensitive() {
    let (a, b, c) = (TempDir::new().unwrap(), TempDir::new().unwrap(), TempDir::new().unwrap());
    ok(a.path(), &["synth", "--seed", "5"]);
    ok(b.path(), &["synth", "--seed", "5"]);
    ok(c.path(), &["synth", "--seed", "6"]);
    for f in ["expression.tsv", "graph.edges.tsv", "scm_truth.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert_ne!(read(a.path(), "expression.tsv"), read(c.path(), "expression.tsv"));
}

#[test]
fn invalid_values_and_unknown_keys_exit_with_config_error() {
    let d = TempDir::new().unwrap();
    let out = graphvci(d.path(), &["synth", "--set", "synth.n_genes=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.n_genes"));

    let out = graphvci(d.path(), &["synth", "--set", "training.max_epoch=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_epoch"));

    fs::write(d.path().join("typo.toml"), "[trainig]\nmax_epochs = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_graphvci"))
        .args(["synth", "--config"])
        .arg(d.path().join("typo.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trainig"));
}

#[test]
fn refine_threshold_extremes() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["synth"]);
    let stdout = ok(d.path(), &["refine-graph", "--set", "refinement.alpha=0.999999999"]);
    assert!(stdout.contains("after 0 "), "{stdout}");
    assert_eq!(read(d.path(), "refined.edges.tsv"), "source\ttarget\n");
    assert_eq!(data_lines(&read(d.path(), "edge_weights.tsv")), 12 * 11);

    let out = graphvci(d.path(), &["refine-graph", "--set", "refinement.alpha=0.001"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dense output"));
    assert_eq!(data_lines(&read(d.path(), "refined.edges.tsv")), 12 * 11);
}

#[test]
fn refine_is_reproducible() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["synth"]);
    let first = ok(d.path(), &["refine-graph", "--set", "refinement.top_k=5"]);
    let (edges, weights) = (read(d.path(), "refined.edges.tsv"), read(d.path(), "edge_weights.tsv"));
    assert!(first.starts_with("refine-graph: edges before"));
    assert_eq!(data_lines(&weights), 5);
    ok(d.path(), &["refine-graph", "--set", "refinement.top_k=5"]);
    assert_eq!(read(d.path(), "refined.edges.tsv"), edges);
    assert_eq!(read(d.path(), "edge_weights.tsv"), weights);
}

#[test]
fn gene_set_mismatch_is_a_data_error() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["synth"]);
    fs::write(d.path().join("out/graph.edges.tsv"), "source\ttarget\nG000\tNOPE\n").unwrap();
    let out = graphvci(d.path(), &["refine-graph"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gene-set mismatch"));
}

#[test]
fn downstream_commands_need_their_inputs() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["synth"]);
    for cmd in ["evaluate", "estimate"] {
        let out = graphvci(d.path(), &[cmd, "--set", "paths.model_graph=prior"]);
        assert_eq!(out.status.code(), Some(3), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("model.ckpt"));
    }
    let out = graphvci(d.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refine-graph"));
}

#[test]
fn divergence_exits_with_code_four() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["synth"]);
    let out = graphvci(
        d.path(),
        &["train", "--set", "paths.model_graph=prior", "--set", "training.learning_rate=1e200"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_outputs_and_reproducibility() {
    let runs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for r in &runs {
        for cmd in ["synth", "refine-graph", "train", "evaluate", "estimate"] {
            ok(r.path(), &[cmd]);
        }
    }
    let p = runs[0].path();
    let metrics = read(p, "metrics.csv");
    assert_eq!(metrics.lines().next(), Some("epoch,recon_nll,dist_loss,kl,val_r2_all,val_r2_de"));
    assert_eq!(data_lines(&metrics), 6);
    assert!(metrics.lines().skip(1).all(|l| l.split(',').count() == 6));

    let comparison = read(p, "estimator_comparison.csv");
    let lines: Vec<&str> = comparison.lines().collect();
    assert_eq!(lines[0], "method,gene_set,r2,std");
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l.split(',').count() == 4));

    let marginals = read(p, "marginals.tsv");
    assert!(marginals.starts_with("treatment\tcovariates\tmethod\tG000\t"));
    let preds = read(p, "predictions.tsv");
    assert!(preds.starts_with("cell\ttreatment\tG000\t"));
    assert!(read(p, "evaluation.tsv").lines().any(|l| l.starts_with("ood\t*\t*\t")));

    for f in fs::read_dir(p.join("out")).unwrap() {
        let name = f.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".config.toml") {
            continue;
        }
        let a = fs::read(p.join("out").join(&name)).unwrap();
        let b = fs::read(runs[1].path().join("out").join(&name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
    }
}

#[test]
fn explicit_strata_must_have_treated_cells() {
    let d = TempDir::new().unwrap();
    for cmd in ["synth", "refine-graph", "train"] {
        ok(d.path(), &[cmd]);
    }
    // the held-out group (B, most distant treatment) has no training cells
    let out = graphvci(d.path(), &["estimate", "--set", "estimator.strata=[\"B\"]"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empirical-mean"));
    let stdout = ok(d.path(), &["estimate", "--set", "estimator.strata=[\"A\"]"]);
    assert!(stdout.contains("over 2 strata"), "{stdout}");
    let marginals = read(d.path(), "marginals.tsv");
    assert_eq!(data_lines(&marginals), 2 * 2);
    assert!(marginals.lines().skip(1).all(|l| l.contains("cell_type=A")));
}

#[test]
fn override_parsing_and_seed_resolution() {
    let cfg = RunConfig::from_toml(
        "seed = 3\n[training]\nseed = 11\n",
        &[
            "training.control_label=ctrl".into(),
            "refinement.alpha = 0.5".into(),
            "estimator.strata=[\"A,x\"]".into(),
        ],
        None,
        None,
    )
    .unwrap();
    assert_eq!(cfg.training.control_label, "ctrl");
    assert_eq!(cfg.refinement.alpha, 0.5);
    assert_eq!(cfg.training.seed, 11);
    assert_eq!(cfg.synth.seed, graphvci_cli::config::block_seed(3, "synth"));
    assert_eq!(
        cfg.estimator.strata,
        graphvci_cli::config::Strata::List(vec!["A,x".into()])
    );

    let root = RunConfig::from_toml("", &[], Some(4), Some(Path::new("elsewhere"))).unwrap();
    assert_eq!(root.seed, 4);
    assert_eq!(root.paths.output, Path::new("elsewhere"));
    assert_ne!(root.refinement.seed, root.training.seed);

    // the resolved configuration reloads to itself
    let again = RunConfig::from_toml(&cfg.to_toml(), &[], None, None).unwrap();
    assert_eq!(again, cfg);

    for bad in ["nokey", "=3", "a..b=1", "training.max_epochs=-1", "estimator.strata=\"some\""] {
        let e = RunConfig::from_toml("", &[bad.into()], None, None).unwrap_err();
        assert_eq!(exit_code(&e), 2, "{bad}: {e}");
    }
    let e = RunConfig::from_toml("", &["estimator.replicates=3".into()], None, None).unwrap_err();
    assert!(e.to_string().contains("sample_latent"));
}
