use std::sync::Arc;

use graphvci::data::{RelationGraph, SplitAssignment, SplitTag};
use graphvci::nn::{Activation, KeepMask, Mat};
use graphvci::refine::*;
use graphvci::rng;
use graphvci::synth::{generate, SynthConfig};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng as _;

fn uniform(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng::rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

fn random_prior(n: usize, p: f64, seed: u64) -> Mat {
    let mut r = rng::rng(seed);
    Array2::from_shape_fn((n, n), |(i, j)| if i != j && r.random_bool(p) { 1.0 } else { 0.0 })
}

#[test]
fn degenerate_rates_give_prior_or_full_mask() {
    let prior = prior_with_self_loops(&random_prior(12, 0.2, 1));
    let mut r = rng::rng(2);
    assert_eq!(sample_keep_mask(&prior, 0.0, 1.0, &mut r).to_dense(), prior);
    assert_eq!(sample_keep_mask(&prior, 0.0, 0.0, &mut r), KeepMask::full(12));
}

#[test]
fn keep_frequencies_match_binomial() {
    let n = 100;
    let prior = prior_with_self_loops(&random_prior(n, 0.05, 3));
    let mut r = rng::rng(4);
    let mask = sample_keep_mask(&prior, 0.1, 0.99, &mut r);
    let off: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| prior[[i, j]] == 0.0)
        .collect();
    let kept = off.iter().filter(|&&(i, j)| mask.contains(i, j)).count() as f64;
    let m = off.len() as f64;
    let sigma = (m * 0.01 * 0.99).sqrt();
    assert!((kept - 0.01 * m).abs() < 3.0 * sigma, "kept {kept} of {m}");

    // prior entries over repeated draws
    let on: Vec<(usize, usize)> = prior.indexed_iter().filter(|(ij, &e)| e == 1.0 && ij.0 != ij.1).map(|(ij, _)| ij).collect();
    let draws = 200;
    let mut hits = 0usize;
    for _ in 0..draws {
        let mask = sample_keep_mask(&prior, 0.1, 0.99, &mut r);
        hits += on.iter().filter(|&&(i, j)| mask.contains(i, j)).count();
        assert!((0..n).all(|i| mask.contains(i, i)));
    }
    let trials = (draws * on.len()) as f64;
    let sigma = (trials * 0.9 * 0.1).sqrt();
    assert!((hits as f64 - 0.9 * trials).abs() < 3.0 * sigma);
}

#[test]
fn diagonal_drops_only_when_not_forced() {
    let prior = prior_with_self_loops(&Mat::zeros((30, 30)));
    let mut r = rng::rng(5);
    // with everything else dropped, rows fall back to their own entry
    let mask = sample_mask(&prior, 0.5, 1.0, false, &mut r);
    assert!((0..30).all(|i| mask.row(i) == [i]));
    let dropped: usize = (0..200)
        .map(|_| {
            let m = sample_mask(&prior_with_self_loops(&Mat::ones((30, 30))), 0.5, 1.0, false, &mut r);
            (0..30).filter(|&i| !m.contains(i, i)).count()
        })
        .sum();
    let trials = 6000.0;
    assert!((dropped as f64 - 0.5 * trials).abs() < 3.0 * (trials * 0.25f64).sqrt());
}

/// Reads the aggregation weights off by convolving the identity.
fn weights_of(logits: &Mat, mask: &KeepMask) -> Mat {
    let n = logits.nrows();
    masked_softmax_conv(&Mat::eye(n), logits, mask, &Mat::eye(n), Activation::Identity)
}

#[test]
fn softmax_conv_hand_values() {
    let two = KeepMask::from_rows(2, vec![vec![0, 1], vec![1]]);
    let w = weights_of(&array![[0.7, 0.7], [3.0, -1.0]], &two);
    assert_eq!(w, array![[0.5, 0.5], [0.0, 1.0]]);

    let mask = KeepMask::from_rows(3, vec![vec![0, 1], vec![1], vec![2]]);
    let logits = array![[2f64.ln(), 0.0, 50.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
    let w = weights_of(&logits, &mask);
    assert!((w[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
    assert!((w[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(w[[0, 2]], 0.0);
}

#[test]
fn softmax_conv_applies_weights_then_map() {
    let mask = KeepMask::full(3);
    let (h, l, theta) = (uniform(3, 4, 6), uniform(3, 3, 7), uniform(4, 2, 8));
    let w = weights_of(&l, &mask);
    let expected = w.dot(&h).dot(&theta).mapv(f64::tanh);
    let got = masked_softmax_conv(&h, &l, &mask, &theta, Activation::Tanh);
    assert!((&got - &expected).iter().all(|d| d.abs() < 1e-14));
}

#[test]
fn refinement_objective_gradients() {
    for seed in 0..3 {
        let n = 5;
        let cfg = RefinementConfig {
            hidden_width: 3,
            activation: Activation::Tanh,
            init_logit_edge: 0.4,
            init_logit_non_edge: -0.3,
            ..Default::default()
        };
        let prior = random_prior(n, 0.3, seed);
        let mut state = RefinementState::new(&prior, 4, &cfg, &mut rng::rng(seed));
        let id = state.params().id("refine.logits").unwrap();
        *state.params_mut().get_mut(id) += &uniform(n, n, seed + 10);
        let mask = Arc::new(sample_keep_mask(state.prior(), 0.2, 0.6, &mut rng::rng(seed + 20)));
        let inputs = uniform(2 * n, 4, seed + 30);
        let targets = uniform(2 * n, 1, seed + 40);
        let report = state.objective_gradcheck(&inputs, &targets, &mask, 0.7, 0.3, 1e-5);
        assert!(report.worst() < 1e-4, "{:?}", report.per_param);
    }
}

#[test]
fn node_inputs_layout() {
    let y = array![0.5, -1.0];
    let feats = array![[3.0], [4.0]];
    let x = array![1.0, 0.0];
    let o = build_node_inputs(y.view(), &feats, x.view()).unwrap();
    assert_eq!(o, array![[0.5, 3.0, 1.0, 0.0], [-1.0, 4.0, 1.0, 0.0]]);
    // permuting genes permutes rows
    let o2 = build_node_inputs(array![-1.0, 0.5].view(), &array![[4.0], [3.0]], x.view()).unwrap();
    assert_eq!(o2.row(0), o.row(1));
    assert_eq!(o2.row(1), o.row(0));
    let z = build_node_inputs(y.view(), &feats, Array1::zeros(2).view()).unwrap();
    assert!(z.slice(ndarray::s![.., 2..]).iter().all(|&v| v == 0.0));
    assert!(build_node_inputs(y.view(), &array![[1.0]], x.view()).is_err());
}

#[test]
fn objective_hand_values() {
    let w = array![[0.2, 0.6], [0.4, 0.8]];
    assert_eq!(refinement_objective(&array![[1.0, 2.0]], &array![[1.0, 3.0]], &w, 0.0), 1.0);
    let perfect = refinement_objective(&array![[1.0, 2.0]], &array![[1.0, 2.0]], &w, 0.3);
    assert!((perfect - 0.3 * 0.5).abs() < 1e-15);
    // two cells average
    let two = refinement_objective(&array![[0.0, 0.0], [2.0, 0.0]], &array![[0.0, 1.0], [0.0, 0.0]], &w, 0.0);
    assert_eq!(two, 2.5);
}

#[test]
fn rescaling_matches_direct_formula() {
    assert_eq!(rescale_weights(&array![[0.0]])[[0, 0]], 0.5);
    assert!(rescale_weights(&array![[40.0]])[[0, 0]] > 1.0 - 1e-15);
    let l = uniform(6, 6, 9).mapv(|v| 8.0 * v);
    let w = rescale_weights(&l);
    for (a, b) in w.iter().zip(l.iter()) {
        let direct = 1.0 / (1.0 + 1.0 / b.exp());
        assert!((a - direct).abs() < 1e-12);
        assert!(*a > 0.0 && *a < 1.0);
    }
}

#[test]
fn threshold_rule() {
    assert_eq!(threshold_graph(&array![[0.35, 0.2, 0.3]], 0.3), array![[1.0, 0.0, 0.0]]);
    assert_eq!(threshold_graph(&array![[0.25]], 0.2), array![[1.0]]);
}

proptest! {
    #[test]
    fn threshold_is_monotone(vals in proptest::collection::vec(0.0f64..1.0, 16), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let w = Array2::from_shape_vec((4, 4), vals).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let strict = threshold_graph(&w, hi);
        let loose = threshold_graph(&w, lo);
        prop_assert!(strict.iter().zip(loose.iter()).all(|(s, l)| s <= l));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, r_h in 0.0f64..1.0) {
        let prior = prior_with_self_loops(&random_prior(7, 0.3, seed));
        let mask = sample_keep_mask(&prior, 0.0, r_h, &mut rng::rng(seed));
        let w = weights_of(&uniform(7, 7, seed).mapv(|v| 5.0 * v), &mask);
        for (i, row) in w.rows().into_iter().enumerate() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                prop_assert!(mask.contains(i, j) || v == 0.0);
            }
        }
    }
}

#[test]
fn receptive_field_is_prior_plus_self() {
    let n = 6;
    let prior = random_prior(n, 0.25, 11);
    let cfg = RefinementConfig {
        r_l: 0.0,
        r_h: 1.0,
        layers: 1,
        ..Default::default()
    };
    let state = RefinementState::new(&prior, 3, &cfg, &mut rng::rng(12));
    let mask = sample_keep_mask(state.prior(), cfg.r_l, cfg.r_h, &mut rng::rng(13));
    let base = uniform(n, 3, 14);
    let out = state.forward(&base, &mask);
    for j in 0..n {
        let mut poked = base.clone();
        poked.row_mut(j).mapv_inplace(|v| v + 1.0);
        let moved = state.forward(&poked, &mask);
        for i in 0..n {
            let sees = i == j || prior[[i, j]] == 1.0;
            assert_eq!(moved[[0, i]] != out[[0, i]], sees, "node {i} vs input {j}");
        }
    }
}

fn small_problem(seed: u64) -> (graphvci::synth::SyntheticData, SplitAssignment) {
    let data = generate(&SynthConfig {
        n_genes: 12,
        n_cells: 300,
        n_treatments: 3,
        embedding_features: 4,
        seed,
        ..Default::default()
    })
    .unwrap();
    (data, SplitAssignment::all(300, SplitTag::Train))
}

#[test]
fn lasso_shrinks_weights() {
    let (data, split) = small_problem(21);
    let run = |omega| {
        let cfg = RefinementConfig {
            omega,
            epochs: 10,
            seed: 3,
            ..Default::default()
        };
        refine(&data.dataset, &data.prior, &split, &cfg).unwrap().weights.sum()
    };
    let (free, penalized) = (run(0.0), run(50.0));
    assert!(penalized < free, "{penalized} vs {free}");
}

#[test]
fn refinement_is_seeded() {
    let (data, split) = small_problem(22);
    let cfg = RefinementConfig {
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let a = refine(&data.dataset, &data.prior, &split, &cfg).unwrap();
    let b = refine(&data.dataset, &data.prior, &split, &cfg).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.history.len(), 3);
    assert!(a.graph.adjacency().diag().iter().all(|&d| d == 0.0));
    let other = refine(&data.dataset, &data.prior, &split, &RefinementConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.weights, other.weights);
}

#[test]
fn refinement_rejects_mismatched_graph() {
    let (data, split) = small_problem(23);
    let names: Vec<String> = (0..12).map(|i| format!("x{i}")).collect();
    let g = RelationGraph::new(data.prior.node_features().clone(), data.prior.adjacency().clone(), names).unwrap();
    assert!(refine(&data.dataset, &g, &split, &RefinementConfig::default()).is_err());
    let bad = RefinementConfig {
        r_l: 0.5,
        r_h: 0.4,
        ..Default::default()
    };
    assert!(refine(&data.dataset, &data.prior, &split, &bad).is_err());
}

#[test]
fn edge_weight_table() {
    let w = array![[0.9, 0.2, 0.7], [0.4, 0.9, 0.1], [0.3, 0.6, 0.9]];
    let genes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let full = edge_weights_tsv(&w, &genes, None);
    let lines: Vec<&str> = full.lines().collect();
    assert_eq!(lines[0], "source\ttarget\tweight");
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[1], "a\tc\t0.7");
    let top = edge_weights_tsv(&w, &genes, Some(2));
    assert_eq!(top.lines().count(), 3);
    assert_eq!(top.lines().nth(2), Some("c\tb\t0.6"));
}
