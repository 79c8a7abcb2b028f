use graphvci::synth::{generate, SynthConfig};
use ndarray::Axis;

#[test]
fn parent_child_covariance_matches_closed_form() {
    let cfg = SynthConfig {
        n_genes: 2,
        n_cells: 100_000,
        n_treatments: 2,
        covariate_levels: vec![1],
        effect_scale: 0.0,
        edges: Some(vec![(0, 1)]),
        seed: 11,
        ..Default::default()
    };
    let data = generate(&cfg).unwrap();
    let y = data.dataset.outcomes();
    let n = y.nrows() as f64;
    let m = y.mean_axis(Axis(0)).unwrap();
    let (a, b) = (y.column(0).mapv(|v| v - m[0]), y.column(1).mapv(|v| v - m[1]));
    let cov = a.dot(&b) / n;
    let coeff = data.scm.coefficients()[[0, 1]];
    let var_parent = data.scm.noise_scale()[0].powi(2);
    let var_child = data.scm.noise_scale()[1].powi(2) + coeff * coeff * var_parent;
    // standard error of a sample covariance of jointly Gaussian pairs
    let se = ((var_parent * var_child + (coeff * var_parent).powi(2)) / n).sqrt();
    assert!((cov - coeff * var_parent).abs() < 5.0 * se, "cov {cov} expected {}", coeff * var_parent);
}

#[test]
fn closed_form_marginal_matches_monte_carlo() {
    let data = generate(&SynthConfig {
        n_genes: 20,
        n_cells: 10,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let scm = &data.scm;
    let samples = 1_000_000;
    for (a, c) in [(0, 0), (3, 1)] {
        let exact = scm.true_marginal(a, &[c]).unwrap();
        let mc = scm.monte_carlo_marginal(a, &[c], samples, 99).unwrap();
        // per-gene standard deviation under (a, c), from the linear propagation
        // of independent noise: column norms of the total-effect matrix
        let n = scm.n_genes();
        for g in 0..n {
            let mut var = 0.0;
            for src in 0..n {
                let mut unit = ndarray::Array1::zeros(n);
                unit[src] = scm.noise_scale()[src];
                var += scm.propagate(&unit)[g].powi(2);
            }
            let sd = var.sqrt();
            assert!(
                (mc[g] - exact[g]).abs() < 4.0 * sd / 1000.0,
                "gene {g}: mc {} exact {} sd {sd}",
                mc[g],
                exact[g]
            );
        }
        let again = scm.true_marginal(a, &[c]).unwrap();
        assert_eq!(exact, again);
    }
}

#[test]
fn marginal_is_limit_of_pseudobulk() {
    let data = generate(&SynthConfig {
        n_genes: 8,
        n_cells: 60_000,
        n_treatments: 3,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let ds = &data.dataset;
    for t in 0..3 {
        for c in 0..2 {
            let cells: Vec<usize> = (0..ds.n_cells())
                .filter(|&i| ds.treatment_of(i) == t && ds.covariates_of(i)[0] == c)
                .collect();
            let pb = graphvci::data::pseudobulk_cells(ds, &cells).unwrap();
            let exact = data.scm.true_marginal(t, &[c]).unwrap();
            let rows = ds.outcomes().select(Axis(0), &cells);
            let sd = rows.std_axis(Axis(0), 0.0);
            for g in 0..8 {
                let se = sd[g] / (cells.len() as f64).sqrt();
                assert!((pb[g] - exact[g]).abs() < 5.0 * se);
            }
        }
    }
}

#[test]
fn factual_counterfactual_is_identity_and_involution() {
    let data = generate(&SynthConfig {
        n_genes: 15,
        n_cells: 40,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let scm = &data.scm;
    for cell in 0..40 {
        let t = scm.cell_treatment(cell);
        let y = data.dataset.outcome(cell);
        let back = scm.true_counterfactual(cell, t).unwrap();
        for (a, b) in back.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // going to a' and back through the abducted noise returns Y
        let other = (t + 1) % scm.n_treatments();
        let cf = scm.true_counterfactual(cell, other).unwrap();
        let noise = scm.abduct(&cf, scm.cell_covariates(cell), other).unwrap();
        let roundtrip = scm.simulate(scm.cell_covariates(cell), t, &noise).unwrap();
        for (a, b) in roundtrip.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
