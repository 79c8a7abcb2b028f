use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

/// Coefficient of determination `1 − SS_res / SS_tot`; NaN when the truth is
/// constant.
pub fn r_squared(truth: ArrayView1<f64>, pred: ArrayView1<f64>) -> f64 {
    assert_eq!(truth.len(), pred.len(), "r_squared length mismatch");
    let n = truth.len() as f64;
    let mean = truth.sum() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    if ss_tot == 0.0 {
        f64::NAN
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Mean of the finite entries; NaN if there are none.
pub fn finite_mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// Population standard deviation of the finite entries.
pub fn finite_std(values: &[f64]) -> f64 {
    let m = finite_mean(values);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return f64::NAN;
    }
    (finite.iter().map(|v| (v - m).powi(2)).sum::<f64>() / finite.len() as f64).sqrt()
}

/// Average precision, `Σ_k (R_k − R_{k−1}) P_k` over descending score
/// thresholds. Tied scores enter together. NaN without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "average_precision length mismatch");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            seen += 1;
            tp += labels[order[k]] as usize;
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    ap
}

/// Average precision of a dense score matrix against a binary adjacency,
/// over off-diagonal pairs only.
pub fn edge_auprc(scores: ArrayView2<f64>, truth: ArrayView2<f64>) -> f64 {
    let n = scores.nrows();
    let mut s = Vec::with_capacity(n * n);
    let mut l = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s.push(scores[[i, j]]);
                l.push(truth[[i, j]] != 0.0);
            }
        }
    }
    average_precision(&s, &l)
}

/// Absolute Pearson correlation between gene columns; constant genes get 0.
pub fn abs_correlation(outcomes: ArrayView2<f64>) -> Array2<f64> {
    let n_cells = outcomes.nrows() as f64;
    let centered = &outcomes - &outcomes.mean_axis(Axis(0)).expect("nonempty");
    let cov = centered.t().dot(&centered) / n_cells;
    let sd = cov.diag().mapv(f64::sqrt);
    let g = cov.nrows();
    Array2::from_shape_fn((g, g), |(i, j)| {
        let d = sd[i] * sd[j];
        if d > 0.0 {
            (cov[[i, j]] / d).abs()
        } else {
            0.0
        }
    })
}
