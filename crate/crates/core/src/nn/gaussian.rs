//! Closed-form diagonal Gaussian utilities on plain vectors.

use ndarray::{ArrayView1, Array1, Zip};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-variance bounds used by every variance head.
pub const LOGVAR_MIN: f64 = -15.0;
pub const LOGVAR_MAX: f64 = 15.0;

/// `mean + sqrt(variance) ⊙ noise`. Negative or zero variances collapse the
/// sample onto the mean.
pub fn reparam_sample(
    mean: ArrayView1<f64>,
    variance: ArrayView1<f64>,
    noise: ArrayView1<f64>,
) -> Array1<f64> {
    let mut out = mean.to_owned();
    Zip::from(&mut out)
        .and(variance)
        .and(noise)
        .for_each(|o, &v, &e| *o += v.max(0.0).sqrt() * e);
    out
}

/// `KL(N(p_mean, p_var) ‖ N(q_mean, q_var))` for diagonal covariances.
pub fn kl_diag_gaussian(
    p_mean: ArrayView1<f64>,
    p_var: ArrayView1<f64>,
    q_mean: ArrayView1<f64>,
    q_var: ArrayView1<f64>,
) -> f64 {
    let mut kl = 0.0;
    for k in 0..p_mean.len() {
        let d = p_mean[k] - q_mean[k];
        kl += 0.5 * ((q_var[k] / p_var[k]).ln() + (p_var[k] + d * d) / q_var[k] - 1.0);
    }
    kl
}

/// Sum of independent per-dimension Gaussian log-densities.
pub fn gaussian_log_likelihood(
    x: ArrayView1<f64>,
    mean: ArrayView1<f64>,
    variance: ArrayView1<f64>,
) -> f64 {
    let mut acc = 0.0;
    for k in 0..x.len() {
        let d = x[k] - mean[k];
        acc += -0.5 * (LN_2PI + variance[k].ln() + d * d / variance[k]);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn zero_noise_and_zero_variance_give_mean() {
        let m = array![1.0, -2.0];
        assert_eq!(reparam_sample(m.view(), array![3.0, 4.0].view(), array![0.0, 0.0].view()), m);
        assert_eq!(reparam_sample(m.view(), array![0.0, 0.0].view(), array![1.3, -0.7].view()), m);
    }

    #[test]
    fn reparam_sample_mean_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mu, var) = (array![0.7], array![2.5]);
        let draws = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let e: f64 = StandardNormal.sample(&mut rng);
            sum += reparam_sample(mu.view(), var.view(), array![e].view())[0];
        }
        let se = (var[0] / draws as f64).sqrt();
        assert!((sum / draws as f64 - mu[0]).abs() < 4.0 * se);
    }

    #[test]
    fn kl_closed_form_cases() {
        let one = array![1.0];
        assert_eq!(kl_diag_gaussian(one.view(), one.view(), one.view(), one.view()), 0.0);
        let kl = kl_diag_gaussian(array![1.0].view(), one.view(), array![0.0].view(), one.view());
        assert_abs_diff_eq!(kl, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn log_likelihood_at_mode() {
        let ll = gaussian_log_likelihood(array![0.3].view(), array![0.3].view(), array![1.0].view());
        assert_abs_diff_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-15);
    }

    #[test]
    fn log_likelihood_monotone_in_distance() {
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let x = 1.0 + 0.25 * k as f64;
            let ll = gaussian_log_likelihood(array![x].view(), array![1.0].view(), array![0.7].view());
            assert!(ll < last);
            last = ll;
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // midpoint rule over ±12σ
        let (mu, var): (f64, f64) = (0.4, 1.7);
        let sd = var.sqrt();
        let steps = 200_000;
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let h = (hi - lo) / steps as f64;
        let total: f64 = (0..steps)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                gaussian_log_likelihood(array![x].view(), array![mu].view(), array![var].view()).exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }
}
