//! Central finite differences, used to verify the tape's adjoints.

use ndarray::Array2;

use super::params::ParamSet;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both are zero.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    relative_error_slices(a.iter(), b.iter())
}

fn relative_error_slices<'a>(
    a: impl Iterator<Item = &'a f64>,
    b: impl Iterator<Item = &'a f64>,
) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() + nb.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Array2<f64>, step: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * step);
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per parameter, by name.
    pub per_param: Vec<(String, f64)>,
    /// Relative error over all parameters concatenated.
    pub overall: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compares `analytic` (one matrix per parameter, in order) against central
/// differences of `f` over every scalar of `params`.
pub fn check_params(
    params: &ParamSet,
    analytic: &[Array2<f64>],
    step: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> GradCheckReport {
    let mut probe = params.clone();
    let mut per_param = Vec::new();
    let mut numeric_all = Vec::new();
    for id in params.ids() {
        let base = params.get(id).clone();
        let num = numeric_grad(&base, step, |x| {
            probe.get_mut(id).assign(x);
            f(&probe)
        });
        probe.get_mut(id).assign(&base);
        per_param.push((params.name(id).to_string(), relative_error(&analytic[id.0], &num)));
        numeric_all.push(num);
    }
    let overall = relative_error_slices(
        analytic.iter().flat_map(|m| m.iter()),
        numeric_all.iter().flat_map(|m| m.iter()),
    );
    GradCheckReport { per_param, overall }
}

/// Checks the tape adjoint of a scalar function of several matrix inputs.
/// Returns the relative error for each input.
pub fn check_tape_fn(
    inputs: &[Array2<f64>],
    step: f64,
    build: impl Fn(&mut super::tape::Tape, &[super::tape::Var]) -> super::tape::Var,
) -> Vec<f64> {
    use super::tape::Tape;
    let eval = |xs: &[Array2<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.scalar(loss)
    };
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let mut probe = inputs.to_vec();
    (0..inputs.len())
        .map(|k| {
            let num = numeric_grad(&inputs[k], step, |x| {
                probe[k].assign(x);
                eval(&probe)
            });
            probe[k].assign(&inputs[k]);
            relative_error(&grads.get(vars[k]), &num)
        })
        .collect()
}
