//! Reverse-mode gradient tape over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; vectors are `1 × k` rows and
//! scalars are `1 × 1`. The operation set is closed and small: exactly what
//! the encoder, decoder and refinement network need. Each op records the
//! inputs it needs for its adjoint, and [`Tape::backward`] walks the node list
//! in reverse, accumulating gradients for every node.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use super::mask::KeepMask;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Constant left factor: `A · x`.
    ConstLeftMul(Arc<Mat>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (r×c) + row (1×c)`, the row broadcast over every row of `a`.
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    MeanRows(Var),
    /// Column-wise max; stores the winning row of every column.
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Reparam {
        mean: Var,
        logvar: Var,
        noise: Mat,
    },
    GaussianLogLik {
        x: Var,
        mean: Var,
        logvar: Var,
    },
    KlDiag {
        p_mean: Var,
        p_logvar: Var,
        q_mean: Var,
        q_logvar: Var,
    },
    Attention {
        query: Var,
        key: Option<Var>,
        values: Var,
        eq: Mat,
        ek: Mat,
        den: Mat,
    },
    MaskedSoftmaxAgg {
        logits: Var,
        mask: Arc<KeepMask>,
        x: Var,
        weights: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Mat {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Mat::zeros(self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Leaf node: parameters and constant inputs alike.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn const_left_mul(&mut self, a: Arc<Mat>, x: Var) -> Var {
        let out = a.dot(self.value(x));
        self.push(out, Op::ConstLeftMul(a, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×c row");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "broadcast_rows expects a 1×c row");
        let out = r
            .broadcast((rows, r.ncols()))
            .expect("row broadcast")
            .to_owned();
        self.push(out, Op::BroadcastRows(row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Logistic function `1 / (1 + e^{-x})`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(logistic);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let mut arg = Vec::with_capacity(val.ncols());
        let mut out = Mat::zeros((1, val.ncols()));
        for (j, col) in val.axis_iter(Axis(1)).enumerate() {
            let (best, m) = col
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
            arg.push(best);
            out[[0, j]] = m;
        }
        self.push(out, Op::MaxRows(a, arg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), s), Op::Sum(a))
    }

    /// `mean + exp(logvar / 2) ⊙ noise`.
    pub fn reparam(&mut self, mean: Var, logvar: Var, noise: Mat) -> Var {
        let out = self.value(mean) + &(self.value(logvar).mapv(|lv| (0.5 * lv).exp()) * &noise);
        self.push(out, Op::Reparam { mean, logvar, noise })
    }

    /// Per-row diagonal Gaussian log-density (`r × 1`). `logvar` may be a
    /// single row shared by every row of `x`.
    pub fn gaussian_log_lik(&mut self, x: Var, mean: Var, logvar: Var) -> Var {
        let (xv, mv, lv) = (self.value(x), self.value(mean), self.value(logvar));
        assert_eq!(xv.dim(), mv.dim(), "gaussian_log_lik: x/mean shape mismatch");
        let lvb = lv.broadcast(xv.dim()).expect("gaussian_log_lik: logvar shape");
        let mut out = Mat::zeros((xv.nrows(), 1));
        for r in 0..xv.nrows() {
            let mut acc = 0.0;
            for c in 0..xv.ncols() {
                let l = lvb[[r, c]];
                let d = xv[[r, c]] - mv[[r, c]];
                acc += -0.5 * (LN_2PI + l + d * d * (-l).exp());
            }
            out[[r, 0]] = acc;
        }
        self.push(out, Op::GaussianLogLik { x, mean, logvar })
    }

    /// Per-row `KL(p ‖ q)` between diagonal Gaussians (`r × 1`).
    pub fn kl_diag(&mut self, p_mean: Var, p_logvar: Var, q_mean: Var, q_logvar: Var) -> Var {
        let (pm, plv, qm, qlv) = (
            self.value(p_mean),
            self.value(p_logvar),
            self.value(q_mean),
            self.value(q_logvar),
        );
        let mut out = Mat::zeros((pm.nrows(), 1));
        for r in 0..pm.nrows() {
            let mut acc = 0.0;
            for c in 0..pm.ncols() {
                let d = pm[[r, c]] - qm[[r, c]];
                acc += 0.5
                    * (qlv[[r, c]] - plv[[r, c]] + (plv[[r, c]] - qlv[[r, c]]).exp()
                        + d * d * (-qlv[[r, c]]).exp()
                        - 1.0);
            }
            out[[r, 0]] = acc;
        }
        self.push(
            out,
            Op::KlDiag {
                p_mean,
                p_logvar,
                q_mean,
                q_logvar,
            },
        )
    }

    /// Feature-dimension attention readout.
    ///
    /// `query` holds per-node logits (`n × d`), `key` optional per-row logits
    /// (`b × d`), `values` the per-row value vectors (`b × d`). Output entry
    /// `(b, i)` is `Σ_k w[b,i,k] · values[b,k]` with
    /// `w[b,i,·] = softmax(query[i,·] + key[b,·])`.
    pub fn attention(&mut self, query: Var, key: Option<Var>, values: Var) -> Var {
        let q = self.value(query);
        let y = self.value(values);
        let (b, d) = y.dim();
        assert_eq!(q.ncols(), d, "attention: query/value width mismatch");
        let eq = row_softmax_numerators(q);
        let ek = match key {
            Some(k) => {
                assert_eq!(self.value(k).dim(), (b, d), "attention: key shape");
                row_softmax_numerators(self.value(k))
            }
            None => Mat::ones((b, d)),
        };
        let den = ek.dot(&eq.t()).mapv(|x| x.max(f64::MIN_POSITIVE));
        let num = (&ek * y).dot(&eq.t());
        let out = num / &den;
        self.push(
            out,
            Op::Attention {
                query,
                key,
                values,
                eq,
                ek,
                den,
            },
        )
    }

    /// Row-softmax over the kept entries of `logits`, applied block-wise to
    /// `x`. `x` stacks `blocks` node matrices of `n` rows each; every block is
    /// aggregated with the same sparse weight matrix.
    pub fn masked_softmax_agg(&mut self, logits: Var, mask: Arc<KeepMask>, x: Var) -> Var {
        let l = self.value(logits);
        let xv = self.value(x);
        let n = mask.n();
        assert_eq!(l.dim(), (n, n), "masked_softmax_agg: logits shape");
        assert_eq!(xv.nrows() % n, 0, "masked_softmax_agg: rows not a multiple of n");
        let weights = mask.row_softmax(l);
        let blocks = xv.nrows() / n;
        let mut out = Mat::zeros(xv.dim());
        for blk in 0..blocks {
            let base = blk * n;
            for i in 0..n {
                let mut row = out.row_mut(base + i);
                for (&j, &w) in mask.row(i).iter().zip(&weights[i]) {
                    row.scaled_add(w, &xv.row(base + j));
                }
            }
        }
        self.push(
            out,
            Op::MaskedSoftmaxAgg {
                logits,
                mask,
                x,
                weights,
            },
        )
    }

    /// Reverse pass from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.dim()).collect();
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::ConstLeftMul(a, x) => accumulate(grads, *x, a.t().dot(g)),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * val(*b));
                accumulate(grads, *b, g * val(*a));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::BroadcastRows(row) => {
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &t| *d *= 1.0 - t * t);
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &s| *d *= s * (1.0 - s));
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, g * &node.value),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    accumulate(grads, p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SumRows(a) => {
                let shape = val(*a).dim();
                accumulate(grads, *a, g.broadcast(shape).unwrap().to_owned());
            }
            Op::MeanRows(a) => {
                let shape = val(*a).dim();
                let k = 1.0 / shape.0 as f64;
                accumulate(grads, *a, g.broadcast(shape).unwrap().mapv(|x| x * k));
            }
            Op::MaxRows(a, arg) => {
                let mut d = Mat::zeros(val(*a).dim());
                for (j, &i) in arg.iter().enumerate() {
                    d[[i, j]] = g[[0, j]];
                }
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let shape = val(*a).dim();
                accumulate(grads, *a, Mat::from_elem(shape, g[[0, 0]]));
            }
            Op::Reparam { mean, logvar, noise } => {
                accumulate(grads, *mean, g.clone());
                let std_noise = val(*logvar).mapv(|lv| 0.5 * (0.5 * lv).exp()) * noise;
                accumulate(grads, *logvar, g * &std_noise);
            }
            Op::GaussianLogLik { x, mean, logvar } => {
                let (xv, mv, lv) = (val(*x), val(*mean), val(*logvar));
                let lvb = lv.broadcast(xv.dim()).unwrap();
                let mut gx = Mat::zeros(xv.dim());
                let mut glv_full = Mat::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let gr = g[[r, 0]];
                    for c in 0..xv.ncols() {
                        let prec = (-lvb[[r, c]]).exp();
                        let d = xv[[r, c]] - mv[[r, c]];
                        gx[[r, c]] = -gr * d * prec;
                        glv_full[[r, c]] = gr * 0.5 * (d * d * prec - 1.0);
                    }
                }
                accumulate(grads, *mean, -&gx);
                accumulate(grads, *x, gx);
                if lv.nrows() == 1 && xv.nrows() != 1 {
                    accumulate(grads, *logvar, glv_full.sum_axis(Axis(0)).insert_axis(Axis(0)));
                } else {
                    accumulate(grads, *logvar, glv_full);
                }
            }
            Op::KlDiag {
                p_mean,
                p_logvar,
                q_mean,
                q_logvar,
            } => {
                let (pm, plv, qm, qlv) = (val(*p_mean), val(*p_logvar), val(*q_mean), val(*q_logvar));
                let shape = pm.dim();
                let mut gpm = Mat::zeros(shape);
                let mut gplv = Mat::zeros(shape);
                let mut gqlv = Mat::zeros(shape);
                for r in 0..shape.0 {
                    let gr = g[[r, 0]];
                    for c in 0..shape.1 {
                        let d = pm[[r, c]] - qm[[r, c]];
                        let qprec = (-qlv[[r, c]]).exp();
                        let ratio = (plv[[r, c]] - qlv[[r, c]]).exp();
                        gpm[[r, c]] = gr * d * qprec;
                        gplv[[r, c]] = gr * 0.5 * (ratio - 1.0);
                        gqlv[[r, c]] = gr * 0.5 * (1.0 - ratio - d * d * qprec);
                    }
                }
                accumulate(grads, *q_mean, -&gpm);
                accumulate(grads, *p_mean, gpm);
                accumulate(grads, *p_logvar, gplv);
                accumulate(grads, *q_logvar, gqlv);
            }
            Op::Attention {
                query,
                key,
                values,
                eq,
                ek,
                den,
            } => {
                let y = val(*values);
                let out = &node.value;
                let gs = g / den;
                let gso = &gs * out;
                let p = gs.dot(eq);
                let r = gso.dot(eq);
                accumulate(grads, *values, ek * &p);
                if let Some(k) = key {
                    accumulate(grads, *k, ek * &(y * &p - &r));
                }
                let eky = ek * y;
                let gq = eq * &(gs.t().dot(&eky) - gso.t().dot(ek));
                accumulate(grads, *query, gq);
            }
            Op::MaskedSoftmaxAgg {
                logits,
                mask,
                x,
                weights,
            } => {
                let xv = val(*x);
                let n = mask.n();
                let blocks = xv.nrows() / n;
                let mut gx = Mat::zeros(xv.dim());
                let mut gl = Mat::zeros((n, n));
                for i in 0..n {
                    let cols = mask.row(i);
                    let w = &weights[i];
                    let mut s = vec![0.0; cols.len()];
                    for blk in 0..blocks {
                        let base = blk * n;
                        let gi = g.row(base + i);
                        for (t, &j) in cols.iter().enumerate() {
                            s[t] += gi.dot(&xv.row(base + j));
                            gx.row_mut(base + j).scaled_add(w[t], &gi);
                        }
                    }
                    let avg: f64 = w.iter().zip(&s).map(|(w, s)| w * s).sum();
                    for (t, &j) in cols.iter().enumerate() {
                        gl[[i, j]] = w[t] * (s[t] - avg);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *logits, gl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// `exp(x - rowmax(x))`, the unnormalized softmax numerators of every row.
fn row_softmax_numerators(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
    }
    out
}
