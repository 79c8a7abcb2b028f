use ndarray::Array2;

/// Sparse binary mask stored row-wise: `row(i)` lists the kept columns of
/// row `i` in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepMask {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl KeepMask {
    /// Builds a mask from per-row column lists. Columns are sorted and deduplicated.
    pub fn from_rows(n: usize, rows: Vec<Vec<usize>>) -> Self {
        assert_eq!(rows.len(), n, "KeepMask: expected {n} rows");
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            assert!(r.iter().all(|&j| j < n), "KeepMask: column out of range");
            indices.extend(r);
            indptr.push(indices.len());
        }
        Self { n, indptr, indices }
    }

    pub fn from_dense(m: &Array2<f64>) -> Self {
        let n = m.nrows();
        let rows = (0..n)
            .map(|i| (0..n).filter(|&j| m[[i, j]] != 0.0).collect())
            .collect();
        Self::from_rows(n, rows)
    }

    pub fn full(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|_| (0..n).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for &j in self.row(i) {
                m[[i, j]] = 1.0;
            }
        }
        m
    }

    /// Softmax of `logits` over the kept entries of each row. Masked entries
    /// take no part in the normalization. Empty rows yield empty weight lists.
    pub fn row_softmax(&self, logits: &Array2<f64>) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let cols = self.row(i);
                let m = cols
                    .iter()
                    .map(|&j| logits[[i, j]])
                    .fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = cols.iter().map(|&j| (logits[[i, j]] - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }
}
