use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Level list of one categorical variable, ordered by first occurrence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Levels {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Levels {
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate level {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// Enumerates levels in first-occurrence order and codes every value.
    pub fn encode<'a>(values: impl IntoIterator<Item = &'a str>) -> (Self, Vec<usize>) {
        let mut labels = Vec::new();
        let mut index = HashMap::new();
        let codes = values
            .into_iter()
            .map(|v| {
                *index.entry(v.to_string()).or_insert_with(|| {
                    labels.push(v.to_string());
                    labels.len() - 1
                })
            })
            .collect();
        (Self { labels, index }, codes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, code: usize) -> &str {
        &self.labels[code]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn code(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Per-cell outcomes with categorical covariates and a treatment label.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionDataset {
    outcomes: Array2<f64>,
    gene_names: Vec<String>,
    covariate_names: Vec<String>,
    covariate_levels: Vec<Levels>,
    /// `cells × covariates` level codes.
    covariate_codes: Vec<Vec<usize>>,
    treatment_levels: Levels,
    treatment_codes: Vec<usize>,
}

impl ExpressionDataset {
    /// Builds a dataset from string labels; level order follows first occurrence.
    pub fn from_labels(
        outcomes: Array2<f64>,
        gene_names: Vec<String>,
        covariate_names: Vec<String>,
        covariate_labels: &[Vec<String>],
        treatment_labels: &[String],
    ) -> Result<Self> {
        let cells = outcomes.nrows();
        if covariate_labels.len() != cells || treatment_labels.len() != cells {
            return Err(Error::DimensionMismatch(format!(
                "{cells} expression rows, {} covariate rows, {} treatment rows",
                covariate_labels.len(),
                treatment_labels.len()
            )));
        }
        let k = covariate_names.len();
        if let Some(bad) = covariate_labels.iter().position(|r| r.len() != k) {
            return Err(Error::DimensionMismatch(format!(
                "cell {bad} has {} covariate labels, expected {k}",
                covariate_labels[bad].len()
            )));
        }
        let mut covariate_levels = Vec::with_capacity(k);
        let mut columns = Vec::with_capacity(k);
        for j in 0..k {
            let (levels, codes) = Levels::encode(covariate_labels.iter().map(|r| r[j].as_str()));
            covariate_levels.push(levels);
            columns.push(codes);
        }
        let covariate_codes = (0..cells).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
        let (treatment_levels, treatment_codes) = Levels::encode(treatment_labels.iter().map(String::as_str));
        Self::from_parts(
            outcomes,
            gene_names,
            covariate_names,
            covariate_levels,
            covariate_codes,
            treatment_levels,
            treatment_codes,
        )
    }

    /// Builds a dataset from pre-enumerated levels and codes.
    pub fn from_parts(
        outcomes: Array2<f64>,
        gene_names: Vec<String>,
        covariate_names: Vec<String>,
        covariate_levels: Vec<Levels>,
        covariate_codes: Vec<Vec<usize>>,
        treatment_levels: Levels,
        treatment_codes: Vec<usize>,
    ) -> Result<Self> {
        let (cells, genes) = outcomes.dim();
        if gene_names.len() != genes {
            return Err(Error::DimensionMismatch(format!(
                "{} gene names for {genes} outcome columns",
                gene_names.len()
            )));
        }
        if covariate_codes.len() != cells || treatment_codes.len() != cells {
            return Err(Error::DimensionMismatch("per-cell label count differs from cell count".into()));
        }
        if covariate_levels.len() != covariate_names.len() {
            return Err(Error::DimensionMismatch("covariate level lists vs names".into()));
        }
        for (i, row) in covariate_codes.iter().enumerate() {
            if row.len() != covariate_levels.len() || row.iter().zip(&covariate_levels).any(|(&c, l)| c >= l.len()) {
                return Err(Error::InvalidInput(format!("cell {i}: invalid covariate codes")));
            }
        }
        if treatment_codes.iter().any(|&t| t >= treatment_levels.len()) {
            return Err(Error::InvalidInput("invalid treatment code".into()));
        }
        if let Some(((r, c), v)) = outcomes.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite outcome {v} at cell {r}, gene {c}")));
        }
        Ok(Self {
            outcomes,
            gene_names,
            covariate_names,
            covariate_levels,
            covariate_codes,
            treatment_levels,
            treatment_codes,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn outcomes(&self) -> &Array2<f64> {
        &self.outcomes
    }

    pub fn outcome(&self, cell: usize) -> ArrayView1<'_, f64> {
        self.outcomes.row(cell)
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_levels(&self) -> &[Levels] {
        &self.covariate_levels
    }

    pub fn covariates_of(&self, cell: usize) -> &[usize] {
        &self.covariate_codes[cell]
    }

    pub fn treatment_levels(&self) -> &Levels {
        &self.treatment_levels
    }

    pub fn treatment_of(&self, cell: usize) -> usize {
        self.treatment_codes[cell]
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatment_codes
    }

    pub fn n_treatments(&self) -> usize {
        self.treatment_levels.len()
    }

    /// Total width of the concatenated covariate one-hot blocks.
    pub fn covariate_dim(&self) -> usize {
        self.covariate_levels.iter().map(Levels::len).sum()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Human-readable covariate tuple, e.g. `cell_type=A,donor=d2`.
    pub fn covariate_label(&self, codes: &[usize]) -> String {
        self.covariate_names
            .iter()
            .zip(codes)
            .zip(&self.covariate_levels)
            .map(|((n, &c), l)| format!("{n}={}", l.label(c)))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Covariate codes from labels (one per covariate, in column order).
    pub fn covariate_codes_for(&self, labels: &[&str]) -> Result<Vec<usize>> {
        if labels.len() != self.covariate_levels.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} covariate labels, got {}",
                self.covariate_levels.len(),
                labels.len()
            )));
        }
        labels
            .iter()
            .zip(&self.covariate_levels)
            .map(|(l, lv)| lv.code(l).ok_or_else(|| Error::InvalidInput(format!("unknown covariate level {l:?}"))))
            .collect()
    }

    /// Concatenated one-hot covariate blocks, one block per covariate.
    pub fn encode_covariates(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_cells(), self.covariate_dim()));
        for (i, codes) in self.covariate_codes.iter().enumerate() {
            let mut offset = 0;
            for (&c, levels) in codes.iter().zip(&self.covariate_levels) {
                out[[i, offset + c]] = 1.0;
                offset += levels.len();
            }
        }
        out
    }

    /// One-hot encoding of a covariate tuple.
    pub fn one_hot_covariates(&self, codes: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.covariate_dim()];
        let mut offset = 0;
        for (&c, levels) in codes.iter().zip(&self.covariate_levels) {
            out[offset + c] = 1.0;
            offset += levels.len();
        }
        out
    }

    /// Inverse of [`Self::encode_covariates`] for one row.
    pub fn decode_covariates(&self, one_hot: ArrayView1<f64>) -> Option<Vec<usize>> {
        let mut offset = 0;
        let mut codes = Vec::with_capacity(self.covariate_levels.len());
        for levels in &self.covariate_levels {
            let block = one_hot.slice(ndarray::s![offset..offset + levels.len()]);
            let hot: Vec<usize> = block.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
            if hot.len() != 1 || block.iter().any(|&v| v != 0.0 && v != 1.0) {
                return None;
            }
            codes.push(hot[0]);
            offset += levels.len();
        }
        Some(codes)
    }

    pub fn encode_treatments(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_cells(), self.n_treatments()));
        for (i, &t) in self.treatment_codes.iter().enumerate() {
            out[[i, t]] = 1.0;
        }
        out
    }

    /// Cells whose covariate tuple equals `codes`.
    pub fn cells_with_covariates(&self, codes: &[usize]) -> Vec<usize> {
        (0..self.n_cells()).filter(|&i| self.covariate_codes[i] == codes).collect()
    }

    /// Distinct covariate tuples in first-occurrence order.
    pub fn covariate_tuples(&self) -> Vec<Vec<usize>> {
        let mut seen = Vec::<Vec<usize>>::new();
        for codes in &self.covariate_codes {
            if !seen.contains(codes) {
                seen.push(codes.clone());
            }
        }
        seen
    }

    /// Dataset restricted to a list of genes, in the given order.
    pub fn select_genes(&self, genes: &[usize]) -> Self {
        let mut out = self.clone();
        out.outcomes = self.outcomes.select(ndarray::Axis(1), genes);
        out.gene_names = genes.iter().map(|&g| self.gene_names[g].clone()).collect();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn fixture() -> ExpressionDataset {
        ExpressionDataset::from_labels(
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            strings(&["g1", "g2"]),
            strings(&["c1", "c2"]),
            &[strings(&["A", "Z"]), strings(&["B", "X"]), strings(&["A", "Y"])],
            &strings(&["ctrl", "drug", "ctrl"]),
        )
        .unwrap()
    }

    #[test]
    fn covariate_one_hot_blocks() {
        let ds = fixture();
        // levels: c1 {A,B}, c2 {Z,X,Y} in first-occurrence order
        let enc = ds.encode_covariates();
        assert_eq!(enc.ncols(), 5);
        assert_eq!(enc.row(0).to_vec(), vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(enc.row(2).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert_eq!(ds.decode_covariates(enc.row(i)).unwrap(), ds.covariates_of(i));
        }
    }

    #[test]
    fn single_level_is_all_ones_column() {
        let ds = ExpressionDataset::from_labels(
            Array2::zeros((4, 1)),
            strings(&["g"]),
            strings(&["only"]),
            &vec![strings(&["L"]); 4],
            &strings(&["a", "b", "a", "b"]),
        )
        .unwrap();
        assert_eq!(ds.encode_covariates(), Array2::<f64>::ones((4, 1)));
    }

    #[test]
    fn permuting_rows_permutes_encoding() {
        let ds = fixture();
        let perm = [2usize, 0, 1];
        let labels = [strings(&["A", "Z"]), strings(&["B", "X"]), strings(&["A", "Y"])];
        let permuted = ExpressionDataset::from_labels(
            ds.outcomes().select(ndarray::Axis(0), &perm),
            strings(&["g1", "g2"]),
            strings(&["c1", "c2"]),
            &perm.iter().map(|&p| labels[p].clone()).collect::<Vec<_>>(),
            &perm.iter().map(|&p| ["ctrl", "drug", "ctrl"][p].to_string()).collect::<Vec<_>>(),
        )
        .unwrap();
        // decode with each dataset's own levels; the label tuples must follow the permutation
        for (new_row, &old_row) in perm.iter().enumerate() {
            let a = permuted.covariate_label(permuted.covariates_of(new_row));
            let b = ds.covariate_label(ds.covariates_of(old_row));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_mismatch_and_non_finite() {
        let err = ExpressionDataset::from_labels(
            array![[1.0], [2.0], [3.0]],
            strings(&["g"]),
            vec![],
            &[vec![], vec![]],
            &strings(&["a", "b"]),
        );
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
        let err = ExpressionDataset::from_labels(
            array![[1.0], [f64::NAN]],
            strings(&["g"]),
            vec![],
            &[vec![], vec![]],
            &strings(&["a", "b"]),
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
