use ndarray::Array2;

use crate::error::{Error, Result};

/// Node features plus a directed binary adjacency (rows are source nodes).
#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph {
    node_features: Array2<f64>,
    adjacency: Array2<f64>,
    gene_names: Vec<String>,
}

impl RelationGraph {
    pub fn new(node_features: Array2<f64>, adjacency: Array2<f64>, gene_names: Vec<String>) -> Result<Self> {
        let n = gene_names.len();
        if node_features.nrows() != n || adjacency.dim() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "graph over {n} genes has {} feature rows and a {:?} adjacency",
                node_features.nrows(),
                adjacency.dim()
            )));
        }
        if adjacency.iter().any(|&a| a != 0.0 && a != 1.0) {
            return Err(Error::InvalidInput("adjacency entries must be 0 or 1".into()));
        }
        if node_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite node feature".into()));
        }
        Ok(Self {
            node_features,
            adjacency,
            gene_names,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    /// `(source, target)` pairs in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .indexed_iter()
            .filter(|(_, &a)| a != 0.0)
            .map(|(ij, _)| ij)
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a != 0.0).count()
    }

    /// Same nodes and features, different adjacency.
    pub fn with_adjacency(&self, adjacency: Array2<f64>) -> Result<Self> {
        Self::new(self.node_features.clone(), adjacency, self.gene_names.clone())
    }

    /// Checks that the graph nodes match a dataset's genes, in order.
    pub fn check_genes(&self, genes: &[String]) -> Result<()> {
        if self.gene_names != genes {
            return Err(Error::InvalidInput(
                "gene-set mismatch between dataset and graph".into(),
            ));
        }
        Ok(())
    }
}
