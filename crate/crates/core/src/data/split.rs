use rand::seq::SliceRandom;

use super::dataset::ExpressionDataset;
use super::stats::pseudobulk_cells;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Val,
    Ood,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "val" => Some(SplitTag::Val),
            "ood" => Some(SplitTag::Ood),
            _ => None,
        }
    }
}

/// One tag per cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    tags: Vec<SplitTag>,
}

impl SplitAssignment {
    pub fn new(tags: Vec<SplitTag>) -> Self {
        Self { tags }
    }

    pub fn all(n_cells: usize, tag: SplitTag) -> Self {
        Self { tags: vec![tag; n_cells] }
    }

    pub fn tags(&self) -> &[SplitTag] {
        &self.tags
    }

    pub fn tag(&self, cell: usize) -> SplitTag {
        self.tags[cell]
    }

    pub fn cells(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// Euclidean distance between each treatment's pseudobulk and the pseudobulk
/// of every cell not carrying that treatment, indexed by treatment code.
/// Treatments covering every cell get distance zero.
pub fn treatment_distances(ds: &ExpressionDataset) -> Vec<f64> {
    (0..ds.n_treatments())
        .map(|t| {
            let (inside, rest): (Vec<usize>, Vec<usize>) =
                (0..ds.n_cells()).partition(|&i| ds.treatment_of(i) == t);
            match (pseudobulk_cells(ds, &inside), pseudobulk_cells(ds, &rest)) {
                (Some(a), Some(b)) => (&a - &b).mapv(|x| x * x).sum().sqrt(),
                _ => 0.0,
            }
        })
        .collect()
}

/// The `k` treatments whose pseudobulk lies farthest from the rest of the
/// dataset. Ties break towards the lower treatment code.
pub fn most_distant_treatments(ds: &ExpressionDataset, k: usize) -> Result<Vec<usize>> {
    if k > ds.n_treatments() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the {} distinct treatments",
            ds.n_treatments()
        )));
    }
    let dist = treatment_distances(ds);
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Tags as `ood` the cells of one covariate category whose treatment is among
/// the `k` most distant treatments; every other cell is tagged `train`.
pub fn select_ood(ds: &ExpressionDataset, covariate: &str, category: &str, k: usize) -> Result<SplitAssignment> {
    let col = ds
        .covariate_index(covariate)
        .ok_or_else(|| Error::InvalidInput(format!("unknown covariate {covariate:?}")))?;
    let level = ds.covariate_levels()[col]
        .code(category)
        .ok_or_else(|| Error::InvalidInput(format!("covariate {covariate:?} has no category {category:?}")))?;
    let held_out = most_distant_treatments(ds, k)?;
    let tags = (0..ds.n_cells())
        .map(|i| {
            if ds.covariates_of(i)[col] == level && held_out.contains(&ds.treatment_of(i)) {
                SplitTag::Ood
            } else {
                SplitTag::Train
            }
        })
        .collect();
    Ok(SplitAssignment::new(tags))
}

/// Splits every non-OOD cell 4:1 into train and validation, seeded.
pub fn split_train_val(assignment: &SplitAssignment, seed: u64) -> SplitAssignment {
    let mut pool: Vec<usize> = (0..assignment.tags.len())
        .filter(|&i| assignment.tags[i] != SplitTag::Ood)
        .collect();
    let mut r = rng::rng(seed);
    pool.shuffle(&mut r);
    let n_val = (pool.len() + 2) / 5;
    let mut tags = assignment.tags.clone();
    for (pos, &cell) in pool.iter().enumerate() {
        tags[cell] = if pos < n_val { SplitTag::Val } else { SplitTag::Train };
    }
    SplitAssignment::new(tags)
}
