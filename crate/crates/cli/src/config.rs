//! Run configuration: one TOML file plus `--set section.key=value` overrides.
//!
//! Seeds: the root `seed` is fanned out to every block through
//! `graphvci::rng::derive_seed(root, tag)` with tags `synth`, `model`,
//! `training`, `refinement`, `split` and `estimator`, shifted right one bit
//! so every seed fits a TOML integer. A block whose `seed` key is written
//! explicitly keeps that value instead.

use std::fs;
use std::path::{Path, PathBuf};

use graphvci::model::{ModelConfig, TrainingConfig};
use graphvci::refine::RefinementConfig;
use graphvci::rng::derive_seed;
use graphvci::synth::SynthConfig;
use graphvci::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which graph `train`, `evaluate` and `estimate` feed to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    /// `refined.edges.tsv` in the output directory, written by `refine-graph`.
    #[default]
    Refined,
    /// The input graph as given.
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub output: PathBuf,
    /// Directory holding `expression.tsv`, `covariates.tsv` and
    /// `treatments.tsv`; the output directory when unset.
    pub dataset: Option<PathBuf>,
    /// Defaults to `graph.edges.tsv` in the output directory.
    pub graph_edges: Option<PathBuf>,
    /// Defaults to `graph.features.tsv` in the output directory.
    pub graph_features: Option<PathBuf>,
    pub model_graph: GraphSource,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            dataset: None,
            graph_edges: None,
            graph_features: None,
            model_graph: GraphSource::Refined,
        }
    }
}

impl PathsConfig {
    pub fn dataset_dir(&self) -> &Path {
        self.dataset.as_deref().unwrap_or(&self.output)
    }

    pub fn graph_edges(&self) -> PathBuf {
        self.graph_edges.clone().unwrap_or_else(|| self.output.join("graph.edges.tsv"))
    }

    pub fn graph_features(&self) -> PathBuf {
        self.graph_features.clone().unwrap_or_else(|| self.output.join("graph.features.tsv"))
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.output.join(file)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Covariate whose category is held out.
    pub covariate: String,
    pub category: String,
    /// Number of most distant treatments held out within the category.
    pub k: usize,
    /// Seed of the 4:1 train/val split.
    pub seed: u64,
    /// DE genes per treatment.
    pub de_genes: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            covariate: "cell_type".into(),
            category: "B".into(),
            k: 1,
            seed: 0,
            de_genes: 10,
        }
    }
}

/// `"all"` or a list of covariate tuples written as comma-separated labels in
/// covariate column order, e.g. `["A", "B"]`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "StrataRepr", into = "StrataRepr")]
pub enum Strata {
    #[default]
    All,
    List(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StrataRepr {
    Word(String),
    List(Vec<String>),
}

impl TryFrom<StrataRepr> for Strata {
    type Error = String;

    fn try_from(r: StrataRepr) -> Result<Self, String> {
        match r {
            StrataRepr::Word(w) if w == "all" => Ok(Strata::All),
            StrataRepr::Word(w) => Err(format!("expected \"all\" or a list of strata, found {w:?}")),
            StrataRepr::List(l) => Ok(Strata::List(l)),
        }
    }
}

impl From<Strata> for StrataRepr {
    fn from(s: Strata) -> Self {
        match s {
            Strata::All => StrataRepr::Word("all".into()),
            Strata::List(l) => StrataRepr::List(l),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub strata: Strata,
    /// Draw latents from the encoder instead of using its mean.
    pub sample_latent: bool,
    /// Latent-sampling replicates summarized in `estimator_comparison.csv`.
    pub replicates: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            strata: Strata::All,
            sample_latent: false,
            replicates: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub refinement: RefinementConfig,
    pub split: SplitConfig,
    pub estimator: EstimatorConfig,
    /// Initialization seed of the model; derived from the root seed.
    #[serde(skip)]
    pub model_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            refinement: RefinementConfig::default(),
            split: SplitConfig::default(),
            estimator: EstimatorConfig::default(),
            model_seed: 0,
        };
        cfg.derive_seeds(&[]);
        cfg
    }
}

pub fn block_seed(root: u64, tag: &str) -> u64 {
    derive_seed(root, tag) >> 1
}

const SEEDED_BLOCKS: [&str; 5] = ["synth", "training", "refinement", "split", "estimator"];

impl RunConfig {
    /// Fills every block seed not listed in `explicit` from the root seed.
    fn derive_seeds(&mut self, explicit: &[&str]) {
        let root = self.seed;
        let pick = |block: &str, current: u64| {
            if explicit.contains(&block) {
                current
            } else {
                block_seed(root, block)
            }
        };
        self.synth.seed = pick("synth", self.synth.seed);
        self.training.seed = pick("training", self.training.seed);
        self.refinement.seed = pick("refinement", self.refinement.seed);
        self.split.seed = pick("split", self.split.seed);
        self.estimator.seed = pick("estimator", self.estimator.seed);
        self.model_seed = block_seed(root, "model");
    }

    /// Parses a TOML document, applies overrides, resolves seeds and validates.
    pub fn from_toml(text: &str, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = seed {
            let s = i64::try_from(s).map_err(|_| Error::Config(format!("seed {s} does not fit a TOML integer")))?;
            table.insert("seed".into(), toml::Value::Integer(s));
        }
        let explicit: Vec<&str> = SEEDED_BLOCKS
            .iter()
            .copied()
            .filter(|b| table.get(*b).and_then(|v| v.get("seed")).is_some())
            .collect();
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.derive_seeds(&explicit);
        if let Some(out) = out {
            cfg.paths.output = out.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides, seed, out)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.refinement.validate()?;
        if self.split.k == 0 {
            return Err(Error::Config("split.k must be positive".into()));
        }
        if self.split.de_genes == 0 {
            return Err(Error::Config("split.de_genes must be positive".into()));
        }
        if self.estimator.replicates == 0 {
            return Err(Error::Config("estimator.replicates must be positive".into()));
        }
        if self.estimator.replicates > 1 && !self.estimator.sample_latent {
            return Err(Error::Config(
                "estimator.replicates > 1 gives identical runs unless estimator.sample_latent is set".into(),
            ));
        }
        Ok(())
    }

    /// The resolved configuration, for the record.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Applies `section.key=value`. The value is read as a TOML value and falls
/// back to a plain string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
