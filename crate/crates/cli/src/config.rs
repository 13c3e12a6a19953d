//! TOML experiment specification.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use concept_embed::maskgen::Concept;
use concept_embed::skeleton::SizeCategory;
use concept_embed::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Image subsets a model can be trained or tested on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryFilter {
    All,
    Far,
    Middle,
    Close,
}

impl CategoryFilter {
    pub const EVERY: [CategoryFilter; 4] = [
        CategoryFilter::All,
        CategoryFilter::Far,
        CategoryFilter::Middle,
        CategoryFilter::Close,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CategoryFilter::All => "all",
            CategoryFilter::Far => "far",
            CategoryFilter::Middle => "middle",
            CategoryFilter::Close => "close",
        }
    }

    pub fn size_category(self) -> Option<SizeCategory> {
        match self {
            CategoryFilter::All => None,
            CategoryFilter::Far => Some(SizeCategory::Far),
            CategoryFilter::Middle => Some(SizeCategory::Middle),
            CategoryFilter::Close => Some(SizeCategory::Close),
        }
    }

    /// `membership` is the single size category shared by every
    /// known-size person of an image, if there is one.
    pub fn admits(self, membership: Option<SizeCategory>) -> bool {
        match self.size_category() {
            None => true,
            Some(c) => membership == Some(c),
        }
    }
}

impl fmt::Display for CategoryFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CategoryFilter {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::EVERY
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown category `{s}` (all, far, middle, close)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    #[serde(rename = "fixed_1x1")]
    Fixed1x1,
    Adaptive,
}

impl KernelMode {
    pub fn name(self) -> &'static str {
        match self {
            KernelMode::Fixed1x1 => "fixed_1x1",
            KernelMode::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for KernelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelMode {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        [KernelMode::Fixed1x1, KernelMode::Adaptive]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown kernel mode `{s}` (fixed_1x1, adaptive)")))
    }
}

/// One cached layer of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub net: String,
    pub layer: String,
    pub cache: PathBuf,
}

impl LayerSpec {
    /// File-name-safe `<net>__<layer>`.
    pub fn slug(&self) -> String {
        format!("{}__{}", slug(&self.net), slug(&self.layer))
    }
}

pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn default_categories() -> Vec<CategoryFilter> {
    vec![CategoryFilter::All]
}

fn default_kernel_modes() -> Vec<KernelMode> {
    vec![KernelMode::Fixed1x1]
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    pub annotations: PathBuf,
    /// Letterboxed square side the activations were computed at.
    pub target_side: usize,
    pub concepts: Vec<Concept>,
    #[serde(default = "default_categories")]
    pub categories: Vec<CategoryFilter>,
    #[serde(default = "default_kernel_modes")]
    pub kernel_modes: Vec<KernelMode>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

impl ExperimentSpec {
    /// Parses a TOML spec; relative paths are resolved against the directory
    /// holding the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut spec: ExperimentSpec = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut spec.output_dir);
        resolve(&mut spec.annotations);
        for layer in &mut spec.layers {
            resolve(&mut layer.cache);
        }
        spec.validate().map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.target_side == 0 {
            return Err("target_side must be positive".into());
        }
        if self.concepts.is_empty() {
            return Err("at least one concept is required".into());
        }
        if self.categories.is_empty() {
            return Err("at least one size category is required".into());
        }
        if self.kernel_modes.is_empty() {
            return Err("at least one kernel mode is required".into());
        }
        if self.folds < 2 {
            return Err("cross-validation needs at least 2 folds".into());
        }
        for (i, a) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|b| b.slug() == a.slug()) {
                return Err(format!("layer {}/{} is listed twice", a.net, a.layer));
            }
        }
        self.train.validate().map_err(|e| e.to_string())
    }
}

/// Command-line overrides applied on top of a loaded spec.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub folds: Option<usize>,
    pub concepts: Vec<Concept>,
    pub layers: Vec<String>,
    pub categories: Vec<CategoryFilter>,
    pub kernel_modes: Vec<KernelMode>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) -> CliResult<()> {
        if let Some(out) = &self.output_dir {
            spec.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.train.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            spec.train.max_epochs = epochs;
        }
        if let Some(lr) = self.learning_rate {
            spec.train.learning_rate = lr;
        }
        if let Some(bs) = self.batch_size {
            spec.train.batch_size = bs;
        }
        if let Some(folds) = self.folds {
            spec.folds = folds;
        }
        if !self.concepts.is_empty() {
            spec.concepts = self.concepts.clone();
        }
        if !self.categories.is_empty() {
            spec.categories = self.categories.clone();
        }
        if !self.kernel_modes.is_empty() {
            spec.kernel_modes = self.kernel_modes.clone();
        }
        if !self.layers.is_empty() {
            for wanted in &self.layers {
                if !spec.layers.iter().any(|l| &l.layer == wanted) {
                    return Err(CliError::Usage(format!("layer `{wanted}` is not in the config")));
                }
            }
            spec.layers.retain(|l| self.layers.contains(&l.layer));
        }
        spec.validate().map_err(CliError::Usage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
output_dir = "out"
annotations = "ann.jsonl"
target_side = 224
concepts = ["leg", "arm"]
categories = ["all", "far"]
kernel_modes = ["fixed_1x1", "adaptive"]

[train]
loss = "dice"
max_epochs = 3

[[layers]]
net = "alexnet"
layer = "alexnet/features.4"
cache = "cache/a4"
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.toml");
        fs::write(&path, SPEC).unwrap();
        let spec = ExperimentSpec::load(&path).unwrap();
        assert_eq!(spec.output_dir, dir.path().join("out"));
        assert_eq!(spec.layers[0].cache, dir.path().join("cache/a4"));
        assert_eq!(spec.folds, 5);
        assert_eq!(spec.train.max_epochs, 3);
        assert_eq!(spec.train.batch_size, 8);
        assert_eq!(spec.layers[0].slug(), "alexnet__alexnet_features.4");
    }

    #[test]
    fn rejects_unknown_category() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.toml");
        fs::write(&path, SPEC.replace("\"far\"", "\"very_close\"")).unwrap();
        let err = ExperimentSpec::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn overrides_restrict_and_replace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.toml");
        fs::write(&path, SPEC).unwrap();
        let mut spec = ExperimentSpec::load(&path).unwrap();
        let o = Overrides {
            seed: Some(9),
            concepts: vec![Concept::Arm],
            ..Overrides::default()
        };
        o.apply(&mut spec).unwrap();
        assert_eq!(spec.train.seed, 9);
        assert_eq!(spec.concepts, vec![Concept::Arm]);
        let bad = Overrides {
            layers: vec!["nope".into()],
            ..Overrides::default()
        };
        assert!(bad.apply(&mut spec).is_err());
    }

    #[test]
    fn category_membership() {
        assert!(CategoryFilter::All.admits(None));
        assert!(CategoryFilter::Far.admits(Some(SizeCategory::Far)));
        assert!(!CategoryFilter::Far.admits(None));
        assert!(!CategoryFilter::Close.admits(Some(SizeCategory::VeryClose)));
    }
}
