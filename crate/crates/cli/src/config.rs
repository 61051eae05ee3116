//! Run configuration: defaults, overlaid by an optional TOML file, overlaid
//! by command-line flags. The resolved value is written next to outputs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    /// Gold labels of the candidates.
    Oracle,
    /// Encoder-based evaluator bundle.
    Model,
    /// Lexical linear model.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Annotated machine-reading documents.
    Corpus,
    /// Judge tuples labelled by reference/candidate overlap.
    Overlap,
    /// System runs with gold-labelled references.
    Benchmark,
}

/// A fixed decision threshold, or `tune` to calibrate it on a dev split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    Fixed(f64),
    Tune,
}

impl FromStr for Alpha {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("tune") {
            return Ok(Alpha::Tune);
        }
        let v: f64 = s.parse().with_context(|| format!("alpha must be a number in [0, 1] or \"tune\", got {s:?}"))?;
        if !(0.0..=1.0).contains(&v) {
            bail!("alpha {v} outside [0, 1]");
        }
        Ok(Alpha::Fixed(v))
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Fixed(v) => write!(f, "{v}"),
            Alpha::Tune => f.write_str("tune"),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Alpha::from_str(&v.to_string()),
            Raw::Text(s) => Alpha::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Machine-reading documents, one JSON object per line.
    pub corpus: Option<PathBuf>,
    pub synthetic: Option<SyntheticKind>,
    /// Number of questions for synthetic data.
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus: None, synthetic: None, size: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub judge: JudgeKind,
    pub family: String,
    pub pairs: Vec<String>,
    /// Trained judge: a bundle directory, or a text file for the linear judge.
    pub path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { judge: JudgeKind::Model, family: "A1".into(), pairs: vec!["r,q+t".into()], path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = qajudge_core::TrainConfig::default();
        Self { train: None, dev: None, learning_rate: d.learning_rate, weight_decay: d.weight_decay, epochs: d.epochs, batch_size: d.batch_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tuples: Option<PathBuf>,
    pub runs: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub alpha: Alpha,
    /// Fraction of questions used to tune the threshold.
    pub dev_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tuples: None, runs: None, references: None, alpha: Alpha::Tune, dev_fraction: 0.2 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising resolved config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_parses_numbers_and_tune() {
        assert_eq!("tune".parse::<Alpha>().unwrap(), Alpha::Tune);
        assert_eq!("0.25".parse::<Alpha>().unwrap(), Alpha::Fixed(0.25));
        assert!("1.5".parse::<Alpha>().is_err());
        assert!("x".parse::<Alpha>().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.eval.alpha = Alpha::Fixed(0.3);
        cfg.model.judge = JudgeKind::Linear;
        let text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults_and_rejects_unknown_keys() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[eval]\nalpha = 0.4\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.eval.alpha, Alpha::Fixed(0.4));
        assert_eq!(cfg.train.epochs, 2);
        assert!(toml::from_str::<RunConfig>("sede = 1\n").is_err());
    }
}
