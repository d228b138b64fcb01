//! Run configuration: flat `key = value` lines with `#` comments, chosen so
//! any language's standard I/O can read and write it. A config plus the
//! code version fully determines a training run.

use crate::data::SizeSchedule;
use crate::error::{Error, Result};
use crate::models::{HeadKind, ModelSpec};
use crate::optim::GroupRates;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub head: HeadKind,
    pub codewords: usize,
    pub level: usize,
    pub hidden: usize,
    pub regression: bool,
    pub dropout_head: bool,
    pub dropout_hidden: bool,
    pub dropout_rate: f64,
    pub build_size: usize,
    /// Training sizes; every epoch visits each image once per size.
    pub sizes: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr_mlp: f64,
    pub lr_centers: f64,
    pub lr_sigma: f64,
    pub lr_conv: f64,
    /// Images held out of the training set for per-epoch validation.
    pub valid_count: usize,
    /// Cap on the feature-vector pool clustered for codebook init.
    pub kmeans_sample: usize,
    /// If nonzero, train on a seeded random subset of this many images.
    pub train_subset: usize,
    /// Recorded in the manifest. This implementation is single-threaded and
    /// bitwise-reproducible either way; the flag asserts that intent.
    pub deterministic: bool,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Cbof,
            codewords: 32,
            level: 0,
            hidden: 1000,
            regression: false,
            dropout_head: true,
            dropout_hidden: true,
            dropout_rate: 0.5,
            build_size: 28,
            sizes: vec![28],
            epochs: 50,
            batch: 64,
            seed: 42,
            lr_mlp: 1e-4,
            lr_centers: 1e-4,
            lr_sigma: 1e-4,
            lr_conv: 1e-4,
            valid_count: 10_000,
            kmeans_sample: 100_000,
            train_subset: 0,
            deterministic: true,
            train_images: "data/mnist/train-images-idx3-ubyte.gz".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte.gz".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte.gz".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte.gz".into(),
            out_dir: "runs/default".into(),
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected true or false, got '{other}'"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

pub fn parse_sizes(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("sizes: cannot parse '{s}'")))
        })
        .collect()
}

fn format_sizes(sizes: &[usize]) -> String {
    sizes
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "head" => config.head = HeadKind::parse(value)?,
                "codewords" => config.codewords = parse_num(key, value)?,
                "level" => config.level = parse_num(key, value)?,
                "hidden" => config.hidden = parse_num(key, value)?,
                "regression" => config.regression = parse_bool(key, value)?,
                "dropout_head" => config.dropout_head = parse_bool(key, value)?,
                "dropout_hidden" => config.dropout_hidden = parse_bool(key, value)?,
                "dropout_rate" => config.dropout_rate = parse_num(key, value)?,
                "build_size" => config.build_size = parse_num(key, value)?,
                "sizes" => config.sizes = parse_sizes(value)?,
                "epochs" => config.epochs = parse_num(key, value)?,
                "batch" => config.batch = parse_num(key, value)?,
                "seed" => config.seed = parse_num(key, value)?,
                "lr_mlp" => config.lr_mlp = parse_num(key, value)?,
                "lr_centers" => config.lr_centers = parse_num(key, value)?,
                "lr_sigma" => config.lr_sigma = parse_num(key, value)?,
                "lr_conv" => config.lr_conv = parse_num(key, value)?,
                "valid_count" => config.valid_count = parse_num(key, value)?,
                "kmeans_sample" => config.kmeans_sample = parse_num(key, value)?,
                "train_subset" => config.train_subset = parse_num(key, value)?,
                "deterministic" => config.deterministic = parse_bool(key, value)?,
                "train_images" => config.train_images = value.to_string(),
                "train_labels" => config.train_labels = value.to_string(),
                "test_images" => config.test_images = value.to_string(),
                "test_labels" => config.test_labels = value.to_string(),
                "out_dir" => config.out_dir = value.to_string(),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("head", self.head.name().into());
        kv("codewords", self.codewords.to_string());
        kv("level", self.level.to_string());
        kv("hidden", self.hidden.to_string());
        kv("regression", self.regression.to_string());
        kv("dropout_head", self.dropout_head.to_string());
        kv("dropout_hidden", self.dropout_hidden.to_string());
        kv("dropout_rate", self.dropout_rate.to_string());
        kv("build_size", self.build_size.to_string());
        kv("sizes", format_sizes(&self.sizes));
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("seed", self.seed.to_string());
        kv("lr_mlp", self.lr_mlp.to_string());
        kv("lr_centers", self.lr_centers.to_string());
        kv("lr_sigma", self.lr_sigma.to_string());
        kv("lr_conv", self.lr_conv.to_string());
        kv("valid_count", self.valid_count.to_string());
        kv("kmeans_sample", self.kmeans_sample.to_string());
        kv("train_subset", self.train_subset.to_string());
        kv("deterministic", self.deterministic.to_string());
        kv("train_images", self.train_images.clone());
        kv("train_labels", self.train_labels.clone());
        kv("test_images", self.test_images.clone());
        kv("test_labels", self.test_labels.clone());
        kv("out_dir", self.out_dir.clone());
        out
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            head: self.head,
            codewords: self.codewords,
            level: crate::bof::SpatialLevel::from_index(self.level)?,
            hidden: self.hidden,
            regression: self.regression,
            dropout_head: self.dropout_head,
            dropout_hidden: self.dropout_hidden,
            dropout_rate: self.dropout_rate,
            build_size: self.build_size,
        })
    }

    pub fn schedule(&self) -> Result<SizeSchedule> {
        SizeSchedule::new(self.sizes.clone())
    }

    pub fn group_rates(&self) -> GroupRates {
        GroupRates {
            mlp: self.lr_mlp,
            centers: self.lr_centers,
            sigma: self.lr_sigma,
            conv: self.lr_conv,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let config = RunConfig::default();
        let parsed = RunConfig::parse(&config.serialize()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "
# training length
epochs = 3

  batch=16
sizes = 24, 28 ,32
";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.epochs, 3);
        assert_eq!(config.batch, 16);
        assert_eq!(config.sizes, vec![24, 28, 32]);
        // unspecified keys keep defaults
        assert_eq!(config.hidden, 1000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("epohcs = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn malformed_values_are_rejected() {
        assert!(RunConfig::parse("epochs = three").is_err());
        assert!(RunConfig::parse("regression = yes").is_err());
        assert!(RunConfig::parse("just a line").is_err());
    }

    #[test]
    fn nondefault_values_round_trip() {
        let mut config = RunConfig::default();
        config.head = HeadKind::Spp;
        config.sizes = vec![20, 24, 28, 32, 36];
        config.lr_centers = 0.01;
        config.train_subset = 5000;
        config.deterministic = false;
        config.out_dir = "runs/exp 1".into();
        let parsed = RunConfig::parse(&config.serialize()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn spec_and_rates_derive_from_config() {
        let mut config = RunConfig::default();
        config.level = 1;
        config.lr_centers = 1e-2;
        let spec = config.model_spec().unwrap();
        assert_eq!(spec.level.regions(), 4);
        let rates = config.group_rates();
        assert_eq!(rates.centers, 1e-2);
        assert_eq!(rates.mlp, 1e-4);
        assert!(matches!(
            RunConfig {
                level: 3,
                ..RunConfig::default()
            }
            .model_spec(),
            Err(Error::Parameter(_))
        ));
    }
}
