//! Experiment driver behind the CLI: train, eval, sweep, gradcheck, and
//! count-params as library functions, so integration tests can run them
//! without spawning a process.

use crate::checkpoint::{load_network, save_network};
use crate::config::RunConfig;
use crate::data::{load_idx, resize, split_train_valid, BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{self, ComponentReport};
use crate::models::{count_head_params, evaluate, HeadKind, ModelSpec, Network};
use crate::optim::Adam;
use crate::rng::{SeedStreams, Stream};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Output channels of the default feature block, the `D` every head sees.
pub const FEATURE_CHANNELS: usize = crate::layers::FeatureBlock::<f32>::DEFAULT_C2;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

/// What a training run left on disk, plus headline numbers for callers.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub epochs_run: usize,
    /// Mean train loss of the last epoch; absent when epochs = 0.
    pub final_train_loss: Option<f64>,
    /// Epoch and mean validation error of the best checkpoint; absent when
    /// no validation pass ran (epochs = 0 or valid_count = 0).
    pub best_epoch: Option<usize>,
    pub best_valid_error: Option<f64>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join(FINAL_CHECKPOINT)
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.out_dir.join(BEST_CHECKPOINT)
    }

    /// Best checkpoint when validation ran, otherwise the final one.
    pub fn eval_checkpoint(&self) -> PathBuf {
        if self.best_epoch.is_some() {
            self.best_checkpoint()
        } else {
            self.final_checkpoint()
        }
    }
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn config_json(config: &RunConfig) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for line in config.serialize().lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().into());
        }
    }
    serde_json::Value::Object(map)
}

fn append_manifest(out_dir: &Path, record: &serde_json::Value) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join(MANIFEST_FILE))?;
    writeln!(file, "{record}")?;
    Ok(())
}

/// Train a network per `config`, leaving metrics.csv, config.txt, final and
/// best-validation checkpoints, and a manifest line in `config.out_dir`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    let spec = config.model_spec()?;
    spec.validate()?;
    let schedule = config.schedule()?;
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.serialize())?;

    let seeds = SeedStreams::new(config.seed);
    let full: Dataset<f32> = load_idx(&config.train_images, &config.train_labels)?;
    let (mut train, valid) =
        split_train_valid(full, config.valid_count, &mut seeds.stream(Stream::Split))?;
    if config.train_subset > 0 && config.train_subset < train.len() {
        let mut picks = rand::seq::index::sample(
            &mut seeds.stream(Stream::Subsample),
            train.len(),
            config.train_subset,
        )
        .into_vec();
        picks.sort_unstable();
        train = train.subset(&picks);
    }

    let build_size = spec.build_size;
    let mut net: Network<f32> = Network::build(spec, &seeds)?;
    let build_images: Vec<Tensor<f32>> = train
        .items
        .iter()
        .map(|item| resize(&item.pixels, build_size))
        .collect::<Result<_>>()?;
    net.init_codebooks(
        &build_images,
        config.kmeans_sample,
        &mut seeds.stream(Stream::KMeans),
    )?;
    drop(build_images);

    let mut csv = String::from("epoch,train_loss");
    if !valid.is_empty() {
        for s in schedule.sizes() {
            csv.push_str(&format!(",valid_error_{s}"));
        }
    }
    csv.push('\n');

    let mut adam = Adam::new(config.group_rates());
    let mut final_train_loss = None;
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=config.epochs {
        let mut shuffle = seeds.stream_offset(Stream::Shuffle, epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut samples = 0usize;
        for batch in BatchIter::new(&train, &schedule, config.batch, &mut shuffle)? {
            let batch = batch?;
            net.zero_grads();
            let mut batch_loss = 0.0f64;
            for (image, &label) in batch.images.iter().zip(&batch.labels) {
                batch_loss += net.accumulate_sample(image, label)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} after {samples} samples; aborting"
                )));
            }
            let inv = (batch.len() as f64).recip() as f32;
            for p in net.params_mut() {
                p.grad.scale_assign(inv);
            }
            adam.step(&mut net.params_mut())?;
            loss_sum += batch_loss;
            samples += batch.len();
        }
        let train_loss = loss_sum / samples as f64;
        final_train_loss = Some(train_loss);
        csv.push_str(&format!("{epoch},{train_loss}"));
        if !valid.is_empty() {
            let mut errors = Vec::with_capacity(schedule.len());
            for &s in schedule.sizes() {
                let err = evaluate(&mut net, &valid, s)?;
                csv.push_str(&format!(",{err}"));
                errors.push(err);
            }
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            if best.map_or(true, |(_, b)| mean < b) {
                best = Some((epoch, mean));
                save_network(out_dir.join(BEST_CHECKPOINT), &mut net)?;
            }
        }
        csv.push('\n');
        fs::write(out_dir.join(METRICS_FILE), &csv)?;
    }
    if config.epochs == 0 {
        fs::write(out_dir.join(METRICS_FILE), &csv)?;
    }
    save_network(out_dir.join(FINAL_CHECKPOINT), &mut net)?;

    let outcome = TrainOutcome {
        out_dir: out_dir.clone(),
        epochs_run: config.epochs,
        final_train_loss,
        best_epoch: best.map(|(e, _)| e),
        best_valid_error: best.map(|(_, v)| v),
    };
    append_manifest(
        &out_dir,
        &serde_json::json!({
            "command": "train",
            "git_revision": git_revision(),
            "config": config_json(config),
            "best_epoch": outcome.best_epoch,
            "best_valid_error": outcome.best_valid_error,
            "final_train_loss": outcome.final_train_loss,
        }),
    )?;
    Ok(outcome)
}

/// Evaluate a checkpoint on the configured test set, one row per size.
pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: &Path,
    sizes: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let spec = config.model_spec()?;
    spec.validate()?;
    let seeds = SeedStreams::new(config.seed);
    let mut net: Network<f32> = Network::build(spec, &seeds)?;
    load_network(checkpoint, &mut net)?;
    let test: Dataset<f32> = load_idx(&config.test_images, &config.test_labels)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        rows.push((size, evaluate(&mut net, &test, size)?));
    }
    Ok(rows)
}

/// One grid cell of a codeword/level sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub level: usize,
    pub codewords: usize,
    pub head_params: usize,
    pub best_valid_error: Option<f64>,
    pub test_error: f64,
}

/// Train every (codewords, level) combination and report test error at the
/// build size, writing `sweep.csv` under the base output directory.
pub fn cmd_sweep(
    base: &RunConfig,
    codewords: &[usize],
    levels: &[usize],
) -> Result<Vec<SweepRow>> {
    if base.head != HeadKind::Cbof {
        return Err(Error::Config(
            "sweep varies quantization codebooks; config must use the cbof head".into(),
        ));
    }
    let base_dir = PathBuf::from(&base.out_dir);
    fs::create_dir_all(&base_dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("level,codewords,head_params,best_valid_error,test_error\n");
    for &level in levels {
        for &nk in codewords {
            let mut config = base.clone();
            config.level = level;
            config.codewords = nk;
            config.out_dir = base_dir
                .join(format!("level{level}_k{nk}"))
                .to_string_lossy()
                .into_owned();
            let outcome = cmd_train(&config)?;
            let spec = config.model_spec()?;
            let head_params = count_head_params(&spec, FEATURE_CHANNELS, config.build_size)?;
            let evals = cmd_eval(&config, &outcome.eval_checkpoint(), &[config.build_size])?;
            let test_error = evals[0].1;
            let valid_text = outcome
                .best_valid_error
                .map(|v| v.to_string())
                .unwrap_or_default();
            csv.push_str(&format!(
                "{level},{nk},{head_params},{valid_text},{test_error}\n"
            ));
            fs::write(base_dir.join(SWEEP_FILE), &csv)?;
            rows.push(SweepRow {
                level,
                codewords: nk,
                head_params,
                best_valid_error: outcome.best_valid_error,
                test_error,
            });
        }
    }
    append_manifest(
        &base_dir,
        &serde_json::json!({
            "command": "sweep",
            "git_revision": git_revision(),
            "config": config_json(base),
            "codewords": codewords,
            "levels": levels,
        }),
    )?;
    Ok(rows)
}

/// Finite-difference checks for every layer and parameter group.
pub fn cmd_gradcheck(seed: u64) -> Result<Vec<ComponentReport>> {
    gradcheck::run_all(seed)
}

/// The published head configurations and their exact parameter counts at
/// 28 px input with the 64-channel feature block.
pub fn cmd_count_params() -> Result<Vec<(String, usize)>> {
    let cbof = |level: usize, codewords: usize| -> Result<(String, ModelSpec)> {
        let mut config = RunConfig::default();
        config.level = level;
        config.codewords = codewords;
        Ok((
            format!("cbof level={level} codewords={codewords}"),
            config.model_spec()?,
        ))
    };
    let head = |kind: HeadKind| -> Result<(String, ModelSpec)> {
        let mut config = RunConfig::default();
        config.head = kind;
        Ok((kind.name().to_string(), config.model_spec()?))
    };
    let entries = vec![
        cbof(0, 32)?,
        cbof(1, 32)?,
        cbof(1, 64)?,
        head(HeadKind::Gmp)?,
        head(HeadKind::Spp)?,
        head(HeadKind::CnnFlatten)?,
    ];
    entries
        .into_iter()
        .map(|(name, spec)| Ok((name, count_head_params(&spec, FEATURE_CHANNELS, 28)?)))
        .collect()
}
