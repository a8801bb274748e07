//! Flat `key=value` run configuration.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sicot_core::attention::PoolingMode;
use sicot_core::model::{ModelConfig, TrainOptions};
use sicot_core::optim::SgdConfig;
use sicot_core::synth::LongTailSpec;

use crate::error::CliError;

/// Every tunable of the pipeline. Defaults are listed by [`RunConfig::echo`]
/// on a default instance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,

    // model
    pub dim: usize,
    pub hidden_dims: Vec<usize>,
    pub lambda: f64,
    pub mode: PoolingMode,
    pub visual_only: bool,
    pub classifier_bias: bool,
    pub freeze_embeddings: bool,
    pub shards: usize,

    // optimisation
    pub learning_rate: f64,
    pub gamma: f64,
    pub step_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,

    // text
    pub drop_fraction: f64,

    // data generator
    pub num_classes: usize,
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub head_tail_threshold: usize,
    pub feature_dim: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub tail_offset: f64,
    pub signature_per_title: usize,
    pub pool_per_title: usize,
    pub promo_per_title: usize,
    pub junk_rate: f64,
    pub shared_fraction: f64,
    pub max_word_ratio: f64,
    /// Norm and noise of the word vectors `synth` writes to `embeddings`.
    pub word_vector_scale: f64,
    pub word_vector_spread: f64,

    pub gradcheck_tolerance: f64,

    // paths; `synth` writes word vectors to `embeddings`, `train` reads them;
    // an empty `embeddings` means random initialisation
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub report: PathBuf,
    pub log: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = LongTailSpec::default();
        let sgd = SgdConfig::default();
        RunConfig {
            seed: 0,
            workers: 1,
            dim: 32,
            hidden_dims: vec![64],
            lambda: 1.0,
            mode: PoolingMode::BilinearAttention,
            visual_only: false,
            classifier_bias: true,
            freeze_embeddings: false,
            shards: 1,
            // Smaller batches and a slower decay than the optimiser defaults:
            // the synthetic sets are small, so the default schedule stops
            // learning after a few hundred updates.
            learning_rate: sgd.learning_rate,
            gamma: sgd.gamma,
            step_epochs: 5,
            batch_size: 32,
            epochs: 30,
            drop_fraction: 0.05,
            num_classes: spec.num_classes,
            n_max: spec.n_max,
            imbalance_factor: spec.imbalance_factor,
            head_tail_threshold: spec.head_tail_threshold,
            feature_dim: spec.feature_dim,
            test_per_class: spec.test_per_class,
            noise_sigma: spec.noise_sigma,
            tail_offset: spec.tail_offset,
            signature_per_title: spec.signature_per_title,
            pool_per_title: spec.pool_per_title,
            promo_per_title: spec.promo_per_title,
            junk_rate: spec.junk_rate,
            shared_fraction: spec.shared_fraction,
            max_word_ratio: spec.max_word_ratio,
            word_vector_scale: 1.0,
            word_vector_spread: 1.0,
            gradcheck_tolerance: 1e-5,
            manifest: "sicot_manifest.tsv".into(),
            embeddings: "sicot_vectors.txt".into(),
            checkpoint: "sicot_model.ckpt".into(),
            vocab: "sicot_vocab.tsv".into(),
            report: "sicot_report.txt".into(),
            log: "sicot_train.log".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "hidden_dims" => self.hidden_dims = parse_list(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "visual_only" => self.visual_only = parse(key, value)?,
            "classifier_bias" => self.classifier_bias = parse(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = parse(key, value)?,
            "shards" => self.shards = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "step_epochs" => self.step_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "drop_fraction" => self.drop_fraction = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "n_max" => self.n_max = parse(key, value)?,
            "imbalance_factor" => self.imbalance_factor = parse(key, value)?,
            "head_tail_threshold" => self.head_tail_threshold = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "tail_offset" => self.tail_offset = parse(key, value)?,
            "signature_per_title" => self.signature_per_title = parse(key, value)?,
            "pool_per_title" => self.pool_per_title = parse(key, value)?,
            "promo_per_title" => self.promo_per_title = parse(key, value)?,
            "junk_rate" => self.junk_rate = parse(key, value)?,
            "shared_fraction" => self.shared_fraction = parse(key, value)?,
            "max_word_ratio" => self.max_word_ratio = parse(key, value)?,
            "word_vector_scale" => self.word_vector_scale = parse(key, value)?,
            "word_vector_spread" => self.word_vector_spread = parse(key, value)?,
            "gradcheck_tolerance" => self.gradcheck_tolerance = parse(key, value)?,
            "manifest" => self.manifest = value.into(),
            "embeddings" => self.embeddings = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "vocab" => self.vocab = value.into(),
            "report" => self.report = value.into(),
            "log" => self.log = value.into(),
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` string as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Reads a config file: `key=value` lines, `#` comments, blank lines.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Canonical `key=value` listing of every key; parsing it back yields
    /// the same config.
    pub fn echo(&self) -> String {
        let path = |p: &Path| p.display().to_string();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("dim", self.dim.to_string()),
            ("hidden_dims", join(&self.hidden_dims)),
            ("lambda", self.lambda.to_string()),
            ("mode", self.mode.to_string()),
            ("visual_only", self.visual_only.to_string()),
            ("classifier_bias", self.classifier_bias.to_string()),
            ("freeze_embeddings", self.freeze_embeddings.to_string()),
            ("shards", self.shards.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("gamma", self.gamma.to_string()),
            ("step_epochs", self.step_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("drop_fraction", self.drop_fraction.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("n_max", self.n_max.to_string()),
            ("imbalance_factor", self.imbalance_factor.to_string()),
            ("head_tail_threshold", self.head_tail_threshold.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("tail_offset", self.tail_offset.to_string()),
            ("signature_per_title", self.signature_per_title.to_string()),
            ("pool_per_title", self.pool_per_title.to_string()),
            ("promo_per_title", self.promo_per_title.to_string()),
            ("junk_rate", self.junk_rate.to_string()),
            ("shared_fraction", self.shared_fraction.to_string()),
            ("max_word_ratio", self.max_word_ratio.to_string()),
            ("word_vector_scale", self.word_vector_scale.to_string()),
            ("word_vector_spread", self.word_vector_spread.to_string()),
            ("gradcheck_tolerance", self.gradcheck_tolerance.to_string()),
            ("manifest", path(&self.manifest)),
            ("embeddings", path(&self.embeddings)),
            ("checkpoint", path(&self.checkpoint)),
            ("vocab", path(&self.vocab)),
            ("report", path(&self.report)),
            ("log", path(&self.log)),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn spec(&self) -> LongTailSpec {
        LongTailSpec {
            num_classes: self.num_classes,
            n_max: self.n_max,
            imbalance_factor: self.imbalance_factor,
            head_tail_threshold: self.head_tail_threshold,
            feature_dim: self.feature_dim,
            test_per_class: self.test_per_class,
            noise_sigma: self.noise_sigma,
            tail_offset: self.tail_offset,
            signature_per_title: self.signature_per_title,
            pool_per_title: self.pool_per_title,
            promo_per_title: self.promo_per_title,
            junk_rate: self.junk_rate,
            shared_fraction: self.shared_fraction,
            max_word_ratio: self.max_word_ratio,
            seed: self.seed,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            gamma: self.gamma,
            step_epochs: self.step_epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            sgd: self.sgd(),
            lambda: self.lambda,
            visual_only: self.visual_only,
            workers: self.workers.max(1),
        }
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            dim: self.dim,
            num_classes,
            mode: self.mode,
            classifier_bias: self.classifier_bias,
        }
    }

    pub fn embeddings_path(&self) -> Option<&Path> {
        (!self.embeddings.as_os_str().is_empty()).then_some(self.embeddings.as_path())
    }
}
