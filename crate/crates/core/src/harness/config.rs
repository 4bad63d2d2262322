//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are applied in file
//! order on top of the defaults, so later lines and `--set` overrides win.
//! `seed` re-derives all four seeds; the per-purpose seed keys override one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::augment::{AugmentSpec, Featurizer, StrongSpec, SynonymMap, Vocabulary, WeakSpec};
use crate::classifier::{Activation, OptimizerKind};
use crate::datasets::{
    few_shot_split, load_text_corpus, load_text_corpus_with_classes, make_synthetic, CorpusFormat, DatasetSplit,
    SplitSizes, SyntheticTaskSpec,
};
use crate::error::{Error, Result};
use crate::trainer::{Mode, Seeds, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TextDataConfig {
    pub train_file: PathBuf,
    pub format: CorpusFormat,
    pub text_field: String,
    pub label_field: String,
    /// Separate evaluation files; when absent validation and test are carved
    /// from the training file.
    pub validation_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: Option<usize>,
    pub buckets: usize,
    pub synonyms: Option<PathBuf>,
}

impl Default for TextDataConfig {
    fn default() -> Self {
        TextDataConfig {
            train_file: PathBuf::new(),
            format: CorpusFormat::Csv,
            text_field: "text".into(),
            label_field: "label".into(),
            validation_file: None,
            test_file: None,
            labeled_per_class: 10,
            unlabeled_per_class: 40,
            val_per_class: 10,
            test_per_class: None,
            buckets: 2048,
            synonyms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Synthetic(SyntheticTaskSpec),
    Text(TextDataConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub seed: u64,
    pub data: DataConfig,
    pub weak: WeakSpec,
    pub strong: StrongSpec,
    /// Record correctness of passed pseudo-labels against the hidden labels
    /// of the unlabeled pool.
    pub track_quality: bool,
    /// Directory that relative file paths resolve against.
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            seed: 0,
            data: DataConfig::Synthetic(SyntheticTaskSpec::biased()),
            weak: WeakSpec::default(),
            strong: StrongSpec::default(),
            track_quality: true,
            base_dir: PathBuf::from("."),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Canonical name for an accepted key alias.
pub fn canonical_key(key: &str) -> &str {
    match key {
        "B" => "batch_size",
        "lr" => "learning_rate",
        "w_u" => "unsupervised_loss_weight",
        "lambda" => "ema_decay",
        "tau" => "fixed_threshold",
        "delta" => "disagreement_weight",
        "mu" => "unlabeled_data_ratio",
        "n_labels" => "labeled_per_class",
        other => other,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config = ExperimentConfig {
            base_dir: base_dir.to_path_buf(),
            ..Default::default()
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    fn synthetic(&mut self, key: &str) -> Result<&mut SyntheticTaskSpec> {
        match &mut self.data {
            DataConfig::Synthetic(s) => Ok(s),
            DataConfig::Text(_) => Err(Error::Config(format!("`{key}` applies only to synthetic data"))),
        }
    }

    fn text(&mut self, key: &str) -> Result<&mut TextDataConfig> {
        match &mut self.data {
            DataConfig::Text(t) => Ok(t),
            DataConfig::Synthetic(_) => Err(Error::Config(format!("`{key}` applies only to text data"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        let t = &mut self.train;
        match key {
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "unsupervised_loss_weight" => t.w_u = parse_num(key, value)?,
            "ema_decay" => t.lambda = parse_num(key, value)?,
            "fixed_threshold" => t.tau = parse_num(key, value)?,
            "disagreement_weight" => t.delta = parse_num(key, value)?,
            "unlabeled_data_ratio" => t.mu = parse_num(key, value)?,
            "optimizer" => {
                t.optimizer = match value {
                    "adam" => OptimizerKind::adam(),
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("unknown optimizer `{value}`"))),
                }
            }
            "weight_decay" => t.weight_decay = parse_num(key, value)?,
            "hidden" => t.hidden = parse_list(key, value)?,
            "hidden_g" => {
                t.hidden_g = if value == "same" {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            "activation" => t.activation = value.parse()?,
            "steps" => t.steps = parse_num(key, value)?,
            "eval_every" => t.eval_every = parse_num(key, value)?,
            "seed" => {
                self.seed = parse_num(key, value)?;
                t.seeds = Seeds::from_base(self.seed);
            }
            "model_f_seed" => t.seeds.model_f = parse_num(key, value)?,
            "model_g_seed" => t.seeds.model_g = parse_num(key, value)?,
            "data_seed" => t.seeds.data = parse_num(key, value)?,
            "augmentation_seed" => t.seeds.augmentation = parse_num(key, value)?,
            "mode" => t.mode = Mode::from_name(value)?,
            "adaptive_threshold" => t.mode.adaptive_threshold = parse_bool(key, value)?,
            "cross_labeling" => t.mode.cross_labeling = parse_bool(key, value)?,
            "disagreement_weighting" => t.mode.disagreement_weighting = parse_bool(key, value)?,
            "track_pseudo_label_quality" => self.track_quality = parse_bool(key, value)?,
            "weak_replace_rate" => self.weak.replace_rate = parse_num(key, value)?,
            "weak_noise_std" => self.weak.noise_std = parse_num(key, value)?,
            "strong_replace_rate" => self.strong.replace_rate = parse_num(key, value)?,
            "strong_dropout" => self.strong.dropout = parse_num(key, value)?,
            "strong_shuffle_window" => self.strong.shuffle_window = parse_num(key, value)?,
            "strong_shuffle_rate" => self.strong.shuffle_rate = parse_num(key, value)?,
            "strong_noise_std" => self.strong.noise_std = parse_num(key, value)?,
            "data" => match value {
                "synthetic" => {
                    if !matches!(self.data, DataConfig::Synthetic(_)) {
                        self.data = DataConfig::Synthetic(SyntheticTaskSpec::biased());
                    }
                }
                "text" => {
                    if !matches!(self.data, DataConfig::Text(_)) {
                        self.data = DataConfig::Text(TextDataConfig::default());
                    }
                }
                _ => return Err(Error::Config(format!("unknown data kind `{value}`"))),
            },
            "labeled_per_class" => match &mut self.data {
                DataConfig::Synthetic(s) => s.labeled_per_class = parse_num(key, value)?,
                DataConfig::Text(x) => x.labeled_per_class = parse_num(key, value)?,
            },
            "num_classes" => self.synthetic(key)?.num_classes = parse_num(key, value)?,
            "dim" => self.synthetic(key)?.dim = parse_num(key, value)?,
            "separation" => self.synthetic(key)?.separation = parse_list(key, value)?,
            "priors" => self.synthetic(key)?.priors = parse_list(key, value)?,
            "noise_std" => self.synthetic(key)?.noise_std = parse_num(key, value)?,
            "unlabeled" => self.synthetic(key)?.unlabeled = parse_num(key, value)?,
            "validation" => self.synthetic(key)?.validation = parse_num(key, value)?,
            "test" => self.synthetic(key)?.test = parse_num(key, value)?,
            "train_file" => self.text(key)?.train_file = PathBuf::from(value),
            "format" => self.text(key)?.format = value.parse()?,
            "text_field" => self.text(key)?.text_field = value.to_string(),
            "label_field" => self.text(key)?.label_field = value.to_string(),
            "validation_file" => self.text(key)?.validation_file = Some(PathBuf::from(value)),
            "test_file" => self.text(key)?.test_file = Some(PathBuf::from(value)),
            "unlabeled_per_class" => self.text(key)?.unlabeled_per_class = parse_num(key, value)?,
            "val_per_class" => self.text(key)?.val_per_class = parse_num(key, value)?,
            "test_per_class" => {
                self.text(key)?.test_per_class = if value == "rest" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "buckets" => self.text(key)?.buckets = parse_num(key, value)?,
            "synonyms" => self.text(key)?.synonyms = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match &self.data {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::Text(t) => {
                if t.train_file.as_os_str().is_empty() {
                    return Err(Error::Config("text data needs `train_file`".into()));
                }
                if t.buckets == 0 {
                    return Err(Error::Config("`buckets` must be positive".into()));
                }
            }
        }
        AugmentSpec {
            weak: self.weak,
            strong: self.strong,
            synonyms: None,
        }
        .validate()
    }

    /// Renders every setting; parsing the result reproduces this config.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("unsupervised_loss_weight", t.w_u.to_string());
        kv("ema_decay", t.lambda.to_string());
        kv("fixed_threshold", t.tau.to_string());
        kv("disagreement_weight", t.delta.to_string());
        kv("unlabeled_data_ratio", t.mu.to_string());
        kv(
            "optimizer",
            match t.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam { .. } => "adam".into(),
            },
        );
        kv("weight_decay", t.weight_decay.to_string());
        kv("hidden", join(&t.hidden));
        kv("hidden_g", t.hidden_g.as_ref().map_or("same".into(), |h| join(h)));
        kv(
            "activation",
            match t.activation {
                Activation::Identity => "identity".into(),
                Activation::Tanh => "tanh".into(),
            },
        );
        kv("steps", t.steps.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("seed", self.seed.to_string());
        kv("model_f_seed", t.seeds.model_f.to_string());
        kv("model_g_seed", t.seeds.model_g.to_string());
        kv("data_seed", t.seeds.data.to_string());
        kv("augmentation_seed", t.seeds.augmentation.to_string());
        kv("adaptive_threshold", t.mode.adaptive_threshold.to_string());
        kv("cross_labeling", t.mode.cross_labeling.to_string());
        kv("disagreement_weighting", t.mode.disagreement_weighting.to_string());
        kv("track_pseudo_label_quality", self.track_quality.to_string());
        kv("weak_replace_rate", self.weak.replace_rate.to_string());
        kv("weak_noise_std", self.weak.noise_std.to_string());
        kv("strong_replace_rate", self.strong.replace_rate.to_string());
        kv("strong_dropout", self.strong.dropout.to_string());
        kv("strong_shuffle_window", self.strong.shuffle_window.to_string());
        kv("strong_shuffle_rate", self.strong.shuffle_rate.to_string());
        kv("strong_noise_std", self.strong.noise_std.to_string());
        match &self.data {
            DataConfig::Synthetic(d) => {
                kv("data", "synthetic".into());
                kv("num_classes", d.num_classes.to_string());
                kv("dim", d.dim.to_string());
                kv("separation", join(&d.separation));
                kv("priors", join(&d.priors));
                kv("noise_std", d.noise_std.to_string());
                kv("labeled_per_class", d.labeled_per_class.to_string());
                kv("unlabeled", d.unlabeled.to_string());
                kv("validation", d.validation.to_string());
                kv("test", d.test.to_string());
            }
            DataConfig::Text(d) => {
                let abs = |p: &Path| self.base_dir.join(p).display().to_string();
                kv("data", "text".into());
                kv("train_file", abs(&d.train_file));
                kv(
                    "format",
                    match d.format {
                        CorpusFormat::Csv => "csv".into(),
                        CorpusFormat::Jsonl => "jsonl".into(),
                    },
                );
                kv("text_field", d.text_field.clone());
                kv("label_field", d.label_field.clone());
                if let Some(p) = &d.validation_file {
                    kv("validation_file", abs(p));
                }
                if let Some(p) = &d.test_file {
                    kv("test_file", abs(p));
                }
                kv("labeled_per_class", d.labeled_per_class.to_string());
                kv("unlabeled_per_class", d.unlabeled_per_class.to_string());
                kv("val_per_class", d.val_per_class.to_string());
                kv("test_per_class", d.test_per_class.map_or("rest".into(), |n| n.to_string()));
                kv("buckets", d.buckets.to_string());
                if let Some(p) = &d.synonyms {
                    kv("synonyms", abs(p));
                }
            }
        }
        s
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    /// Builds the dataset split and augmentation spec for this config.
    pub fn build_data(&self) -> Result<(DatasetSplit, AugmentSpec)> {
        let seed = self.train.seeds.data;
        let mut augment = AugmentSpec {
            weak: self.weak,
            strong: self.strong,
            synonyms: None,
        };
        let split = match &self.data {
            DataConfig::Synthetic(spec) => make_synthetic(spec, seed)?,
            DataConfig::Text(t) => {
                let fmt = t.format;
                let raw = load_text_corpus(&self.resolve(&t.train_file), fmt, &t.text_field, &t.label_field)?;
                let mut vocab = Vocabulary::new();
                let pool = raw.encode(&mut vocab);
                let featurizer = Featurizer::HashedBow { buckets: t.buckets };
                let carve_eval = t.validation_file.is_none() || t.test_file.is_none();
                let sizes = SplitSizes {
                    labeled_per_class: t.labeled_per_class,
                    unlabeled_per_class: t.unlabeled_per_class,
                    val_per_class: if t.validation_file.is_none() { t.val_per_class } else { 0 },
                    test_per_class: if carve_eval { t.test_per_class } else { Some(0) },
                };
                let mut split = few_shot_split(&pool, &raw.class_names, sizes, featurizer, seed)?;
                let mut next_id = pool.len() as u64;
                let mut load_eval = |path: &Path| -> Result<Vec<crate::augment::Example>> {
                    let c = load_text_corpus_with_classes(
                        &self.resolve(path),
                        fmt,
                        &t.text_field,
                        &t.label_field,
                        &raw.class_names,
                    )?;
                    let mut examples = c.encode(&mut vocab);
                    for e in &mut examples {
                        e.id = next_id;
                        next_id += 1;
                    }
                    Ok(examples)
                };
                if let Some(p) = &t.validation_file {
                    split.validation = load_eval(p)?;
                }
                if let Some(p) = &t.test_file {
                    split.test = load_eval(p)?;
                }
                if let Some(p) = &t.synonyms {
                    augment.synonyms = Some(Arc::new(SynonymMap::load(&self.resolve(p), &mut vocab)?));
                }
                split
            }
        };
        augment.validate()?;
        Ok((split, augment))
    }
}
