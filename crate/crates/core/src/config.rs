//! Line-oriented `key = value` pipeline configuration.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boost::BoostMode;
use crate::cnn::ArchConfig;
use crate::dataset::CsvOptions;
use crate::imaging::ImageLayout;
use crate::optim::TrainConfig;
use crate::sae::SaeConfig;
use crate::smote::SmoteConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    MissingFile(String),
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("cannot read config: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Parameters of the synthetic two-Gaussian churn table.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    /// Majority rows per minority row.
    pub ratio: usize,
    pub informative: usize,
    pub categorical: usize,
    pub sparse: usize,
    pub missing_rate: f64,
    /// Per-feature mean offset of the minority class.
    pub shift: f64,
    /// Standard deviation of the minority class (majority is 1).
    pub minority_sd: f64,
    pub out: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2800,
            ratio: 13,
            informative: 60,
            categorical: 0,
            sparse: 0,
            missing_rate: 0.0,
            shift: 0.25,
            minority_sd: 1.5,
            out: "synthetic.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Paths are resolved against this directory (the config file's).
    pub base_dir: PathBuf,
    pub data_path: String,
    pub label_column: String,
    pub missing_threshold: f64,
    pub positive_token: String,
    pub negative_tokens: Vec<String>,
    pub missing_markers: Vec<String>,
    pub seed: u64,
    pub folds: usize,
    pub validation_fraction: f64,
    pub smote: SmoteConfig,
    pub pca_components: usize,
    pub pca_standardize: bool,
    pub layout: ImageLayout,
    pub image_size: usize,
    /// `None` selects widths scaled to the input.
    pub sae_layers: Option<Vec<usize>>,
    pub sae: SaeConfig,
    pub arch: ArchConfig,
    pub pretrain_samples: usize,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub mode: BoostMode,
    pub output_dir: String,
    pub jobs: usize,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            base_dir: PathBuf::from("."),
            data_path: String::new(),
            label_column: "label".into(),
            missing_threshold: 0.9,
            positive_token: "1".into(),
            negative_tokens: vec!["0".into(), "-1".into()],
            missing_markers: Vec::new(),
            seed: 42,
            folds: 5,
            validation_fraction: 0.1,
            smote: SmoteConfig::default(),
            pca_components: 60,
            pca_standardize: true,
            layout: ImageLayout::default(),
            image_size: 32,
            sae_layers: None,
            sae: SaeConfig::default(),
            arch: ArchConfig::default(),
            pretrain_samples: 400,
            pretrain: TrainConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            mode: BoostMode::Stack,
            output_dir: "out".into(),
            jobs: 0,
            synth: SynthConfig::default(),
        }
    }
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(key, v, "not a number"))
}

fn positive(key: &str, v: &str) -> Result<usize> {
    let n: usize = num(key, v)?;
    if n == 0 {
        return Err(invalid(key, v, "must be at least 1"));
    }
    Ok(n)
}

fn pos_real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(invalid(key, v, "must be positive"));
    }
    Ok(x)
}

fn unit_interval(key: &str, v: &str, open_hi: bool) -> Result<f64> {
    let x: f64 = num(key, v)?;
    let ok = if open_hi { x > 0.0 && x < 1.0 } else { x > 0.0 && x <= 1.0 };
    if !ok {
        return Err(invalid(key, v, "out of range"));
    }
    Ok(x)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, v, "expected true or false")),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn widths(key: &str, v: &str) -> Result<Vec<usize>> {
    let w = list(v).iter().map(|s| positive(key, s)).collect::<Result<Vec<_>>>()?;
    if w.is_empty() {
        return Err(invalid(key, v, "empty list"));
    }
    Ok(w)
}

fn paths4(key: &str, v: &str) -> Result<[usize; 4]> {
    widths(key, v)?.try_into().map_err(|_| invalid(key, v, "expected four path widths"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || ConfigError::UnknownKey { line: 0, key: key.into() };
        match key {
            "data.path" => self.data_path = v.into(),
            "data.label_column" => self.label_column = v.into(),
            "data.missing_threshold" => self.missing_threshold = unit_interval(key, v, false)?,
            "data.positive" => self.positive_token = v.into(),
            "data.negative" => self.negative_tokens = list(v),
            "data.missing_markers" => self.missing_markers = list(v),
            "seed" => self.seed = num(key, v)?,
            "cv.folds" => {
                self.folds = num(key, v)?;
                if self.folds < 2 {
                    return Err(invalid(key, v, "need at least 2 folds"));
                }
            }
            "cv.validation_fraction" => self.validation_fraction = unit_interval(key, v, true)?,
            "smote.k" => self.smote.k = positive(key, v)?,
            "smote.ratio" => self.smote.target_ratio = pos_real(key, v)?,
            "smote.raw_space" => self.smote.raw_space = boolean(key, v)?,
            "pca.components" => self.pca_components = positive(key, v)?,
            "pca.standardize" => self.pca_standardize = boolean(key, v)?,
            "image.rows" => self.layout.rows = positive(key, v)?,
            "image.cols" => self.layout.cols = positive(key, v)?,
            "image.channels" => self.layout.channels = positive(key, v)?,
            "image.size" => self.image_size = positive(key, v)?,
            "sae.layers" => self.sae_layers = if v == "auto" { None } else { Some(widths(key, v)?) },
            "sae.gamma" => self.sae.gamma = unit_interval(key, v, true)?,
            "sae.beta" => {
                self.sae.beta = num(key, v)?;
                if !(self.sae.beta >= 0.0 && self.sae.beta.is_finite()) {
                    return Err(invalid(key, v, "must be nonnegative"));
                }
            }
            "sae.lr" => self.sae.lr = pos_real(key, v)?,
            "sae.epochs" => self.sae.epochs = num(key, v)?,
            "sae.batch_size" => self.sae.batch_size = positive(key, v)?,
            "cnn.stem" => self.arch.stem_channels = positive(key, v)?,
            "cnn.block1" => self.arch.block1 = paths4(key, v)?,
            "cnn.block2" => self.arch.block2 = paths4(key, v)?,
            "cnn.inception_repeat" => self.arch.inception_repeat = positive(key, v)?,
            "cnn.dense" => self.arch.dense_units = positive(key, v)?,
            "pretrain.samples" => self.pretrain_samples = positive(key, v)?,
            "boost.mode" => self.mode = v.parse().map_err(|_| invalid(key, v, "expected none, replace or stack"))?,
            "output.dir" => self.output_dir = v.into(),
            "jobs" => self.jobs = num(key, v)?,
            "synth.n" => self.synth.n = positive(key, v)?,
            "synth.ratio" => self.synth.ratio = positive(key, v)?,
            "synth.informative" => self.synth.informative = positive(key, v)?,
            "synth.categorical" => self.synth.categorical = num(key, v)?,
            "synth.sparse" => self.synth.sparse = num(key, v)?,
            "synth.missing_rate" => {
                self.synth.missing_rate = num(key, v)?;
                if !(0.0..1.0).contains(&self.synth.missing_rate) {
                    return Err(invalid(key, v, "must lie in [0,1)"));
                }
            }
            "synth.shift" => {
                self.synth.shift = num(key, v)?;
                if !self.synth.shift.is_finite() {
                    return Err(invalid(key, v, "must be finite"));
                }
            }
            "synth.minority_sd" => self.synth.minority_sd = pos_real(key, v)?,
            "synth.out" => self.synth.out = v.into(),
            _ => {
                let (stage, field) = key.split_once('.').ok_or_else(unknown)?;
                let t = match stage {
                    "pretrain" => &mut self.pretrain,
                    "stage1" => &mut self.stage1,
                    "stage2" => &mut self.stage2,
                    _ => return Err(unknown()),
                };
                match field {
                    "epochs" => t.epochs = num(key, v)?,
                    "lr" => t.lr = pos_real(key, v)?,
                    "batch_size" => t.batch_size = positive(key, v)?,
                    _ => return Err(unknown()),
                }
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::MissingFile(path.display().to_string()),
            _ => ConfigError::Io(e.to_string()),
        })?;
        let mut cfg = Self::parse_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        if self.layout.len() != self.pca_components {
            return Err(invalid(
                "image.rows",
                &format!("{}x{}x{}", self.layout.rows, self.layout.cols, self.layout.channels),
                format!("layout holds {} values but pca.components = {}", self.layout.len(), self.pca_components),
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_file(&self) -> PathBuf {
        self.resolve(&self.data_path)
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            positive_token: self.positive_token.clone(),
            negative_tokens: self.negative_tokens.clone(),
            missing_markers: self.missing_markers.clone(),
        }
    }

    /// SAE config with concrete widths for an input of `input` features.
    pub fn sae_for(&self, input: usize) -> SaeConfig {
        SaeConfig {
            layer_sizes: self.sae_layers.clone().unwrap_or_else(|| SaeConfig::default_widths(input)),
            ..self.sae.clone()
        }
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = |c: &TrainConfig| (c.epochs.to_string(), c.lr.to_string(), c.batch_size.to_string());
        let (pe, pl, pb) = t(&self.pretrain);
        let (s1e, s1l, s1b) = t(&self.stage1);
        let (s2e, s2l, s2b) = t(&self.stage2);
        vec![
            ("data.path", self.data_path.clone()),
            ("data.label_column", self.label_column.clone()),
            ("data.missing_threshold", self.missing_threshold.to_string()),
            ("data.positive", self.positive_token.clone()),
            ("data.negative", self.negative_tokens.join(",")),
            ("data.missing_markers", self.missing_markers.join(",")),
            ("seed", self.seed.to_string()),
            ("cv.folds", self.folds.to_string()),
            ("cv.validation_fraction", self.validation_fraction.to_string()),
            ("smote.k", self.smote.k.to_string()),
            ("smote.ratio", self.smote.target_ratio.to_string()),
            ("smote.raw_space", self.smote.raw_space.to_string()),
            ("pca.components", self.pca_components.to_string()),
            ("pca.standardize", self.pca_standardize.to_string()),
            ("image.rows", self.layout.rows.to_string()),
            ("image.cols", self.layout.cols.to_string()),
            ("image.channels", self.layout.channels.to_string()),
            ("image.size", self.image_size.to_string()),
            ("sae.layers", self.sae_layers.as_ref().map_or("auto".into(), |w| join(w))),
            ("sae.gamma", self.sae.gamma.to_string()),
            ("sae.beta", self.sae.beta.to_string()),
            ("sae.lr", self.sae.lr.to_string()),
            ("sae.epochs", self.sae.epochs.to_string()),
            ("sae.batch_size", self.sae.batch_size.to_string()),
            ("cnn.stem", self.arch.stem_channels.to_string()),
            ("cnn.block1", join(&self.arch.block1)),
            ("cnn.block2", join(&self.arch.block2)),
            ("cnn.inception_repeat", self.arch.inception_repeat.to_string()),
            ("cnn.dense", self.arch.dense_units.to_string()),
            ("pretrain.samples", self.pretrain_samples.to_string()),
            ("pretrain.epochs", pe),
            ("pretrain.lr", pl),
            ("pretrain.batch_size", pb),
            ("stage1.epochs", s1e),
            ("stage1.lr", s1l),
            ("stage1.batch_size", s1b),
            ("stage2.epochs", s2e),
            ("stage2.lr", s2l),
            ("stage2.batch_size", s2b),
            ("boost.mode", self.mode.to_string()),
            ("output.dir", self.output_dir.clone()),
            ("jobs", self.jobs.to_string()),
            ("synth.n", self.synth.n.to_string()),
            ("synth.ratio", self.synth.ratio.to_string()),
            ("synth.informative", self.synth.informative.to_string()),
            ("synth.categorical", self.synth.categorical.to_string()),
            ("synth.sparse", self.synth.sparse.to_string()),
            ("synth.missing_rate", self.synth.missing_rate.to_string()),
            ("synth.shift", self.synth.shift.to_string()),
            ("synth.minority_sd", self.synth.minority_sd.to_string()),
            ("synth.out", self.synth.out.clone()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the effective config, ignoring where output goes and
    /// how many threads run it.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k == "output.dir" || k == "jobs" {
                continue;
            }
            h.update(format!("{k} = {v}\n"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self, stage: &str) -> &TrainConfig {
        match stage {
            "pretrain" => &self.pretrain,
            "stage1" => &self.stage1,
            _ => &self.stage2,
        }
    }
}
