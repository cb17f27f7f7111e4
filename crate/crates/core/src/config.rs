//! Run configuration: flat `key = value` files with dotted section
//! prefixes, overridden by command-line settings.
//!
//! ```text
//! # comment
//! model.family = attention
//! attention.n_heads = 4
//! ```
//!
//! Relative paths read from a file resolve against that file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::{AttentionConfig, Vectorize};
use crate::codec;
use crate::data::{Modality, Role, Tr};
use crate::error::{Error, Result};
use crate::lagged::LagConfig;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", "Seed for synthetic data, initialization, shuffling and dropout"),
    key("data.manifest", "", "Split manifest, one role<TAB>source_id line per source"),
    key("data.features_dir", "", "Directory holding <source>.<modality>.nmef feature files"),
    key("data.bold_dir", "", "Directory holding <source>.nmeb BOLD files"),
    key("data.subject", "", "Subject id for reports when BOLD files carry none"),
    key("model.family", "linear", "Model family: linear | attention"),
    key("model.tag", "", "Model tag written to reports (defaults to the family)"),
    key("lag.n_lags", "10", "Number of past samples per modality"),
    key("lag.modalities", "visual,audio", "Modalities, in design block order"),
    key("lag.include_lag0", "false", "Also include the current sample in each window"),
    key("pca.k_visual", "", "Principal components kept for visual features (empty: no PCA)"),
    key("pca.k_audio", "", "Principal components kept for audio features (empty: no PCA)"),
    key("pca.k_text", "", "Principal components kept for text features (empty: no PCA)"),
    key("pca.whiten", "false", "Scale principal components to unit variance"),
    key("linear.ridge_lambda", "0", "Ridge penalty on the weights (0: ordinary least squares)"),
    key("attention.n_heads", "4", "Attention heads per modality block"),
    key("attention.d_model", "128", "Model width of each attention block"),
    key("attention.gate_bottleneck_ratio", "0.25", "Gate bottleneck width as a fraction of the fused width"),
    key("attention.hidden1", "1024", "Width of the first prediction-head layer"),
    key("attention.hidden2", "512", "Width of the second prediction-head layer"),
    key("attention.dropout", "0.3", "Dropout rate after each hidden head layer"),
    key("attention.vectorize", "flatten", "Block output vectorization: flatten | mean"),
    key("attention.learning_rate", "1e-4", "Adam step size"),
    key("attention.batch_size", "64", "Mini-batch size"),
    key("attention.max_epochs", "200", "Upper bound on training epochs"),
    key("attention.patience", "10", "Non-improving validation epochs tolerated before stopping"),
    key("attention.adam_beta1", "0.9", "Adam first-moment decay"),
    key("attention.adam_beta2", "0.999", "Adam second-moment decay"),
    key("attention.adam_eps", "1e-8", "Adam denominator offset"),
    key("eval.roles", "test_id,test_ood", "Manifest roles to predict and evaluate"),
    key("eval.concat", "false", "Score all evaluated sources as one concatenated series"),
    key("synth.n_train", "4", "Synthetic training sources"),
    key("synth.n_val", "1", "Synthetic validation sources"),
    key("synth.n_test_id", "1", "Synthetic in-distribution test sources"),
    key("synth.n_test_ood", "1", "Synthetic out-of-distribution test sources"),
    key("synth.t_samples", "300", "Samples per synthetic source"),
    key("synth.d_visual", "8", "Synthetic visual feature dim"),
    key("synth.d_audio", "6", "Synthetic audio feature dim"),
    key("synth.n_parcels", "20", "Synthetic parcel count"),
    key("synth.n_lags_true", "3", "Lags in the generating kernel"),
    key("synth.snr", "1", "Signal-to-noise variance ratio per parcel"),
    key("synth.ood_ar1", "0.5", "AR(1) coefficient of out-of-distribution features (0: i.i.d.)"),
    key("synth.subject", "sub-01", "Subject id written to synthetic BOLD files"),
    key("synth.tr_seconds", "1.49", "Repetition time of synthetic series"),
];

const PATH_KEYS: &[&str] = &["data.manifest", "data.features_dir", "data.bold_dir"];

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (set in --config files or with --set key=value):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "unset" } else { k.default };
        let _ = writeln!(s, "  {:width$}  {} [default: {}]", k.key, k.help, default);
    }
    s
}

/// Raw key/value settings with defaults applied.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.key.to_string(), k.default.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> Result<()> {
    if KEYS.iter().any(|k| k.key == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config key {key:?}")))
    }
}

impl Settings {
    /// Applies a config file's contents. `base` resolves relative paths.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            known(k)?;
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("config key {k:?} set twice")));
            }
            self.set_resolved(k, v, base);
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let bytes = codec::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        self.apply_text(&text, path.parent())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        known(k)?;
        self.set_resolved(k, v, None);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn set_resolved(&mut self, key: &str, value: &str, base: Option<&Path>) {
        let value = match base {
            Some(b) if PATH_KEYS.contains(&key) && !value.is_empty() && Path::new(value).is_relative() => {
                b.join(value).to_string_lossy().into_owned()
            }
            _ => value.to_string(),
        };
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::Config(format!("{key} = {v:?} must be true or false"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn list<T: std::str::FromStr<Err = Error>>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("{key}: {e}"))))
            .collect()
    }

    /// Serializes every key, one per line, in table order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{} = {}", k.key, self.get(k.key));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Linear,
    Attention,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSettings {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_id: usize,
    pub n_test_ood: usize,
    pub t_samples: usize,
    pub d_visual: usize,
    pub d_audio: usize,
    pub n_parcels: usize,
    pub n_lags_true: usize,
    pub snr: f64,
    pub ood_ar1: f64,
    pub subject: String,
    pub tr: Tr,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub bold_dir: Option<PathBuf>,
    pub subject: Option<String>,
    pub family: Family,
    pub model_tag: String,
    pub lag: LagConfig,
    pub k_per_modality: BTreeMap<Modality, usize>,
    pub whiten: bool,
    pub ridge_lambda: f64,
    /// Hyperparameters only; data-shape fields are filled in at fit time.
    pub attention: AttentionConfig,
    pub eval_roles: Vec<Role>,
    pub eval_concat: bool,
    pub synth: SynthSettings,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let family = match s.get("model.family") {
            "linear" => Family::Linear,
            "attention" => Family::Attention,
            v => return Err(Error::Config(format!("model.family must be linear or attention, got {v:?}"))),
        };
        let tag = s.get("model.tag");
        let model_tag = if tag.is_empty() { family.as_str().to_string() } else { tag.to_string() };

        let lag = LagConfig {
            n_lags: s.parse("lag.n_lags")?,
            modality_order: s.list("lag.modalities")?,
            include_lag0: s.flag("lag.include_lag0")?,
        };
        lag.validate()?;

        let mut k_per_modality = BTreeMap::new();
        for m in Modality::ALL {
            let key = format!("pca.k_{m}");
            if !s.get(&key).is_empty() {
                k_per_modality.insert(m, s.parse::<usize>(&key)?);
            }
        }
        if !k_per_modality.is_empty() {
            if let Some(m) = lag.modality_order.iter().find(|m| !k_per_modality.contains_key(m)) {
                return Err(Error::Config(format!(
                    "pca.k_{m} must be set when PCA is configured for other modalities"
                )));
            }
            k_per_modality.retain(|m, _| lag.modality_order.contains(m));
        }

        let ridge_lambda: f64 = s.parse("linear.ridge_lambda")?;
        if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
            return Err(Error::Config(format!("linear.ridge_lambda must be ≥ 0, got {ridge_lambda}")));
        }

        let seed: u64 = s.parse("seed")?;
        let mut attention = AttentionConfig::new(lag.window_len(), vec![1; lag.modality_order.len()], 1);
        attention.seed = seed;
        attention.n_heads = s.parse("attention.n_heads")?;
        attention.d_model = s.parse("attention.d_model")?;
        attention.gate_bottleneck_ratio = s.parse("attention.gate_bottleneck_ratio")?;
        attention.head_hidden_dims = (s.parse("attention.hidden1")?, s.parse("attention.hidden2")?);
        attention.dropout_rate = s.parse("attention.dropout")?;
        attention.vectorize = s.get("attention.vectorize").parse::<Vectorize>()?;
        attention.learning_rate = s.parse("attention.learning_rate")?;
        attention.batch_size = s.parse("attention.batch_size")?;
        attention.max_epochs = s.parse("attention.max_epochs")?;
        attention.patience = s.parse("attention.patience")?;
        attention.adam_beta1 = s.parse("attention.adam_beta1")?;
        attention.adam_beta2 = s.parse("attention.adam_beta2")?;
        attention.adam_eps = s.parse("attention.adam_eps")?;
        attention.validate()?;

        let tr_seconds: f64 = s.parse("synth.tr_seconds")?;
        let synth = SynthSettings {
            n_train: s.parse("synth.n_train")?,
            n_val: s.parse("synth.n_val")?,
            n_test_id: s.parse("synth.n_test_id")?,
            n_test_ood: s.parse("synth.n_test_ood")?,
            t_samples: s.parse("synth.t_samples")?,
            d_visual: s.parse("synth.d_visual")?,
            d_audio: s.parse("synth.d_audio")?,
            n_parcels: s.parse("synth.n_parcels")?,
            n_lags_true: s.parse("synth.n_lags_true")?,
            snr: s.parse("synth.snr")?,
            ood_ar1: s.parse("synth.ood_ar1")?,
            subject: s.get("synth.subject").to_string(),
            tr: Tr::from_seconds(tr_seconds).map_err(|e| Error::Config(format!("synth.tr_seconds: {e}")))?,
        };

        let subject = s.get("data.subject");
        Ok(Self {
            seed,
            manifest: s.path("data.manifest"),
            features_dir: s.path("data.features_dir"),
            bold_dir: s.path("data.bold_dir"),
            subject: (!subject.is_empty()).then(|| subject.to_string()),
            family,
            model_tag,
            lag,
            k_per_modality,
            whiten: s.flag("pca.whiten")?,
            ridge_lambda,
            attention,
            eval_roles: s.list("eval.roles")?,
            eval_concat: s.flag("eval.concat")?,
            synth,
        })
    }
}
