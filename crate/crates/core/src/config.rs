//! Run configuration: one TOML document with a section per module, plus
//! `key=value` overrides and an environment seed fallback.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::denoiser::ModelConfig;
use crate::diffusion::{NoiseSchedule, ReconstructionConfig};
use crate::error::{Error, Result};
use crate::scoring::ScoreConfig;
use crate::training::TrainConfig;

/// Environment variable consulted when no top-level `seed` is configured.
pub const SEED_ENV: &str = "DIFFUSION_AD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Noising depth of test-time reconstruction as a fraction of `T`.
    pub t_star_fraction: f64,
    /// Run the reconstruction's reverse chain without injected noise.
    pub deterministic_tail: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, t_star_fraction: 0.4, deterministic_tail: true }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end).map_err(|e| Error::Config(format!("diffusion: {e}")))
    }

    pub fn reconstruction(&self, schedule: &NoiseSchedule, seed: u64) -> ReconstructionConfig {
        ReconstructionConfig::from_fraction(schedule, self.t_star_fraction, self.deterministic_tail, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub seed: u64,
    /// Container file of named tensors replacing the seeded random weights.
    pub external_weights_path: Option<PathBuf>,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self { seed: 7, external_weights_path: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// `<path>/train/good`, `<path>/test/<class>` PNG tree.
    ImageDir,
    /// Labelled series split at `train_fraction` into train and test.
    TimeseriesCsv,
    SyntheticImage,
    SyntheticTimeseries,
}

impl DataKind {
    pub fn is_timeseries(self) -> bool {
        matches!(self, DataKind::TimeseriesCsv | DataKind::SyntheticTimeseries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    /// Square side images are resized to.
    pub image_size: usize,
    pub window: usize,
    pub stride: usize,
    /// Hz; sets the CWT scale band of time-series inputs.
    pub sampling_rate: f64,
    pub value_column: String,
    pub label_column: String,
    pub train_fraction: f64,
    /// Synthetic generator seed.
    pub seed: u64,
    /// Synthetic training items; the test split gets `synth_test` of each class.
    pub synth_train: usize,
    pub synth_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::SyntheticImage,
            path: None,
            image_size: 64,
            window: 64,
            stride: 16,
            sampling_rate: 64.0,
            value_column: "value".into(),
            label_column: "label".into(),
            train_fraction: 0.5,
            seed: 0,
            synth_train: 64,
            synth_test: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Worker threads for per-sample reconstruction.
    pub threads: usize,
    /// Seed of the reconstruction noise streams.
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threads: 1, seed: 0, batch_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint: String,
    pub loss_log: String,
    pub scores: String,
    pub samples: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            checkpoint: "model.difad".into(),
            loss_log: "train_log.csv".into(),
            scores: "scores.csv".into(),
            samples: "samples.png".into(),
        }
    }
}

impl OutputConfig {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed inherited by every unset `*.seed` except `perception.seed`.
    pub seed: Option<u64>,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub perception: PerceptionConfig,
    pub score: ScoreConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

// seeds that fall back to the global one when left unset
const INHERITED_SEEDS: [&str; 3] = ["train", "data", "eval"];

impl RunConfig {
    /// Parses a TOML document, applies `key=value` overrides (values in TOML
    /// syntax, bare words taken as strings), then resolves inherited keys.
    pub fn from_toml(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if !table.contains_key("seed") {
            if let Some(s) = env_seed {
                let seed: u64 =
                    s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
                table.insert("seed".into(), Value::Integer(seed_value(seed)?));
            }
        }
        if let Some(seed) = table.get("seed").cloned() {
            for section in INHERITED_SEEDS {
                section_mut(&mut table, section)?.entry("seed").or_insert(seed.clone());
            }
        }
        // the training-time perceptual mask follows the reconstruction depth
        let frac = table.get("diffusion").and_then(|d| d.get("t_star_fraction")).cloned();
        if let Some(frac) = frac {
            section_mut(&mut table, "train")?.entry("t_star_fraction").or_insert(frac);
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and consults
    /// [`SEED_ENV`].
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::from_toml(&text, overrides, env.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.score.validate()?;
        self.train.validate()?;
        self.diffusion.schedule()?;
        if !(0.0..=1.0).contains(&self.diffusion.t_star_fraction) {
            return Err(Error::Config(format!(
                "diffusion.t_star_fraction must lie in [0, 1], got {}",
                self.diffusion.t_star_fraction
            )));
        }
        let d = &self.data;
        if d.image_size < 16 {
            return Err(Error::Config(format!("data.image_size must be at least 16, got {}", d.image_size)));
        }
        if d.window < 2 || d.stride < 1 {
            return Err(Error::Config("data.window must be >= 2 and data.stride >= 1".into()));
        }
        if !(d.sampling_rate > 0.0 && d.sampling_rate.is_finite()) {
            return Err(Error::Config(format!("data.sampling_rate must be positive, got {}", d.sampling_rate)));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!("data.train_fraction must lie in (0, 1), got {}", d.train_fraction)));
        }
        if self.eval.threads == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.threads and eval.batch_size must be at least 1".into()));
        }
        if d.kind.is_timeseries() && self.model.input_channels != 1 {
            return Err(Error::Config("time-series scalograms need model.input_channels = 1".into()));
        }
        Ok(())
    }

    /// Every key with its default value, `None` keys shown as `unset`.
    pub fn documented_keys() -> Vec<(String, String)> {
        let mut out = vec![("seed".to_string(), format!("unset (falls back to {SEED_ENV})"))];
        let table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        for (section, v) in &table {
            if let Value::Table(t) = v {
                for (k, v) in t {
                    let key = format!("{section}.{k}");
                    let shown = match key.as_str() {
                        "train.seed" | "data.seed" | "eval.seed" => format!("{v} unless the top-level seed is set"),
                        "train.t_star_fraction" => "unset (diffusion.t_star_fraction)".to_string(),
                        _ => v.to_string(),
                    };
                    out.push((key, shown));
                }
            }
        }
        out.push(("perception.external_weights_path".into(), "unset".into()));
        out.push(("train.checkpoint_path".into(), "unset (output.dir/output.checkpoint)".into()));
        out.push(("data.path".into(), "unset".into()));
        out.sort();
        out
    }
}

fn seed_value(seed: u64) -> Result<i64> {
    i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} exceeds the TOML integer range")))
}

fn section_mut<'a>(table: &'a mut Table, section: &str) -> Result<&'a mut Table> {
    match table.entry(section).or_insert_with(|| Value::Table(Table::new())) {
        Value::Table(t) => Ok(t),
        _ => Err(Error::Config(format!("`{section}` must be a table"))),
    }
}

fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) =
        item.split_once('=').ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        [k] if !k.is_empty() => {
            table.insert(k.to_string(), value);
        }
        [section, k] if !section.is_empty() && !k.is_empty() => {
            section_mut(table, section)?.insert(k.to_string(), value);
        }
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}
