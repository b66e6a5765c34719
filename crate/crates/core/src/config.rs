//! Line-oriented run configuration.
//!
//! ```text
//! seed = 7
//! [model]
//! base_channels = 8
//! [data]
//! specs = awgn:sigma=10, awgn:sigma=25
//! ```
//!
//! `#` starts a comment. Keys outside any section are top-level. Unknown
//! sections and keys are errors, reported with file and line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::ToyNoiseSpec;
use crate::denoise_harness::DenoiserConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::synthesis::{AugmentStrategy, SigmaMode, TileOptions};
use crate::training::{GuidanceSampling, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub eta: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_phase1: usize,
    pub batch_phase2: usize,
    pub iters_phase1: u64,
    pub iters_phase2: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    pub guidance: GuidanceSampling,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_phase1: t.lr_phase1,
            lr_phase2: t.lr_phase2,
            batch_phase1: t.batch_phase1,
            batch_phase2: t.batch_phase2,
            iters_phase1: t.iters_phase1,
            iters_phase2: t.iters_phase2,
            weight_decay: t.adamw.weight_decay,
            beta1: t.adamw.beta1,
            beta2: t.adamw.beta2,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            guidance: t.guidance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Training dataset root (`clean/` + `noisy/`).
    pub train: Option<PathBuf>,
    /// Held-out dataset root.
    pub val: Option<PathBuf>,
    /// Toy noise specs, `kind:params`.
    pub specs: Vec<String>,
    pub patches_per_spec: usize,
    pub val_patches_per_spec: usize,
    /// Side of each procedural clean source.
    pub source_size: usize,
    pub num_sources: usize,
    /// Directory of user clean PNGs replacing the procedural sources.
    pub clean_sources: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            specs: vec!["awgn:sigma=10".into(), "awgn:sigma=25".into(), "awgn:sigma=50".into()],
            patches_per_spec: 64,
            val_patches_per_spec: 8,
            source_size: 96,
            num_sources: 16,
            clean_sources: None,
        }
    }
}

impl DataSection {
    pub fn toy_specs(&self) -> Result<Vec<ToyNoiseSpec>> {
        self.specs
            .iter()
            .map(|s| s.parse().map_err(|e| Error::InvalidConfig(format!("data.specs: {e}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    /// Sampling steps; 0 uses every schedule step.
    pub steps: usize,
    /// 0 samples deterministically.
    pub eta: f64,
    pub overlap: usize,
    pub batch: usize,
    pub strategy: AugmentStrategy,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            steps: 0,
            eta: 0.0,
            overlap: 8,
            batch: 8,
            strategy: AugmentStrategy::AllPairs,
        }
    }
}

impl SynthSection {
    pub fn tile_options(&self) -> TileOptions {
        TileOptions {
            overlap: self.overlap,
            steps: (self.steps > 0).then_some(self.steps),
            sigma_mode: if self.eta > 0.0 {
                SigmaMode::Stochastic { eta: self.eta }
            } else {
                SigmaMode::Deterministic
            },
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub metrics: MetricConfig,
    pub denoise: DenoiserConfig,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Types `raw` after the default value it replaces.
fn typed_value(raw: &str, like: &Value) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    let number = |s: &str| -> std::result::Result<Value, String> {
        if let Ok(u) = s.parse::<u64>() {
            return Ok(Value::from(u));
        }
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Value::from(i));
        }
        s.parse::<f64>()
            .ok()
            .filter(|f| f.is_finite())
            .map(Value::from)
            .ok_or_else(|| format!("expected a number, got {s:?}"))
    };
    match like {
        Value::Number(_) => number(raw),
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got {raw:?}")),
        Value::Array(_) => Ok(Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.to_string()))
                .collect(),
        )),
        Value::Null if raw.is_empty() || raw == "none" => Ok(Value::Null),
        _ => Ok(Value::String(raw.to_string())),
    }
}

impl RunConfig {
    /// Parses config text; `path` is used in error messages only.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default())?;
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(path, n, "unterminated section header"))?
                    .trim();
                if !doc.get(name).is_some_and(Value::is_object) {
                    return Err(parse_err(path, n, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| parse_err(path, n, "expected `key = value`"))?;
            let key = key.trim();
            let target: &mut Map<String, Value> = match &section {
                Some(s) => doc[s.as_str()].as_object_mut().expect("section checked above"),
                None => doc.as_object_mut().expect("config serializes to an object"),
            };
            let qualified = section.as_ref().map_or(key.to_string(), |s| format!("{s}.{key}"));
            let like = match target.get(key) {
                Some(v) if !v.is_object() => v.clone(),
                _ => return Err(parse_err(path, n, format!("unknown key {qualified}"))),
            };
            let value = typed_value(raw, &like).map_err(|m| parse_err(path, n, format!("{qualified}: {m}")))?;
            target.insert(key.to_string(), value);
            // Check the key right away so type errors point at their line.
            if let Err(e) = serde_json::from_value::<Self>(doc.clone()) {
                return Err(parse_err(path, n, format!("{qualified}: {e}")));
            }
        }
        Ok(serde_json::from_value(doc)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// `key = value` text that parses back to `self`.
    pub fn to_text(&self) -> Result<String> {
        let doc = serde_json::to_value(self)?;
        let obj = doc.as_object().expect("config serializes to an object");
        let render = |v: &Value| match v {
            Value::String(s) => s.clone(),
            Value::Null => "none".to_string(),
            Value::Array(a) => a.iter().map(|x| x.as_str().map_or(x.to_string(), str::to_string)).collect::<Vec<_>>().join(", "),
            other => other.to_string(),
        };
        let mut out = String::new();
        for (k, v) in obj.iter().filter(|(_, v)| !v.is_object()) {
            out.push_str(&format!("{k} = {}\n", render(v)));
        }
        for (name, sec) in obj.iter().filter(|(_, v)| v.is_object()) {
            out.push_str(&format!("\n[{name}]\n"));
            for (k, v) in sec.as_object().expect("filtered to objects") {
                out.push_str(&format!("{k} = {}\n", render(v)));
            }
        }
        Ok(out)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr_phase1: t.lr_phase1,
            lr_phase2: t.lr_phase2,
            batch_phase1: t.batch_phase1,
            batch_phase2: t.batch_phase2,
            iters_phase1: t.iters_phase1,
            iters_phase2: t.iters_phase2,
            adamw: AdamWConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                weight_decay: t.weight_decay,
                ..Default::default()
            },
            clip_norm: t.clip_norm,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            steps: self.schedule.steps,
            eta: self.schedule.eta,
            guidance: t.guidance,
            loss: self.loss.clone(),
            model: self.model.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.metrics.validate()?;
        self.denoise.validate()?;
        self.data.toy_specs()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("run.cfg"))
    }

    #[test]
    fn sections_and_types() {
        let c = parse(
            "seed = 7 # trailing comment\n[model]\nbase_channels = 8\n[train]\nlr_phase1 = 1e-3\nguidance = same_group\n\
             [data]\nspecs = awgn:sigma=5, correlated:sigma=10;radius=2\ntrain = /tmp/x\n[loss]\ndomain = image\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.base_channels, 8);
        assert_eq!(c.train.lr_phase1, 1e-3);
        assert_eq!(c.train.guidance, GuidanceSampling::SameGroup);
        assert_eq!(c.data.toy_specs().unwrap()[1], ToyNoiseSpec::Correlated { sigma: 10.0, radius: 2 });
        assert_eq!(c.data.train, Some(PathBuf::from("/tmp/x")));
        assert_eq!(c.loss.domain, crate::losses::HistogramDomain::Image);
    }

    #[test]
    fn errors_name_the_line() {
        let line_of = |text: &str| match parse(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        };
        assert_eq!(line_of("seed = 1\n[model]\nbase_chanels = 8\n"), 3);
        assert_eq!(line_of("[modle]\n"), 1);
        assert_eq!(line_of("\n\n[train]\nlr_phase1 = fast\n"), 4);
        assert_eq!(line_of("[train]\nguidance = sometimes\n"), 2);
        assert_eq!(line_of("[train]\njust words\n"), 2);
        assert_eq!(line_of("[model\n"), 1);
        assert_eq!(line_of("model = 3\n"), 1);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig {
            seed: 11,
            ..Default::default()
        };
        c.data.val = Some(PathBuf::from("v"));
        c.train.guidance = GuidanceSampling::SameGroup;
        let text = c.to_text().unwrap();
        assert_eq!(parse(&text).unwrap(), c);
        assert_eq!(parse(&RunConfig::default().to_text().unwrap()).unwrap(), RunConfig::default());
    }
}
