//! Run configuration: a JSON file whose values command-line flags override.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use spindle_core::corpus::{InfoUnit, TokenizerKind};
use spindle_core::denoiser::{DenoiserConfig, TimeMode};
use spindle_core::diffusion::ScheduleParams;
use spindle_core::evaluation::EvalConfig;
use spindle_core::rng::derive_seed;
use spindle_core::sampling::SampleConfig;
use spindle_core::training::TrainConfig;

/// Version of every JSON/CSV/text artifact this tool writes.
pub const OUTPUT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// Directory written by `prepare`; built on the fly from `train` if absent.
    pub prepared: Option<PathBuf>,
    pub vocab_size: usize,
    pub tokenizer: TokenizerKind,
    pub smoothing: f64,
    pub unit: InfoUnit,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            train: None,
            valid: None,
            prepared: None,
            vocab_size: 8192,
            tokenizer: TokenizerKind::Word,
            smoothing: 1.0,
            unit: InfoUnit::Nats,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub time_mode: TimeMode,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_max: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::new(0, TimeMode::Tad, 1);
        ModelSection {
            time_mode: TimeMode::Tad,
            layers: d.layers,
            d_model: d.d_model,
            heads: d.heads,
            d_ff: d.d_ff,
            n_max: d.n_max,
            dropout: d.dropout,
        }
    }
}

impl ModelSection {
    pub fn denoiser_config(&self, vocab_size: usize, steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            n_max: self.n_max,
            steps,
            time_mode: self.time_mode,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleParams::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Gives each component its own stream of the root seed.
    pub fn derive_seeds(&mut self) {
        self.train.seed = derive_seed(self.seed, "train", 0);
        self.sample.seed = derive_seed(self.seed, "sample", 0);
        self.eval.seed = derive_seed(self.seed, "eval", 0);
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init", 0)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Resolved configuration plus format version, written next to outputs.
pub fn write_sidecar(path: &Path, command: &str, config: &serde_json::Value) -> Result<()> {
    let doc = serde_json::json!({
        "format_version": OUTPUT_FORMAT_VERSION,
        "command": command,
        "config": config,
    });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    output.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig {
            seed: 17,
            ..Default::default()
        };
        c.schedule.lambda = 0.0;
        c.corpus.tokenizer = TokenizerKind::Char;
        c.model.time_mode = TimeMode::Pte;
        c.derive_seeds();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"schedule": {"steps": 8}, "train": {"batch_size": 4}}"#).unwrap();
        assert_eq!(c.schedule.steps, 8);
        assert_eq!(c.schedule.lambda, ScheduleParams::default().lambda);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.model, ModelSection::default());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            sidecar_path(Path::new("out/samples.txt")),
            PathBuf::from("out/samples.txt.meta.json")
        );
    }
}
