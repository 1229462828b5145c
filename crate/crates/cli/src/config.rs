//! Run configuration: a TOML file with flat dotted keys, overridden by flags.
//!
//! ```toml
//! seed = 3
//! data = "runs/data"
//! train.max_iterations = 2000
//! train.ablation.rel = "none"
//! model.embed_dim = 64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mutatt_core::evaluation::Protocol;
use mutatt_core::synth::SynthSpec;
use mutatt_core::training::TrainConfig;
use mutatt_core::{Ablation, Guidance, ModelConfig, Module};
use serde::{Deserialize, Serialize};

/// Model widths chosen by the user; `d_v` and the vocabulary come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives data generation, initialization and the training stream;
    /// copied into `train.seed` and `synth.seed` on resolution.
    pub seed: u64,
    /// Dataset directory read by train, eval and dump-attn.
    pub data: PathBuf,
    /// Every output goes under this directory.
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Checkpoint read by eval and dump-attn; defaults to the final one under `out`.
    pub checkpoint: Option<PathBuf>,
    pub protocol: Protocol,
    /// Expression id for dump-attn; defaults to the first test expression.
    pub expression: Option<usize>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            resume: None,
            checkpoint: None,
            protocol: Protocol::Gt,
            expression: None,
            checkpoint_every: 500,
            log_every: 100,
            model: ModelDims::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

/// Command-line values that replace whatever the file says.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablation: Option<String>,
    pub protocol: Option<String>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub iterations: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub expression: Option<usize>,
}

impl RunConfig {
    /// Parses a config file, rejecting keys that do not name a field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let given: toml::Table = text.parse().context("config is not valid TOML")?;
        let config: RunConfig = toml::from_str(text).context("config does not match the run configuration")?;
        let known = toml::Table::try_from(&config)?;
        unknown_keys(&given, &known, "")?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// File (or defaults), then flags, then the seed fan-out and validation.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let o = overrides;
        if let Some(s) = o.seed {
            c.seed = s;
        }
        if let Some(a) = &o.ablation {
            apply_ablation(&mut c.train.ablation, a)?;
        }
        if let Some(p) = &o.protocol {
            c.protocol = p.parse()?;
        }
        if let Some(p) = &o.out {
            c.out = p.clone();
        }
        if let Some(p) = &o.resume {
            c.resume = Some(p.clone());
        }
        if let Some(p) = &o.data {
            c.data = p.clone();
        }
        if let Some(n) = o.iterations {
            c.train.max_iterations = n;
        }
        if let Some(p) = &o.checkpoint {
            c.checkpoint = Some(p.clone());
        }
        if let Some(e) = o.expression {
            c.expression = Some(e);
        }
        c.train.seed = c.seed;
        c.synth.seed = c.seed;
        c.train.validate()?;
        if c.model.embed_dim == 0 || c.model.hidden_dim == 0 {
            bail!("model.embed_dim and model.hidden_dim must be positive");
        }
        if c.checkpoint_every == 0 || c.log_every == 0 {
            bail!("checkpoint_every and log_every must be positive");
        }
        Ok(c)
    }

    /// Every leaf as a `dotted.key = value` line, sorted; parses back to the same config.
    pub fn to_flat_toml(&self) -> Result<String> {
        let table = toml::Table::try_from(self)?;
        let mut lines = Vec::new();
        flatten(&table, "", &mut lines);
        lines.sort();
        Ok(lines.join("\n") + "\n")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// The provenance text stored in checkpoints: resuming is an operational
    /// choice and does not change what the run computes.
    pub fn provenance_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.resume = None;
        c.to_json()
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out.join(FINAL_CHECKPOINT)
    }

    pub fn input_checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.final_checkpoint())
    }
}

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";

/// Applies `MODULE=MODE[,...]` on top of `ablation`; unlisted modules keep their value.
pub fn apply_ablation(ablation: &mut Ablation, spec: &str) -> Result<()> {
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((module, mode)) = part.split_once('=') else {
            bail!("ablation entry {part:?} is not MODULE=MODE");
        };
        let Some(module) = Module::parse(module.trim()) else {
            bail!("unknown module {module:?} (expected subj, loc or rel)");
        };
        ablation.set(module, mode.parse::<Guidance>()?);
    }
    Ok(())
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let key = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => bail!("unknown config key {key:?}"),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &format!("{key}."))?,
            _ => {}
        }
    }
    Ok(())
}

fn flatten(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = format!("{prefix}{k}");
        match v {
            toml::Value::Table(t) => flatten(t, &format!("{key}."), out),
            other => out.push(format!("{key} = {other}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file_and_the_seed_fans_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 4\ntrain.batch_size = 7\ntrain.ablation.rel = \"none\"\nsynth.num_images = 40\n").unwrap();
        let c = RunConfig::resolve(
            Some(&path),
            &Overrides {
                seed: Some(9),
                ablation: Some("subj=v2l".into()),
                protocol: Some("det".into()),
                iterations: Some(12),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.train.seed, c.synth.seed), (9, 9, 9));
        assert_eq!(c.train.batch_size, 7);
        assert_eq!(c.train.max_iterations, 12);
        assert_eq!(c.synth.num_images, 40);
        assert_eq!(c.protocol, Protocol::Det);
        assert_eq!(c.train.ablation.to_string(), "subj=v2l,loc=mutual,rel=none");
    }

    #[test]
    fn flat_echo_parses_back() {
        let mut c = RunConfig::default();
        c.resume = Some("x/ck.bin".into());
        c.train.learning_rate = 0.1 + 0.2;
        let text = c.to_flat_toml().unwrap();
        assert!(text.contains("train.ablation.subj = \"mutual\""));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn typos_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("train.batch_sise = 3").is_err());
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("train.batch_size = \"many\"").is_err());
        let bad = Overrides {
            ablation: Some("obj=none".into()),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(None, &bad).is_err());
        let bad = Overrides {
            protocol: Some("boxes".into()),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(None, &bad).is_err());
    }
}
