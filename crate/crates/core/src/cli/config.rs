//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags. Lines starting with `#` (or the tail of a line after
//! `#`) are comments. Later duplicates win.

use std::path::PathBuf;

use serde::Serialize;

use crate::bench::Mode;
use crate::data::DataFormat;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::GeluMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub mode: Option<Mode>,
    /// Total frames `T`: clip length for `synth` (default: the window),
    /// sequence length for `bench` (default 243).
    pub seq_len: Option<usize>,
    /// Padding `δ`; seq2frame windows span `1 + 2δ` frames. Defaults to
    /// `(t - 1) / 2`.
    pub padding: Option<usize>,
    pub clips: usize,
    pub skeleton: String,
    pub actions: usize,
    pub noise: f64,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub histogram_bin: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            data: None,
            eval_data: None,
            pred: None,
            checkpoint: None,
            out: None,
            format: None,
            mode: None,
            seq_len: None,
            padding: None,
            clips: 64,
            skeleton: "h36m17".into(),
            actions: 4,
            noise: 0.0,
            warmup: 1,
            iters: 5,
            threads: 1,
            histogram_bin: 10.0,
        }
    }
}

/// Every key accepted in a config file.
pub const KEYS: &[&str] = &[
    "joints", "dim", "depth", "heads", "mlp_ratio", "dropout", "activation", "output_scale_mm",
    "epochs", "steps", "batch_size", "window", "interval", "lr", "beta1", "beta2", "eps", "lr_decay", "schedule", "warmup_steps",
    "grad_clip", "eval_every", "checkpoint_every", "w_torso", "w_head", "w_middle_limb", "w_terminal_limb",
    "lambda_t", "lambda_m", "squared", "seed", "data", "eval_data", "pred", "checkpoint", "out", "format",
    "mode", "seq_len", "padding", "clips", "skeleton", "actions", "noise", "warmup", "iters", "threads",
    "histogram_bin",
];

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "joints" => m.joints = num(key, value)?,
            "dim" => m.dim = num(key, value)?,
            "depth" => m.depth = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "activation" => {
                m.activation = match value {
                    "exact" => GeluMode::Exact,
                    "tanh" => GeluMode::Tanh,
                    _ => return Err(Error::Config(format!("activation must be exact or tanh, got {value:?}"))),
                }
            }
            "output_scale_mm" => m.output_scale_mm = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "steps" => t.max_steps = if value == "none" { None } else { Some(num(key, value)?) },
            "batch_size" => t.batch_size = num(key, value)?,
            "window" => t.window = num(key, value)?,
            "interval" => t.interval = num(key, value)?,
            "lr" => t.adam.lr = num(key, value)?,
            "beta1" => t.adam.beta1 = num(key, value)?,
            "beta2" => t.adam.beta2 = num(key, value)?,
            "eps" => t.adam.eps = num(key, value)?,
            "lr_decay" => t.lr_decay = num(key, value)?,
            "schedule" => t.schedule = value.parse()?,
            "warmup_steps" => t.warmup_steps = num(key, value)?,
            "grad_clip" => t.grad_clip = if value == "none" { None } else { Some(num(key, value)?) },
            "eval_every" => t.eval_every = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "w_torso" => t.loss.groups.torso = num(key, value)?,
            "w_head" => t.loss.groups.head = num(key, value)?,
            "w_middle_limb" => t.loss.groups.middle_limb = num(key, value)?,
            "w_terminal_limb" => t.loss.groups.terminal_limb = num(key, value)?,
            "lambda_t" => t.loss.lambda_t = num(key, value)?,
            "lambda_m" => t.loss.lambda_m = num(key, value)?,
            "squared" => t.loss.squared = flag(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                t.seed = self.seed;
            }
            "data" => self.data = Some(value.into()),
            "eval_data" => self.eval_data = Some(value.into()),
            "pred" => self.pred = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "format" => self.format = Some(value.parse()?),
            "mode" => self.mode = Some(value.parse()?),
            "seq_len" => self.seq_len = Some(num(key, value)?),
            "padding" => self.padding = Some(num(key, value)?),
            "clips" => self.clips = num(key, value)?,
            "skeleton" => self.skeleton = value.to_string(),
            "actions" => self.actions = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "histogram_bin" => self.histogram_bin = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&str>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file {
            cfg.apply_file(text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "activation" => "tanh",
            "squared" => "true",
            "format" => "bin",
            "schedule" => "cosine",
            "mode" => "seq2frame",
            "skeleton" | "data" | "eval_data" | "pred" | "checkpoint" | "out" => "x",
            "dropout" | "lr" | "beta1" | "beta2" | "eps" | "lr_decay" | "grad_clip" | "noise" => "0.5",
            _ => "3",
        };
        for k in KEYS {
            RunConfig::default().set(k, sample(k)).unwrap();
        }
    }

    #[test]
    fn file_then_flags() {
        let text = "# tiny model\ndim = 32   # width\ndepth=2\n\nlr = 0.01\ndim = 48\n";
        let cfg = RunConfig::resolve(Some(text), &[("depth", "3".into()), ("seed", "9".into())]).unwrap();
        assert_eq!(cfg.model.dim, 48);
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
    }

    #[test]
    fn bad_lines_report_position() {
        let e = RunConfig::resolve(Some("dim = 8\nnonsense\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = RunConfig::resolve(Some("colour = red"), &[]).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        assert!(RunConfig::resolve(Some("dim = wide"), &[]).is_err());
        assert!(RunConfig::resolve(None, &[("mode", "fast".into())]).is_err());
    }

    #[test]
    fn optional_limits() {
        let cfg = RunConfig::resolve(Some("steps = 7\ngrad_clip = none"), &[]).unwrap();
        assert_eq!(cfg.train.max_steps, Some(7));
        assert_eq!(cfg.train.grad_clip, None);
    }
}
