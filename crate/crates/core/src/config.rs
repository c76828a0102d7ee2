//! Run configuration files: UTF-8 `key = value` lines with dotted keys
//! (`model.*`, `train.*`) and `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items = v.split(',').map(|s| num::<usize>(key, s.trim())).collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated values")))
}

/// Parses `HxW`, e.g. `64x48`.
pub fn parse_size(v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size `{v}` must look like HxW")))?;
    Ok((num("size", h.trim())?, num("size", w.trim())?))
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The small model used for smoke runs.
    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "model.preset" => {}
            "model.canvas" => m.canvas = parse_size(v)?,
            "model.widths" => m.widths = list(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.pose_widths" => m.pose_widths = list(key, v)?,
            "model.adapter_ratio" => m.adapter_ratio = num(key, v)?,
            "model.context_dim" => m.context_dim = num(key, v)?,
            "model.time_dim" => m.time_dim = num(key, v)?,
            "model.norm_groups" => m.norm_groups = num(key, v)?,
            "model.shift" => m.shift = num(key, v)?,
            "model.codec_width" => m.codec_width = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.clip_length" => t.clip_length = num(key, v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.total_iters" => t.total_iters = num(key, v)?,
            "train.lambda_image" => t.lambda_image = num(key, v)?,
            "train.lambda_video" => t.lambda_video = num(key, v)?,
            "train.keypoint_drop_prob" => t.keypoint_drop_prob = num(key, v)?,
            "train.garment_cond_drop_prob" => t.garment_cond_drop_prob = num(key, v)?,
            "train.flip_prob" => t.flip_prob = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.checkpoint_interval" => t.checkpoint_interval = num(key, v)?,
            "train.diffusion_steps" => t.diffusion_steps = num(key, v)?,
            "train.codec_iters" => t.codec_iters = num(key, v)?,
            "train.codec_batch" => t.codec_batch = num(key, v)?,
            "train.codec_lr" => t.codec_lr = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a config. `model.preset` (`desk` or `tiny`) selects the base
    /// model wherever it appears; other keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().rev().find(|(k, _)| k == "model.preset") {
            None => RunConfig::default(),
            Some((_, p)) if p == "desk" => RunConfig::default(),
            Some((_, p)) if p == "tiny" => RunConfig::tiny(),
            Some((_, p)) => return Err(Error::Config(format!("unknown model.preset `{p}`"))),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Full text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.canvas", format!("{}x{}", m.canvas.0, m.canvas.1));
        kv("model.widths", join(&m.widths));
        kv("model.heads", m.heads.to_string());
        kv("model.pose_widths", join(&m.pose_widths));
        kv("model.adapter_ratio", m.adapter_ratio.to_string());
        kv("model.context_dim", m.context_dim.to_string());
        kv("model.time_dim", m.time_dim.to_string());
        kv("model.norm_groups", m.norm_groups.to_string());
        kv("model.shift", m.shift.to_string());
        kv("model.codec_width", m.codec_width.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.clip_length", t.clip_length.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.total_iters", t.total_iters.to_string());
        kv("train.lambda_image", t.lambda_image.to_string());
        kv("train.lambda_video", t.lambda_video.to_string());
        kv("train.keypoint_drop_prob", t.keypoint_drop_prob.to_string());
        kv("train.garment_cond_drop_prob", t.garment_cond_drop_prob.to_string());
        kv("train.flip_prob", t.flip_prob.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.checkpoint_interval", t.checkpoint_interval.to_string());
        kv("train.diffusion_steps", t.diffusion_steps.to_string());
        kv("train.codec_iters", t.codec_iters.to_string());
        kv("train.codec_batch", t.codec_batch.to_string());
        kv("train.codec_lr", t.codec_lr.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::tiny();
        c.train.learning_rate = 3e-4;
        c.train.seed = 17;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_preset_and_overrides() {
        let c = RunConfig::parse("# smoke\ntrain.batch_size = 2  # small\n\nmodel.preset = tiny\n").unwrap();
        assert_eq!(c.model, ModelConfig::tiny());
        assert_eq!(c.train.batch_size, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("train.bogus = 1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("train.bogus"));
    }

    #[test]
    fn malformed_values() {
        assert!(RunConfig::parse("train.batch_size = four").is_err());
        assert!(RunConfig::parse("model.widths = 1,2").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("model.canvas = 63x48").is_err());
        assert_eq!(parse_size("64x48").unwrap(), (64, 48));
    }
}
