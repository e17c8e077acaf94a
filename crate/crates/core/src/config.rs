//! Plain-text run configuration: `key=value` lines with dotted keys
//! (`gen.*`, `train.*`, `loss.*`, `anneal.*`, `model.*`) and `#` comments.
//!
//! Unknown keys are rejected. [`RunConfig::dump`] writes every key, and
//! floats use the shortest round-tripping form, so a dump reloads to an
//! identical config.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evidential::EvidenceActivation;
use crate::losses::{AnnealSchedule, DiceMode, Stage2SegMode};
use crate::pipeline::TrainConfig;
use crate::prompts::SamplerKind;
use crate::synthdata::GenConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn named<T>(key: &str, v: &str, parse: fn(&str) -> Option<T>) -> Result<T> {
    parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown value {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.gen;
        let t = &mut self.train;
        match key {
            "gen.height" => g.height = num(key, v)?,
            "gen.width" => g.width = num(key, v)?,
            "gen.n_samples" => g.n_samples = num(key, v)?,
            "gen.blobs_min" => g.blobs_min = num(key, v)?,
            "gen.blobs_max" => g.blobs_max = num(key, v)?,
            "gen.blur_sigma" => g.blur_sigma = num(key, v)?,
            "gen.speckle_looks" => g.speckle_looks = num(key, v)?,
            "gen.speckle_corr" => g.speckle_corr = num(key, v)?,
            "gen.contrast_min" => g.contrast_min = num(key, v)?,
            "gen.contrast_max" => g.contrast_max = num(key, v)?,
            "gen.seed" => g.seed = num(key, v)?,

            "train.epochs_stage1" => t.epochs_stage1 = num(key, v)?,
            "train.epochs_stage2" => t.epochs_stage2 = num(key, v)?,
            "train.iterations" => t.iterations = num(key, v)?,
            "train.clicks_per_iter" => t.clicks_per_iter = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.val_fraction" => t.val_fraction = num(key, v)?,
            "train.sampler" => t.sampler = named(key, v, SamplerKind::parse)?,
            "train.nms_radius" => t.nms_radius = num(key, v)?,
            "train.click_sigma" => t.click_sigma = num(key, v)?,
            "train.stage2_seg" => t.stage2_seg = named(key, v, Stage2SegMode::parse)?,
            "train.refresh_in_loop" => t.refresh_in_loop = boolean(key, v)?,

            "loss.lambda1" => t.loss.lambda1 = num(key, v)?,
            "loss.lambda2" => t.loss.lambda2 = num(key, v)?,
            "loss.beta1" => t.loss.beta1 = num(key, v)?,
            "loss.beta2" => t.loss.beta2 = num(key, v)?,
            "loss.dice_mode" => t.loss.dice_mode = named(key, v, DiceMode::parse)?,
            "loss.use_ceu" => t.loss.use_ceu = boolean(key, v)?,

            "anneal.alpha0" => t.alpha0 = num(key, v)?,
            "anneal.schedule" => t.anneal_schedule = named(key, v, AnnealSchedule::parse)?,

            "model.input_channels" => t.model.input_channels = num(key, v)?,
            "model.base_width" => t.model.base_width = num(key, v)?,
            "model.depth" => t.model.depth = num(key, v)?,
            "model.num_classes" => t.model.num_classes = num(key, v)?,
            "model.num_heads" => t.model.num_heads = num(key, v)?,
            "model.activation" => t.model.activation = named(key, v, EvidenceActivation::parse)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn dump(&self) -> String {
        let g = &self.gen;
        let t = &self.train;
        let rows: Vec<(&str, String)> = vec![
            ("gen.height", g.height.to_string()),
            ("gen.width", g.width.to_string()),
            ("gen.n_samples", g.n_samples.to_string()),
            ("gen.blobs_min", g.blobs_min.to_string()),
            ("gen.blobs_max", g.blobs_max.to_string()),
            ("gen.blur_sigma", g.blur_sigma.to_string()),
            ("gen.speckle_looks", g.speckle_looks.to_string()),
            ("gen.speckle_corr", g.speckle_corr.to_string()),
            ("gen.contrast_min", g.contrast_min.to_string()),
            ("gen.contrast_max", g.contrast_max.to_string()),
            ("gen.seed", g.seed.to_string()),
            ("train.epochs_stage1", t.epochs_stage1.to_string()),
            ("train.epochs_stage2", t.epochs_stage2.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.clicks_per_iter", t.clicks_per_iter.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.val_fraction", t.val_fraction.to_string()),
            ("train.sampler", t.sampler.name().to_string()),
            ("train.nms_radius", t.nms_radius.to_string()),
            ("train.click_sigma", t.click_sigma.to_string()),
            ("train.stage2_seg", t.stage2_seg.name().to_string()),
            ("train.refresh_in_loop", t.refresh_in_loop.to_string()),
            ("loss.lambda1", t.loss.lambda1.to_string()),
            ("loss.lambda2", t.loss.lambda2.to_string()),
            ("loss.beta1", t.loss.beta1.to_string()),
            ("loss.beta2", t.loss.beta2.to_string()),
            ("loss.dice_mode", t.loss.dice_mode.name().to_string()),
            ("loss.use_ceu", t.loss.use_ceu.to_string()),
            ("anneal.alpha0", t.alpha0.to_string()),
            ("anneal.schedule", t.anneal_schedule.name().to_string()),
            ("model.input_channels", t.model.input_channels.to_string()),
            ("model.base_width", t.model.base_width.to_string()),
            ("model.depth", t.model.depth.to_string()),
            ("model.num_classes", t.model.num_classes.to_string()),
            ("model.num_heads", t.model.num_heads.to_string()),
            ("model.activation", t.model.activation.name().to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        crate::pipeline::config_hash(&self.dump())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.gen.check_divisible(self.train.model.depth)?;
        self.train.validate()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_reload_is_identity() {
        let mut c = RunConfig::default();
        c.apply_text("loss.lambda1=0.1\ntrain.lr=3e-4\ngen.blur_sigma=0.30000000000000004\nloss.use_ceu=false")
            .unwrap();
        let back = RunConfig::parse(&c.dump()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dump(), c.dump());
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\n  train.seed = 7  # trailing\nmodel.activation=softplus\n").unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.model.activation, EvidenceActivation::Softplus);
    }

    #[test]
    fn every_dumped_key_is_settable() {
        let dump = RunConfig::default().dump();
        let mut c = RunConfig::default();
        for line in dump.lines() {
            let (k, v) = line.split_once('=').unwrap();
            c.set(k, v).unwrap();
        }
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("train.seed=1\ntrain.sed=2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("train.sed"), "{e}");
        assert!(RunConfig::parse("train.lr=fast").is_err());
        assert!(RunConfig::parse("train.sampler=best").is_err());
        assert!(RunConfig::parse("loss.use_ceu=maybe").is_err());
        assert!(RunConfig::parse("justakey").is_err());
    }

    #[test]
    fn later_values_override() {
        let mut c = RunConfig::parse("train.seed=1").unwrap();
        c.set("train.seed", "5").unwrap();
        assert_eq!(c.train.seed, 5);
        assert_ne!(c.hash(), RunConfig::parse("train.seed=1").unwrap().hash());
    }
}
