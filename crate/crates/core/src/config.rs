//! Model and run configuration, including the flat `key = value` file format.
//!
//! ```text
//! # desk-scale run
//! base_channels = 8
//! enc_blocks = 1,1,1,1
//! prompt = infrared and visible image fusion
//! ```
//!
//! Unknown keys are rejected. Keys not given keep their defaults.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::selection::keep_count;
use crate::training::TrainSchedule;

pub const LEVELS: usize = 4;
pub const DEFAULT_PROMPT: &str = "multi-modality image fusion";

/// Module switches; `true` means the module is present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub scpm: bool,
    pub gam: bool,
    pub tcpm: bool,
    /// Channel attention inside SCPM (ω_C).
    pub ca_scpm: bool,
    /// Channel attention selection inside TCPM.
    pub ca_tcpm: bool,
    /// Semantic provider term of the SCPM weights (α·σ(ω_S)).
    pub semantic_backbone: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        scpm: true,
        gam: true,
        tcpm: true,
        ca_scpm: true,
        ca_tcpm: true,
        semantic_backbone: true,
    };

    pub const NAMES: [&'static str; 6] = ["scpm", "gam", "tcpm", "ca_scpm", "ca_tcpm", "semantic_backbone"];

    /// Bit `i` set enables the flag named `NAMES[i]`.
    pub fn from_bits(bits: u8) -> Self {
        let on = |i: u8| bits & (1 << i) != 0;
        Ablation {
            scpm: on(0),
            gam: on(1),
            tcpm: on(2),
            ca_scpm: on(3),
            ca_tcpm: on(4),
            semantic_backbone: on(5),
        }
    }

    pub fn bits(&self) -> u8 {
        [self.scpm, self.gam, self.tcpm, self.ca_scpm, self.ca_tcpm, self.semantic_backbone]
            .iter()
            .enumerate()
            .map(|(i, &b)| (b as u8) << i)
            .sum()
    }

    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "scpm" => &mut self.scpm,
            "gam" => &mut self.gam,
            "tcpm" => &mut self.tcpm,
            "ca_scpm" => &mut self.ca_scpm,
            "ca_tcpm" => &mut self.ca_tcpm,
            "semantic_backbone" => &mut self.semantic_backbone,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub base_channels: usize,
    pub enc_blocks: [usize; LEVELS],
    pub dec_blocks: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub prune_ratio_scpm: f64,
    pub prune_ratio_tcpm: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub prompt: String,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::desk()
    }
}

impl FusionConfig {
    /// Small configuration used by tests and examples.
    pub fn desk() -> Self {
        FusionConfig {
            base_channels: 8,
            enc_blocks: [1, 1, 1, 1],
            dec_blocks: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            prune_ratio_scpm: 0.7,
            prune_ratio_tcpm: 0.5,
            ablation: Ablation::FULL,
            seed: 0,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }

    /// Full-size configuration.
    pub fn full() -> Self {
        FusionConfig {
            base_channels: 48,
            enc_blocks: [4, 6, 6, 8],
            dec_blocks: [2, 2, 2, 2],
            ..FusionConfig::desk()
        }
    }

    /// Channel width at encoder level `i`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Output width of the skip fusion at `level`.
    pub fn skip_width(&self, level: usize) -> Result<usize> {
        let w = self.width(level);
        Ok(if !self.ablation.tcpm {
            w
        } else if self.ablation.ca_tcpm {
            2 * keep_count(2 * w, self.prune_ratio_tcpm)?
        } else {
            4 * w
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".to_string());
        }
        for (name, r) in [("prune_ratio_scpm", self.prune_ratio_scpm), ("prune_ratio_tcpm", self.prune_ratio_tcpm)] {
            if !(r > 0.0 && r <= 1.0) {
                problems.push(format!("{name} = {r} not in (0, 1]"));
            }
        }
        if self.prompt.is_empty() {
            problems.push("prompt must not be empty".into());
        }
        if problems.is_empty() {
            let stem = 2 * self.base_channels;
            if self.ablation.scpm && self.ablation.ca_scpm && stem % crate::nn::SE_REDUCTION != 0 {
                problems.push(format!("stem: SCPM attention needs 2*base_channels = {stem} divisible by 4"));
            }
            for level in 0..LEVELS {
                let w = self.width(level);
                let h = self.heads[level];
                if self.enc_blocks[level] == 0 && self.dec_blocks[level] == 0 && h == 0 {
                    problems.push(format!("level {level}: heads must be positive"));
                    continue;
                }
                if h == 0 || w % h != 0 {
                    problems.push(format!("level {level}: {h} heads do not divide width {w}"));
                    continue;
                }
                if self.ablation.tcpm {
                    if self.ablation.ca_tcpm && (2 * w) % crate::nn::SE_REDUCTION != 0 {
                        problems.push(format!("level {level}: TCPM attention needs {} divisible by 4", 2 * w));
                    }
                    match self.skip_width(level) {
                        Ok(s) if s % h != 0 => {
                            problems.push(format!("level {level}: {h} heads do not divide TCPM width {s}"))
                        }
                        Err(e) => problems.push(format!("level {level}: {e}")),
                        _ => {}
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn write_arch(&self, out: &mut String) {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "base_channels = {}", self.base_channels);
        let _ = writeln!(out, "enc_blocks = {}", list(&self.enc_blocks));
        let _ = writeln!(out, "dec_blocks = {}", list(&self.dec_blocks));
        let _ = writeln!(out, "heads = {}", list(&self.heads));
        let _ = writeln!(out, "prune_ratio_scpm = {}", self.prune_ratio_scpm);
        let _ = writeln!(out, "prune_ratio_tcpm = {}", self.prune_ratio_tcpm);
        let a = self.ablation;
        for (name, v) in Ablation::NAMES.iter().zip([a.scpm, a.gam, a.tcpm, a.ca_scpm, a.ca_tcpm, a.semantic_backbone]) {
            let _ = writeln!(out, "{name} = {v}");
        }
    }

    /// Hash of the fields that determine parameter names and shapes.
    pub fn architecture_digest(&self) -> u64 {
        let mut s = String::new();
        self.write_arch(&mut s);
        fnv_digest(s.as_bytes())
    }
}

pub fn fnv_digest(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Everything a command needs: model, schedule and paths.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: FusionConfig,
    pub schedule: TrainSchedule,
    pub checkpoint: Option<PathBuf>,
    /// `UPEMB1` file serving both semantic and text vectors; stubs when absent.
    pub embeddings: Option<PathBuf>,
    pub train_a: Option<PathBuf>,
    pub train_b: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_levels(key: &str, v: &str) -> Result<[usize; LEVELS]> {
    let items = v
        .split(',')
        .map(|s| parse_value::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|v: Vec<usize>| Error::Config(format!("{key}: expected {LEVELS} values, got {}", v.len())))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.model.validate()?;
        cfg.schedule.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key; used by the parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.schedule;
        match key {
            "base_channels" => m.base_channels = parse_value(key, value)?,
            "enc_blocks" => m.enc_blocks = parse_levels(key, value)?,
            "dec_blocks" => m.dec_blocks = parse_levels(key, value)?,
            "heads" => m.heads = parse_levels(key, value)?,
            "prune_ratio_scpm" => m.prune_ratio_scpm = parse_value(key, value)?,
            "prune_ratio_tcpm" => m.prune_ratio_tcpm = parse_value(key, value)?,
            "seed" => m.seed = parse_value(key, value)?,
            "prompt" => m.prompt = value.to_string(),
            "epochs" => s.epochs = parse_value(key, value)?,
            "steps" => s.steps = Some(parse_value(key, value)?),
            "batch" => s.batch = parse_value(key, value)?,
            "crop" => s.crop = parse_value(key, value)?,
            "lr0" => s.lr0 = parse_value(key, value)?,
            "lr_end" => s.lr_end = parse_value(key, value)?,
            "beta1" => s.adam.beta1 = parse_value(key, value)?,
            "beta2" => s.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => s.adam.eps = parse_value(key, value)?,
            "checkpoint" => self.checkpoint = Some(value.into()),
            "embeddings" => self.embeddings = Some(value.into()),
            "train_a" => self.train_a = Some(value.into()),
            "train_b" => self.train_b = Some(value.into()),
            "log" => self.log = Some(value.into()),
            other => match m.ablation.flag_mut(other) {
                Some(flag) => *flag = parse_value(key, value)?,
                None => return Err(Error::Config(format!("unknown key {other:?}"))),
            },
        }
        Ok(())
    }

    /// Fully resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.model.write_arch(&mut out);
        let _ = writeln!(out, "seed = {}", self.model.seed);
        let _ = writeln!(out, "prompt = {}", self.model.prompt);
        let s = &self.schedule;
        let _ = writeln!(out, "epochs = {}", s.epochs);
        if let Some(n) = s.steps {
            let _ = writeln!(out, "steps = {n}");
        }
        let _ = writeln!(out, "batch = {}", s.batch);
        let _ = writeln!(out, "crop = {}", s.crop);
        let _ = writeln!(out, "lr0 = {}", s.lr0);
        let _ = writeln!(out, "lr_end = {}", s.lr_end);
        let _ = writeln!(out, "beta1 = {}", s.adam.beta1);
        let _ = writeln!(out, "beta2 = {}", s.adam.beta2);
        let _ = writeln!(out, "adam_eps = {}", s.adam.eps);
        for (k, v) in [
            ("checkpoint", &self.checkpoint),
            ("embeddings", &self.embeddings),
            ("train_a", &self.train_a),
            ("train_b", &self.train_b),
            ("log", &self.log),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "{k} = {}", p.display());
            }
        }
        out
    }

    /// Digest of the resolved configuration, printed by every command.
    pub fn digest(&self) -> u64 {
        fnv_digest(self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.set("gam", "false").unwrap();
        cfg.set("prompt", "medical image fusion").unwrap();
        cfg.set("steps", "12").unwrap();
        cfg.set("checkpoint", "/tmp/x.ckpt").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_and_comments() {
        let err = RunConfig::parse("# fine\nbase_channels = 8\ncolour = red\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn validation_names_the_level() {
        let mut c = FusionConfig::desk();
        c.heads = [1, 2, 3, 8];
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("level 2"), "{msg}");
        assert!(FusionConfig::full().validate().is_ok());
    }

    #[test]
    fn ablation_bits_round_trip() {
        for b in 0..64u8 {
            assert_eq!(Ablation::from_bits(b).bits(), b);
        }
        assert_eq!(Ablation::from_bits(63), Ablation::FULL);
    }

    #[test]
    fn digest_ignores_seed_and_prompt() {
        let a = FusionConfig::desk();
        let b = FusionConfig { seed: 9, prompt: "x".into(), ..FusionConfig::desk() };
        assert_eq!(a.architecture_digest(), b.architecture_digest());
        assert_ne!(a.architecture_digest(), FusionConfig::full().architecture_digest());
    }
}
