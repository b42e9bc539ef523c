//! Line-oriented key=value configuration files.
//!
//! `#` starts a comment (whole line or trailing), blank lines are
//! skipped, unknown and duplicate keys are errors that name the key and
//! its line. Every omitted key takes the documented default
//! ([`LabConfig::default`]); `snr_db` is an alternative spelling for the
//! forward noise (`sigma1_sq = 10^(-snr_db/10)`) and may not be combined
//! with an explicit `sigma1_sq`.

use std::collections::BTreeSet;

use crate::decoder::MergeCase;
use crate::eval::{StoppingRule, SweepSpec};
use crate::model_io::{parse_direction, parse_head, parse_mode, parse_power_layer};
use crate::rng::snr_db_to_noise_var;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepUnit {
    Linear,
    Db,
}

/// Everything the CLI can be told: training plus evaluation/sweep knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub train: TrainConfig,
    pub target_errors: u64,
    pub max_trials: u64,
    /// Sweep grid in the unit given by `sweep_unit`.
    pub sweep_sigma2: Vec<f64>,
    pub sweep_unit: SweepUnit,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            train: TrainConfig::default(),
            target_errors: 100,
            max_trials: 1_000_000,
            sweep_sigma2: vec![0.01, 0.1, 1.0],
            sweep_unit: SweepUnit::Linear,
        }
    }
}

impl LabConfig {
    /// Sweep grid converted to linear variance units.
    pub fn sweep_grid_linear(&self) -> Vec<f64> {
        match self.sweep_unit {
            SweepUnit::Linear => self.sweep_sigma2.clone(),
            SweepUnit::Db => self
                .sweep_sigma2
                .iter()
                .map(|&db| 10f64.powf(db / 10.0))
                .collect(),
        }
    }

    pub fn stopping_rule(&self) -> StoppingRule {
        StoppingRule {
            target_errors: self.target_errors,
            max_trials: self.max_trials,
        }
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            sigma2_grid: self.sweep_grid_linear(),
            stop: self.stopping_rule(),
        }
    }

    /// The full resolved configuration, defaults included, one key per
    /// line in config-file syntax.
    pub fn resolved_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("k", t.k.to_string());
        kv("n", t.n.to_string());
        kv("sigma1_sq", format!("{:.17e}", t.sigma1_sq));
        kv("sigma2_sq", format!("{:.17e}", t.sigma2_sq));
        kv("train_samples", t.train_samples.to_string());
        kv("batch", t.batch.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lr0", t.lr0.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("enc_hidden", t.enc_hidden.to_string());
        kv("enc_layers", t.enc_layers.to_string());
        kv("dec_hidden", t.dec_hidden.to_string());
        kv("dec_layers", t.dec_layers.to_string());
        kv(
            "direction",
            match t.direction {
                crate::decoder::Direction::Bi => "bi".into(),
                crate::decoder::Direction::Uni => "uni".into(),
            },
        );
        kv("merge_case", t.merge_case.id().to_string());
        kv(
            "head",
            match t.head {
                crate::decoder::DecoderHead::Softmax => "softmax".into(),
                crate::decoder::DecoderHead::Sigmoid => "sigmoid".into(),
            },
        );
        kv(
            "mode",
            match t.mode {
                crate::encoder::EncoderMode::Feedback => "feedback".into(),
                crate::encoder::EncoderMode::OpenLoop => "open-loop".into(),
            },
        );
        kv(
            "power_layer",
            match t.power_layer {
                crate::encoder::PowerLayer::NormPower => "norm-power".into(),
                crate::encoder::PowerLayer::NormOnly => "norm-only".into(),
                crate::encoder::PowerLayer::PowerOnly => "power-only".into(),
                crate::encoder::PowerLayer::None => "none".into(),
            },
        );
        kv("detach_feedback", t.detach_feedback.to_string());
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("target_errors", self.target_errors.to_string());
        kv("max_trials", self.max_trials.to_string());
        kv(
            "sweep_sigma2",
            self.sweep_sigma2
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "sweep_unit",
            match self.sweep_unit {
                SweepUnit::Linear => "linear".into(),
                SweepUnit::Db => "db".into(),
            },
        );
        out
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigParse {
        line,
        msg: msg.into(),
    }
}

/// Parses config text into a [`LabConfig`] over the documented defaults.
pub fn parse_config(text: &str) -> Result<LabConfig> {
    let mut cfg = LabConfig::default();
    let mut seen = BTreeSet::new();
    let mut snr_db: Option<(usize, f64)> = None;
    let mut sigma1_line: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.split_once('#') {
            Some((before, _)) => before,
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| perr(lineno, format!("expected key=value, got {line:?}")))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(perr(lineno, format!("duplicate key \"{key}\"")));
        }

        let parse_f64 = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| perr(lineno, format!("\"{key}\" expects a number, got {value:?}")))
        };
        let parse_usize = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| perr(lineno, format!("\"{key}\" expects a non-negative integer, got {value:?}")))
        };
        let parse_u64 = || -> Result<u64> {
            value
                .parse::<u64>()
                .map_err(|_| perr(lineno, format!("\"{key}\" expects a non-negative integer, got {value:?}")))
        };
        let wrap = |e: Error| -> Error {
            match e {
                Error::InvalidParam(msg) => perr(lineno, msg),
                other => other,
            }
        };

        match key {
            "k" => cfg.train.k = parse_usize()?,
            "n" => cfg.train.n = parse_usize()?,
            "snr_db" => snr_db = Some((lineno, parse_f64()?)),
            "sigma1_sq" => {
                sigma1_line = Some(lineno);
                cfg.train.sigma1_sq = parse_f64()?;
            }
            "sigma2_sq" => cfg.train.sigma2_sq = parse_f64()?,
            "train_samples" => cfg.train.train_samples = parse_usize()?,
            "batch" => cfg.train.batch = parse_usize()?,
            "epochs" => cfg.train.epochs = parse_usize()?,
            "lr0" => cfg.train.lr0 = parse_f64()?,
            "lr_decay" => cfg.train.lr_decay = parse_f64()?,
            "clip_norm" => cfg.train.clip_norm = parse_f64()?,
            "enc_hidden" => cfg.train.enc_hidden = parse_usize()?,
            "enc_layers" => cfg.train.enc_layers = parse_usize()?,
            "dec_hidden" => cfg.train.dec_hidden = parse_usize()?,
            "dec_layers" => cfg.train.dec_layers = parse_usize()?,
            "direction" => cfg.train.direction = parse_direction(value).map_err(wrap)?,
            "merge_case" => {
                let id: u8 = value
                    .parse()
                    .map_err(|_| perr(lineno, format!("merge_case expects 1-5, got {value:?}")))?;
                cfg.train.merge_case = MergeCase::from_id(id).map_err(wrap)?;
            }
            "head" => cfg.train.head = parse_head(value).map_err(wrap)?,
            "mode" => cfg.train.mode = parse_mode(value).map_err(wrap)?,
            "power_layer" => cfg.train.power_layer = parse_power_layer(value).map_err(wrap)?,
            "detach_feedback" => {
                cfg.train.detach_feedback = value
                    .parse()
                    .map_err(|_| perr(lineno, format!("detach_feedback expects true/false, got {value:?}")))?;
            }
            "seed" => cfg.train.seed = parse_u64()?,
            "checkpoint_every" => cfg.train.checkpoint_every = parse_usize()?,
            "target_errors" => cfg.target_errors = parse_u64()?,
            "max_trials" => cfg.max_trials = parse_u64()?,
            "sweep_sigma2" => {
                cfg.sweep_sigma2 = value
                    .split(',')
                    .map(|v| {
                        v.trim().parse::<f64>().map_err(|_| {
                            perr(lineno, format!("sweep_sigma2 entry {v:?} is not a number"))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if cfg.sweep_sigma2.is_empty() {
                    return Err(perr(lineno, "sweep_sigma2 must be non-empty"));
                }
            }
            "sweep_unit" => {
                cfg.sweep_unit = match value {
                    "linear" => SweepUnit::Linear,
                    "db" => SweepUnit::Db,
                    _ => {
                        return Err(perr(
                            lineno,
                            format!("sweep_unit expects linear or db, got {value:?}"),
                        ))
                    }
                };
            }
            _ => return Err(perr(lineno, format!("unknown key \"{key}\""))),
        }
    }

    if let Some((line, db)) = snr_db {
        if let Some(other) = sigma1_line {
            return Err(perr(
                line.max(other),
                "snr_db and sigma1_sq both given; pick one",
            ));
        }
        cfg.train.sigma1_sq = snr_db_to_noise_var(db);
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = parse_config("k = 4\nn = 12\nseed = 9\n# comment\n\nepochs=20").unwrap();
        assert_eq!(cfg.train.k, 4);
        assert_eq!(cfg.train.n, 12);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 20);
        // Untouched keys keep defaults.
        assert_eq!(cfg.train.enc_hidden, 50);
        assert_eq!(cfg.target_errors, 100);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let e = parse_config("k = 4\nfoo=1\n").unwrap_err();
        match e {
            Error::ConfigParse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("foo"), "{msg}");
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let e = parse_config("k = 4\nk = 5\n").unwrap_err();
        assert!(format!("{e}").contains("duplicate"));
    }

    #[test]
    fn snr_db_maps_to_sigma1() {
        let cfg = parse_config("snr_db = 1.0\n").unwrap();
        assert!((cfg.train.sigma1_sq - 0.794).abs() < 1e-3);
        let e = parse_config("snr_db = 1.0\nsigma1_sq = 0.5\n").unwrap_err();
        assert!(format!("{e}").contains("pick one"));
    }

    #[test]
    fn sweep_units_convert() {
        let cfg = parse_config("sweep_sigma2 = -20, -10, 0\nsweep_unit = db\n").unwrap();
        let grid = cfg.sweep_grid_linear();
        assert!((grid[0] - 0.01).abs() < 1e-12);
        assert!((grid[1] - 0.1).abs() < 1e-12);
        assert!((grid[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = parse_config("k=5\nn=15\nmerge_case=2\nhead=sigmoid\nsweep_unit=db\n").unwrap();
        let text = cfg.resolved_text();
        let re = parse_config(&text).unwrap();
        assert_eq!(cfg, re);
        // Every documented key appears in the resolved dump.
        for key in [
            "k", "n", "sigma1_sq", "sigma2_sq", "train_samples", "batch", "epochs", "lr0",
            "lr_decay", "clip_norm", "enc_hidden", "enc_layers", "dec_hidden", "dec_layers",
            "direction", "merge_case", "head", "mode", "power_layer", "detach_feedback", "seed",
            "checkpoint_every", "target_errors", "max_trials", "sweep_sigma2", "sweep_unit",
        ] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} "))), "missing {key}");
        }
    }
}
