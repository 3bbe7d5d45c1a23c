//! Experiment configuration: every hyper-parameter, ablation switch and
//! dataset setting in one flat record, parsed from `key = value` text.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CcvcError, Result};
use crate::losses::{ConfidenceSource, LossWeights};
use crate::model::{ArchConfig, INPUT_MULTIPLE};

/// A non-negative rational written as `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(CcvcError::Parameter {
                name: "fraction",
                reason: "zero denominator".into(),
            });
        }
        Ok(Self { num, den })
    }

    /// `floor(self * total)` in exact integer arithmetic.
    pub fn floor_of(&self, total: usize) -> usize {
        ((self.num as u128 * total as u128) / self.den as u128) as usize
    }

    pub fn in_unit_interval(&self) -> bool {
        self.num > 0 && self.num <= self.den
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = CcvcError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CcvcError::Parameter {
            name: "fraction",
            reason: format!("`{s}` is not of the form num/den"),
        };
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Fraction::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All settings of one run. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // Objective.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub omega_c: f64,
    pub gamma: f64,

    // Ablation switches.
    pub use_dis: bool,
    pub use_map: bool,
    pub use_cpl: bool,
    pub use_strong_aug: bool,
    pub teacher_confidence: bool,
    /// Zero the consistency weight inside cutout boxes.
    pub mask_cutout: bool,

    // Optimisation.
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,

    // Model.
    pub base_width: usize,
    pub feature_channels: usize,

    // Data.
    /// Folder dataset root with `images/` and `labels/`; synthetic when unset.
    pub data_dir: Option<String>,
    pub data_seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    /// Total synthetic scenes before the validation carve-out.
    pub scenes: usize,
    pub val_fraction: Fraction,
    /// Share of the training scenes that keep their labels.
    pub labelled_fraction: Fraction,

    // Weak augmentation.
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,

    // Strong augmentation.
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub cutout_prob: f64,

    // Evaluation and output.
    pub confidence_threshold: f64,
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let weights = LossWeights::default();
        Self {
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            lambda3: weights.lambda3,
            omega_c: 2.0,
            gamma: 0.9,
            use_dis: true,
            use_map: true,
            use_cpl: true,
            use_strong_aug: true,
            teacher_confidence: false,
            mask_cutout: false,
            base_lr: 0.001,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            base_width: 8,
            feature_channels: 32,
            data_dir: None,
            data_seed: 0,
            num_classes: 4,
            image_size: 64,
            scenes: 550,
            val_fraction: Fraction { num: 1, den: 5 },
            labelled_fraction: Fraction { num: 1, den: 11 },
            flip_prob: 0.5,
            scale_min: 0.75,
            scale_max: 1.25,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            cutout_prob: 0.5,
            confidence_threshold: 0.9,
            checkpoint_every: 10,
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> CcvcError {
    CcvcError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(config_err(key, format!("{v} outside [0, 1]")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("confidence_threshold", self.confidence_threshold)?;
        for (key, v) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("cutout_prob", self.cutout_prob),
        ] {
            unit(key, v)?;
        }
        if self.omega_c.is_nan() || self.omega_c < 1.0 {
            return Err(config_err("omega_c", format!("{} < 1", self.omega_c)));
        }
        for (key, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("base_lr", self.base_lr),
            ("poly_power", self.poly_power),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(key, format!("{v} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(config_err(
                "batch_size",
                format!("{} is not a positive even number", self.batch_size),
            ));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(config_err("scale_min", "need 0 < scale_min <= scale_max"));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(INPUT_MULTIPLE) {
            return Err(config_err(
                "image_size",
                format!(
                    "{} must be a multiple of {INPUT_MULTIPLE} and >= 16",
                    self.image_size
                ),
            ));
        }
        if !self.labelled_fraction.in_unit_interval() {
            return Err(config_err("labelled_fraction", "must lie in (0, 1]"));
        }
        if self.val_fraction.num == 0 || self.val_fraction.num >= self.val_fraction.den {
            return Err(config_err("val_fraction", "must lie in (0, 1)"));
        }
        if self.checkpoint_every == 0 {
            return Err(config_err("checkpoint_every", "must be positive"));
        }
        self.arch()
            .validate()
            .map_err(|e| config_err("num_classes", e.to_string()))?;
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            in_channels: 3,
            num_classes: self.num_classes,
            base_width: self.base_width,
            feature_channels: self.feature_channels,
        }
    }

    /// Loss weights with disabled terms zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: if self.use_dis { self.lambda3 } else { 0.0 },
        }
    }

    /// Conflict weight actually applied; CPL off means unit weight.
    pub fn effective_omega(&self) -> f64 {
        if self.use_cpl {
            self.omega_c
        } else {
            1.0
        }
    }

    pub fn confidence_source(&self) -> ConfidenceSource {
        if self.teacher_confidence {
            ConfidenceSource::Teacher
        } else {
            ConfidenceSource::Own
        }
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self).expect("config serialises") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        };
        assign(&mut map, key, raw)?;
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| config_err(key, e.to_string()))?;
        Ok(())
    }

    /// Renders the config in the same `key = value` format `parse_config` reads.
    pub fn to_kv_string(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serialises") else {
            unreachable!("config is a struct")
        };
        map.iter()
            .map(|(k, v)| {
                let text = match v {
                    Value::String(s) => s.clone(),
                    Value::Null => String::new(),
                    other => other.to_string(),
                };
                format!("{k} = {text}\n")
            })
            .collect()
    }
}

fn assign(map: &mut Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let current = map.get(key).ok_or_else(|| config_err(key, "unknown key"))?;
    let raw = raw.trim();
    let value = match current {
        Value::Bool(_) => Value::Bool(match raw {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => return Err(config_err(key, format!("expected a boolean, got `{raw}`"))),
        }),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            Value::from(raw.parse::<u64>().map_err(|_| {
                config_err(key, format!("expected a non-negative integer, got `{raw}`"))
            })?)
        }
        Value::Number(_) => {
            let v: f64 = raw
                .parse()
                .map_err(|_| config_err(key, format!("expected a number, got `{raw}`")))?;
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| config_err(key, format!("non-finite number `{raw}`")))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        // Optional string settings.
        Value::Null => {
            if raw.is_empty() {
                Value::Null
            } else {
                Value::String(raw.to_string())
            }
        }
        _ => return Err(config_err(key, "unsupported value type")),
    };
    map.insert(key.to_string(), value);
    Ok(())
}

/// Parses a flat `key = value` document (blank lines and `#` comments
/// allowed) on top of the defaults, then applies `overrides` in order and
/// validates the result.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut map =
        match serde_json::to_value(ExperimentConfig::default()).expect("config serialises") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            config_err(line, format!("line {}: expected `key = value`", lineno + 1))
        })?;
        assign(&mut map, key.trim(), value)?;
    }
    for (key, value) in overrides {
        assign(&mut map, key.trim(), value)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| config_err("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, overrides)
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.omega_c, 2.0);
        assert_eq!(cfg.gamma, 0.9);
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.lambda3), (5.0, 1.0, 2.0));
    }

    #[test]
    fn gamma_out_of_range_names_key() {
        match parse_config_str("", &[ov("gamma", "1.5")]) {
            Err(CcvcError::Config { key, .. }) => assert_eq!(key, "gamma"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_beat_file() {
        let cfg = parse_config_str("lambda3 = 1\n", &[ov("lambda3", "0")]).unwrap();
        assert_eq!(cfg.lambda3, 0.0);
        let cfg = parse_config_str("lambda3 = 1\n", &[]).unwrap();
        assert_eq!(cfg.lambda3, 1.0);
    }

    #[test]
    fn every_key_follows_precedence() {
        let defaults = ExperimentConfig::default();
        let Value::Object(map) = serde_json::to_value(&defaults).unwrap() else {
            unreachable!()
        };
        for (key, value) in map {
            // A file value and a distinct override value per type.
            let (file_v, over_v) = match value {
                Value::Bool(b) => (format!("{}", !b), format!("{b}")),
                Value::Number(n) if n.is_u64() => {
                    let base = match key.as_str() {
                        "batch_size" => 2,
                        "image_size" => 16,
                        "num_classes" => 2,
                        _ => 1,
                    };
                    let step = if key == "image_size" {
                        16
                    } else if key == "batch_size" {
                        2
                    } else {
                        1
                    };
                    (format!("{}", base + step), format!("{}", base + 2 * step))
                }
                Value::Number(_) => match key.as_str() {
                    "omega_c" => ("1.5".into(), "3".into()),
                    "scale_min" => ("0.5".into(), "0.6".into()),
                    "scale_max" => ("1.5".into(), "1.6".into()),
                    _ => ("0.25".into(), "0.5".into()),
                },
                Value::String(_) => ("1/3".into(), "1/2".into()),
                Value::Null => ("a".into(), "b".into()),
                _ => unreachable!(),
            };
            let from_file = parse_config_str(&format!("{key} = {file_v}"), &[]).unwrap();
            let both =
                parse_config_str(&format!("{key} = {file_v}"), &[ov(&key, &over_v)]).unwrap();
            let get = |c: &ExperimentConfig| serde_json::to_value(c).unwrap()[&key].clone();
            assert_ne!(get(&from_file), get(&defaults), "file ignored for {key}");
            assert_ne!(get(&both), get(&from_file), "override ignored for {key}");
        }
    }

    #[test]
    fn unknown_key_and_type_mismatch() {
        assert!(matches!(
            parse_config_str("nope = 1", &[]),
            Err(CcvcError::Config { key, .. }) if key == "nope"
        ));
        assert!(matches!(
            parse_config_str("use_dis = maybe", &[]),
            Err(CcvcError::Config { key, .. }) if key == "use_dis"
        ));
        assert!(matches!(
            parse_config_str("epochs = -1", &[]),
            Err(CcvcError::Config { key, .. }) if key == "epochs"
        ));
    }

    #[test]
    fn invariants_are_checked() {
        assert!(parse_config_str("batch_size = 7", &[]).is_err());
        assert!(parse_config_str("omega_c = 0.5", &[]).is_err());
        assert!(parse_config_str("lambda2 = -1", &[]).is_err());
    }

    #[test]
    fn comments_and_kv_round_trip() {
        let text =
            "# a comment\n\nlambda1 = 2 # trailing\nuse_cpl = false\nlabelled_fraction = 1/4\n";
        let cfg = parse_config_str(text, &[]).unwrap();
        assert_eq!(cfg.lambda1, 2.0);
        assert!(!cfg.use_cpl);
        assert_eq!(cfg.effective_omega(), 1.0);
        assert_eq!(cfg.labelled_fraction, Fraction::new(1, 4).unwrap());
        let again = parse_config_str(&cfg.to_kv_string(), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn fraction_floor() {
        assert_eq!(Fraction::new(1, 4).unwrap().floor_of(8), 2);
        assert_eq!(Fraction::new(1, 11).unwrap().floor_of(440), 40);
        assert_eq!(Fraction::new(1, 1).unwrap().floor_of(7), 7);
    }
}
