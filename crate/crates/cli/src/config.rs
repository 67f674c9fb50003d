//! Run configuration: line-oriented `section.key = value` text merged with
//! command-line overrides. Every key is validated against the documented
//! set before any work starts, and the effective configuration is echoed
//! beside each command's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use frs_core::detector::{FrsNanoConfig, TrainConfig, UpsamplerKind};
use frs_core::dysample::RangeMode;
use frs_core::error::{Error, Result};
use frs_core::mcea::BranchId;

/// Documented keys with their defaults.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("model.input_size", "96"),
    ("model.widths", "8,16,32"),
    ("model.use_mcea", "false"),
    ("model.mcea_branches", "width,height,channel"),
    ("model.upsampler", "bilinear"),
    ("model.dysample_mode", "static"),
    ("model.classes", "8"),
    ("model.cells", "12"),
    ("train.epochs", "12"),
    ("train.batch_size", "8"),
    ("train.lr0", "0.01"),
    ("train.lrf", "0.01"),
    ("train.momentum", "0.937"),
    ("train.weight_decay", "0.0005"),
    ("train.seed", "0"),
    ("data.root", "."),
    ("data.train_manifest", ""),
    ("data.val_manifest", ""),
    ("data.image_size", "96"),
    ("data.count", "0"),
    ("data.train_images", "600"),
    ("data.val_images", "100"),
    ("data.small_targets", "6"),
    ("data.occluded_pairs", "2"),
    ("data.smoke_blobs", "3"),
    ("data.noise_level", "0.06"),
    ("eval.conf_threshold", "0.01"),
    ("eval.iou_threshold", "0.5"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: KNOWN_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Parse a config file into the defaults. Lines are `section.key = value`;
    /// `#` starts a comment; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::defaults();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `section.key = value`", path.display(), i + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from defaults"))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: `{}` is not a non-negative integer", self.get(key))))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: `{}` is not a non-negative integer", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: `{}` is not a number", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("{key}: `{other}` is not a boolean"))),
        }
    }

    /// Effective configuration as stable, diff-friendly text.
    pub fn echo_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn model_config(&self) -> Result<FrsNanoConfig> {
        let widths_raw = self.get("model.widths");
        let widths: Vec<usize> = widths_raw
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("model.widths: `{widths_raw}` is not a comma list of integers")))?;
        if widths.len() != 3 {
            return Err(Error::Config("model.widths needs exactly three entries".into()));
        }
        let upsampler = match self.get("model.upsampler") {
            "bilinear" => UpsamplerKind::FixedBilinear,
            "dysample" => UpsamplerKind::Dysample,
            other => {
                return Err(Error::Config(format!(
                    "model.upsampler: `{other}` is not one of bilinear|dysample"
                )))
            }
        };
        let dysample_mode = match self.get("model.dysample_mode") {
            "static" => RangeMode::Static,
            "dynamic" => RangeMode::Dynamic,
            other => {
                return Err(Error::Config(format!(
                    "model.dysample_mode: `{other}` is not one of static|dynamic"
                )))
            }
        };
        let cfg = FrsNanoConfig {
            input_size: self.get_usize("model.input_size")?,
            widths: [widths[0], widths[1], widths[2]],
            use_mcea: self.get_bool("model.use_mcea")?,
            mcea_branches: self.mcea_branches()?,
            upsampler,
            dysample_mode,
            classes: self.get_usize("model.classes")?,
            cells: self.get_usize("model.cells")?,
        };
        // pre-flight: rejects an enabled attention module with an empty
        // branch set, among other config conflicts
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mcea_branches(&self) -> Result<Vec<BranchId>> {
        let raw = self.get("model.mcea_branches");
        let mut out = Vec::new();
        for part in raw.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            out.push(match part {
                "width" => BranchId::Width,
                "height" => BranchId::Height,
                "channel" => BranchId::Channel,
                other => {
                    return Err(Error::Config(format!(
                        "model.mcea_branches: `{other}` is not one of width|height|channel"
                    )))
                }
            });
        }
        Ok(out)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            epochs: self.get_usize("train.epochs")?,
            batch_size: self.get_usize("train.batch_size")?,
            lr0: self.get_f64("train.lr0")?,
            lrf: self.get_f64("train.lrf")?,
            momentum: self.get_f64("train.momentum")?,
            weight_decay: self.get_f64("train.weight_decay")?,
            seed: self.get_u64("train.seed")?,
        };
        tc.validate()?;
        Ok(tc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_all_keys() {
        let cfg = RunConfig::defaults();
        assert!(cfg.model_config().is_ok());
        assert!(cfg.train_config().is_ok());
        assert_eq!(cfg.get("train.momentum"), "0.937");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::defaults();
        assert!(cfg.set("model.nonsense", "1").is_err());
        assert!(cfg.set("train.epochs", "4").is_ok());
    }

    #[test]
    fn empty_branch_set_with_mcea_is_preflight_error() {
        let mut cfg = RunConfig::defaults();
        cfg.set("model.use_mcea", "true").unwrap();
        cfg.set("model.mcea_branches", "").unwrap();
        assert!(cfg.model_config().is_err());
    }

    #[test]
    fn echo_is_sorted_and_stable() {
        let cfg = RunConfig::defaults();
        let a = cfg.echo_text();
        let b = cfg.echo_text();
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
    }
}
