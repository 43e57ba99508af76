//! Flat `key=value` run configuration.
//!
//! Every key has a default; a config file and then command-line flags
//! override it. Unknown keys are rejected. [`RunConfig::to_text`] gives the
//! fully resolved configuration that each run writes beside its outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pfdnet::{PerspSource, PfdnetConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // PENet
    ("width_mult", "1/8"),
    ("penet_epochs", "60"),
    ("penet_lr", "1e-3"),
    ("penet_batch", "8"),
    ("penet_downsample", "8"),
    // joint training with PENet: supervised | weak
    ("penet_joint", "supervised"),
    // counting network
    ("iterations", "200"),
    ("batch", "4"),
    ("lr", "1e-4"),
    ("persp_source", "gt"),
    ("lambda_persp", "1.0"),
    ("flip_prob", "0.5"),
    ("persp_unit", "16"),
    ("person_height", "1.75"),
    ("pfc_count", "6"),
    ("backbone_channels", "16,32,64"),
    ("pfc_channels", "64,64,64,32,32,16"),
    ("init", "he"),
    // synthetic data
    ("scenes", "50"),
    ("image_size", "128,128"),
    ("heads", "10,40"),
    // benchmarks
    ("bench_repeats", "5"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    /// A positive number, also accepting `a/b` fractions.
    pub fn fraction(&self, key: &str) -> Result<f32> {
        let raw = self.raw(key);
        let v = match raw.split_once('/') {
            Some((a, b)) => {
                let a: f32 = a.trim().parse().map_err(|_| Error::Config(format!("{key}: {raw:?}")))?;
                let b: f32 = b.trim().parse().map_err(|_| Error::Config(format!("{key}: {raw:?}")))?;
                a / b
            }
            None => raw.parse().map_err(|_| Error::Config(format!("{key}: {raw:?}")))?,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{key} must be positive, got {raw:?}")));
        }
        Ok(v)
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: bad list entry {s:?}")))
            })
            .collect()
    }

    pub fn pair(&self, key: &str) -> Result<(usize, usize)> {
        match self.list(key)?.as_slice() {
            &[a, b] => Ok((a, b)),
            _ => Err(Error::Config(format!("{key} needs two comma-separated values"))),
        }
    }

    pub fn pfdnet_config(&self) -> Result<PfdnetConfig> {
        let init_std = match self.raw("init") {
            "he" => None,
            s => Some(
                s.strip_prefix("gaussian:")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("init must be 'he' or 'gaussian:<std>', got {s:?}")))?,
            ),
        };
        let cfg = PfdnetConfig {
            backbone_channels: self.list("backbone_channels")?,
            pfc_channels: self.list("pfc_channels")?,
            pfc_count: self.get("pfc_count")?,
            persp_source: self.raw("persp_source").parse::<PerspSource>()?,
            persp_unit: self.get("persp_unit")?,
            penet_downsample: self.get("penet_downsample")?,
            init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layered_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nseed = 7\n\nwidth_mult=1/16\n").unwrap();
        c.set("lr", "3e-4").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 7);
        assert_eq!(c.fraction("width_mult").unwrap(), 1.0 / 16.0);
        assert_eq!(c.get::<f32>("lr").unwrap(), 3e-4);
        assert!(c.to_text().contains("seed=7\n"));
        assert!(matches!(c.apply_text("bogus=1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("no equals sign"), Err(Error::Config(_))));
    }

    #[test]
    fn builds_network_config() {
        let mut c = RunConfig::default();
        assert_eq!(c.pfdnet_config().unwrap(), PfdnetConfig::default());
        c.set("persp_source", "mean").unwrap();
        c.set("init", "gaussian:0.01").unwrap();
        let p = c.pfdnet_config().unwrap();
        assert_eq!(p.persp_source, PerspSource::Mean);
        assert_eq!(p.init_std, Some(0.01));
        c.set("pfc_channels", "1,2").unwrap();
        assert!(c.pfdnet_config().is_err());
    }
}
