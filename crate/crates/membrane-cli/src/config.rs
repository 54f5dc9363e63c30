//! Plain-text `key = value` configuration with `[section]` headers.
//!
//! Keys are validated against a fixed schema (unknown keys are rejected),
//! every parameter has a default, and `--set section.key=value` overrides
//! individual entries. The format is diffable and hand-editable; no runtime
//! dependency is involved in parsing it.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Result};
use membrane::dynamics::{Channel, ModeSpec};

/// All recognized keys with their documented defaults.
const SCHEMA: &[(&str, &str)] = &[
    ("run.seed", "42"),
    ("run.out", "out"),
    ("grid.lmax", "16"),
    ("time.dt", "auto"),
    ("time.t_end", "10.0"),
    ("time.sample_every", "10"),
    ("physics.b", "1.0"),
    ("physics.kappa", "auto"),
    ("initial.kind", "modes"),
    ("initial.modes", "2,0,1e-3,normal"),
    ("initial.band", "4"),
    ("initial.amplitude", "1e-3"),
    ("initial.r0", "1.05"),
    ("initial.rdot0", "0.0"),
    ("simulate.antialias", "true"),
    ("simulate.norm_indices", "2,4"),
    ("simulate.norm_threshold", "none"),
    ("simulate.checkpoint_every", "500"),
    ("linear.modes", "2,0,1.0"),
    ("linear.velocity_modes", ""),
    ("linear.norm_indices", "0,2"),
    ("split.modes", "2,0,1e-2,normal"),
    ("split.velocity_modes", ""),
    ("smoothing.samples", "200"),
    ("smoothing.pairs", "0,2;1,3"),
    ("nashmoser.tol", "1e-8"),
    ("nashmoser.max_iterations", "12"),
    ("nashmoser.schedule", "auto"),
    ("nashmoser.modes", "2,0,1e-4,normal"),
    ("nashmoser.velocity_modes", ""),
    ("lifespan.epsilons", "1e-2,3e-3,1e-3"),
    ("lifespan.threshold", "0.3"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: BTreeMap::new(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", lineno + 1))?;
                section = name.trim().to_string();
                if section.is_empty() {
                    bail!("line {}: empty section name", lineno + 1);
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", lineno + 1))?;
            let key = key.trim();
            if key.is_empty() {
                bail!("line {}: empty key", lineno + 1);
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            values.insert(full, value.trim().to_string());
        }
        let cfg = Self { values };
        cfg.reject_unknown_keys()?;
        Ok(cfg)
    }

    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("override must be section.key=value, got {spec:?}"))?;
        let key = key.trim().to_string();
        if !SCHEMA.iter().any(|(k, _)| *k == key) {
            bail!("unknown configuration key {key:?}");
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    fn reject_unknown_keys(&self) -> Result<()> {
        for key in self.values.keys() {
            if !SCHEMA.iter().any(|(k, _)| k == key) {
                bail!("unknown configuration key {key:?}");
            }
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        if let Some(v) = self.values.get(key) {
            return v;
        }
        SCHEMA
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, d)| *d)
            .unwrap_or_else(|| panic!("key {key} missing from schema"))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| anyhow!("{key}: expected a number, got {raw:?}"))
    }

    pub fn get_positive_f64(&self, key: &str) -> Result<f64> {
        let v = self.get_f64(key)?;
        if !(v > 0.0) {
            bail!("{key}: must be positive, got {v}");
        }
        Ok(v)
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| anyhow!("{key}: expected a nonnegative integer, got {raw:?}"))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| anyhow!("{key}: expected a nonnegative integer, got {raw:?}"))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => bail!("{key}: expected true/false, got {other:?}"),
        }
    }

    pub fn get_string(&self, key: &str) -> String {
        self.raw(key).to_string()
    }

    /// "auto" resolves to None, otherwise a positive float.
    pub fn get_auto_f64(&self, key: &str) -> Result<Option<f64>> {
        let raw = self.raw(key);
        if raw == "auto" {
            return Ok(None);
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| anyhow!("{key}: expected a number or \"auto\", got {raw:?}"))?;
        if !(v > 0.0) {
            bail!("{key}: must be positive, got {v}");
        }
        Ok(Some(v))
    }

    /// "none" resolves to None, otherwise a float.
    pub fn get_optional_f64(&self, key: &str) -> Result<Option<f64>> {
        let raw = self.raw(key);
        if raw == "none" {
            return Ok(None);
        }
        raw.parse()
            .map(Some)
            .map_err(|_| anyhow!("{key}: expected a number or \"none\", got {raw:?}"))
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.raw(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| anyhow!("{key}: bad number {s:?}"))
            })
            .collect()
    }

    pub fn get_u32_list_or_auto(&self, key: &str) -> Result<Option<Vec<u32>>> {
        let raw = self.raw(key);
        if raw == "auto" {
            return Ok(None);
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| anyhow!("{key}: bad index {s:?}"))
            })
            .collect::<Result<Vec<u32>>>()
            .map(Some)
    }

    /// Pairs "a,b;c,d" of grading indices.
    pub fn get_pair_list(&self, key: &str) -> Result<Vec<(f64, f64)>> {
        let raw = self.raw(key);
        let mut out = Vec::new();
        for entry in raw.split(';') {
            let entry = entry.trim();
            if entry.is_empty() {
                continue;
            }
            let parts: Vec<&str> = entry.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                bail!("{key}: expected pairs like \"0,2;1,3\", got {entry:?}");
            }
            let a: f64 = parts[0]
                .parse()
                .map_err(|_| anyhow!("{key}: bad number {:?}", parts[0]))?;
            let b: f64 = parts[1]
                .parse()
                .map_err(|_| anyhow!("{key}: bad number {:?}", parts[1]))?;
            out.push((a, b));
        }
        Ok(out)
    }

    /// Mode lists "l,m,amplitude,channel; ..." (channel optional, default
    /// normal).
    pub fn get_modes(&self, key: &str) -> Result<Vec<ModeSpec>> {
        let raw = self.raw(key);
        let mut out = Vec::new();
        for entry in raw.split(';') {
            let entry = entry.trim();
            if entry.is_empty() {
                continue;
            }
            let parts: Vec<&str> = entry.split(',').map(str::trim).collect();
            if parts.len() != 3 && parts.len() != 4 {
                bail!("{key}: expected l,m,amplitude[,channel], got {entry:?}");
            }
            let l: usize = parts[0]
                .parse()
                .map_err(|_| anyhow!("{key}: bad degree {:?}", parts[0]))?;
            let m: isize = parts[1]
                .parse()
                .map_err(|_| anyhow!("{key}: bad order {:?}", parts[1]))?;
            let amplitude: f64 = parts[2]
                .parse()
                .map_err(|_| anyhow!("{key}: bad amplitude {:?}", parts[2]))?;
            let channel = match parts.get(3).copied().unwrap_or("normal") {
                "normal" => Channel::Normal,
                "tangent" => Channel::Tangent,
                other => bail!("{key}: channel must be normal or tangent, got {other:?}"),
            };
            out.push(ModeSpec {
                l,
                m,
                amplitude,
                channel,
            });
        }
        Ok(out)
    }

    /// Fully-resolved view (defaults filled in) for the manifest echo.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (key, _) in SCHEMA {
            out.insert((*key).to_string(), self.raw(key).to_string());
        }
        out
    }

}
