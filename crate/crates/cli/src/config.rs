//! Flat `key = value` run configuration shared by every subcommand.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use stpc::dataio::{SyntheticKind, SyntheticSpec};
use stpc::segnet::NetworkConfig;

use crate::CliError;

/// Keys that are not network settings, with their defaults.
pub const RUN_KEYS: [(&str, &str); 19] = [
    ("kind", "oriented-planes"),
    ("clouds", "20"),
    ("points", "1024"),
    ("noise", "0.01"),
    ("data_dir", "data"),
    ("out_dir", "out"),
    ("checkpoint", ""),
    ("resume", ""),
    ("cloud", ""),
    ("point_index", "0"),
    ("coeff_mode", "post"),
    ("seeds", "1"),
    ("atom_grid", "1,4,9,16,25,36"),
    ("gc_points", "64"),
    ("gc_samples", "64"),
    ("h", "1e-6"),
    ("tol", "1e-4"),
    ("floor", "1e-4"),
    ("corrupt_backward", "false"),
];

/// Every accepted key: the run keys followed by the network keys.
pub fn all_keys() -> Vec<&'static str> {
    RUN_KEYS.iter().map(|(k, _)| *k).chain(NetworkConfig::KEYS).collect()
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub network: NetworkConfig,
    values: Vec<(&'static str, String)>,
    explicit: BTreeSet<&'static str>,
}

fn field(key: &str) -> Option<&'static str> {
    all_keys().into_iter().find(|k| *k == key)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            values: RUN_KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = field(key).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        self.explicit.insert(key);
        if self.network.set(key, value)? {
            return Ok(());
        }
        let slot = self.values.iter_mut().find(|(k, _)| *k == key).expect("run key");
        slot.1 = value.trim().to_string();
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| CliError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values.iter().find(|(k, _)| *k == key).expect("run key").1
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("invalid value for `{key}`: cannot parse `{v}`")))
    }

    pub fn flag(&self, key: &'static str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(CliError::Config(format!("invalid value for `{key}`: expected true or false, found `{v}`"))),
        }
    }

    pub fn path(&self, key: &'static str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::Config(format!("`{key}` is required"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn list<T: std::str::FromStr>(&self, key: &'static str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Config(format!("invalid value for `{key}`: cannot parse `{s}`")))
            })
            .collect()
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec, CliError> {
        let spec = SyntheticSpec {
            kind: self.raw("kind").parse::<SyntheticKind>()?,
            clouds: self.parse("clouds")?,
            points: self.parse("points")?,
            classes: self.network.classes,
            noise: self.parse("noise")?,
            seed: self.network.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").unwrap();
        }
        for (k, v) in self.network.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_unique() {
        let keys = all_keys();
        let set: BTreeSet<_> = keys.iter().collect();
        assert_eq!(set.len(), keys.len());
    }

    #[test]
    fn text_round_trip() {
        let mut a = RunConfig::default();
        a.apply_text("atoms = 9\n# note\nkind = random-blobs\nwidths = 8, 16\n", "t").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.to_text(), "t").unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(b.network.atoms, 9);
        assert_eq!(b.network.widths, vec![8, 16]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("colour = red", "t"), Err(CliError::Config(_))));
    }
}
