//! Flat TOML configuration with dotted keys (`simulate.dt = 0.05` or a
//! `[simulate]` table; both flatten to the same key).

use std::collections::BTreeMap;

use toml::Value;

use crate::exit::{CliError, CONFIG};

/// Every accepted key with a one-line description. `docs/config.md` must
/// list the same keys (checked by a test).
pub const SCHEMA: &[(&str, &str)] = &[
    ("system", "built-in family: lambda_omega or scalar_cubic (default lambda_omega)"),
    ("gamma", "lambda_omega twist parameter (default 0)"),
    ("kappa", "lambda_omega scale parameter (default 1)"),
    ("q", "lambda_omega wavenumber; the period is 2 pi / q (default 0.2)"),
    ("period", "period X, required for scalar_cubic"),
    ("grid", "profile collocation points per period (default 128)"),
    ("seed", "seed of the perturbation noise (default 0)"),
    ("inputs.profile", "profile JSON to use instead of <out>/profile.json"),
    ("family.steps", "continuation steps (default 10)"),
    ("family.ds", "initial arclength step (default 0.5)"),
    ("family.dc", "initial direction, speed component (default 0)"),
    ("family.dx", "initial direction, period component (default 1)"),
    ("spectrum.xi_count", "Floquet exponents sampled on [-pi/X, pi/X] (default 65)"),
    ("spectrum.tracked", "eigenvalue curves tracked through the sweep (default 4)"),
    ("kernel.periods", "periods M_d of the Bloch grid (even, default 256)"),
    ("kernel.t_min", "first kernel time (default 20)"),
    ("kernel.t_max", "last kernel time (default 500)"),
    ("kernel.per_decade", "geometric kernel times per decade (default 24)"),
    ("kernel.y_per_period", "source points per period for the sup over y (default 8)"),
    ("simulate.periods", "domain periods M_d (even, default 64)"),
    ("simulate.points_per_period", "grid points per period (default 32)"),
    ("simulate.dt", "time step (default 0.05)"),
    ("simulate.t_final", "final time (default 500)"),
    ("simulate.scheme", "etd-rk4 or imex-bdf2 (default etd-rk4)"),
    ("simulate.delta", "perturbation amplitude (default 1e-2)"),
    ("simulate.sigma", "Gaussian width in space units (default 2)"),
    ("simulate.center", "bump centre (default: domain centre)"),
    ("simulate.components", "perturbed components (default [1], or [0] for n = 1)"),
    ("simulate.noise", "relative multiplicative noise on the bump (default 0)"),
    ("simulate.snapshots", "explicit snapshot times (default: 0 and a geometric grid)"),
    ("simulate.snapshot_t_min", "first geometric snapshot time (default 1)"),
    ("simulate.snapshots_per_decade", "geometric snapshot density (default 24)"),
    ("simulate.window_min", "decay fit window start (default 20)"),
    ("simulate.window_max", "decay fit window end (default 0.9 t_final)"),
    ("simulate.dump", "write every snapshot to snapshots.bin (default false)"),
    ("simulate.allow_unstable", "run even if the profile failed verification (default false)"),
];

#[derive(Clone, Debug, Default)]
pub struct Config {
    values: BTreeMap<String, Value>,
    text: String,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let at = e
                .span()
                .map(|s| format!("line {}: ", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_default();
            CliError::new(CONFIG, format!("config: {at}{}", e.message()))
        })?;
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values);
        let cfg = Config { values, text: text.to_string() };
        if let Some(bad) = cfg.values.keys().find(|k| !SCHEMA.iter().any(|(s, _)| s == k)) {
            return Err(cfg.key_error(bad, "unknown key"));
        }
        Ok(cfg)
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        let leaf = key.rsplit('.').next().unwrap_or(key);
        self.text
            .lines()
            .position(|l| {
                let l = l.trim_start();
                l.starts_with(key) || l.split('=').next().is_some_and(|lhs| lhs.trim() == leaf)
            })
            .map(|i| i + 1)
    }

    fn key_error(&self, key: &str, what: &str) -> CliError {
        let at = self.line_of(key).map(|l| format!("line {l}: ")).unwrap_or_default();
        CliError::new(CONFIG, format!("config: {at}{what} `{key}`"))
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.values.insert(key.to_string(), value);
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(*v)),
            Some(Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(self.key_error(key, "expected a number for")),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, CliError> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(_) => Err(self.key_error(key, "expected a nonnegative integer for")),
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, CliError> {
        self.usize(key, default as usize).map(|v| v as u64)
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(self.key_error(key, "expected true or false for")),
        }
    }

    pub fn str_opt(&self, key: &str) -> Result<Option<&str>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.key_error(key, "expected a string for")),
        }
    }

    pub fn str<'a>(&'a self, key: &str, default: &'a str) -> Result<&'a str, CliError> {
        Ok(self.str_opt(key)?.unwrap_or(default))
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(x) => Ok(*x as f64),
                    _ => Err(self.key_error(key, "expected a list of numbers for")),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(_) => Err(self.key_error(key, "expected a list of numbers for")),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Integer(x) if *x >= 0 => Ok(*x as usize),
                    _ => Err(self.key_error(key, "expected a list of nonnegative integers for")),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(_) => Err(self.key_error(key, "expected a list of nonnegative integers for")),
        }
    }

    /// Rejects a value with a message naming the key.
    pub fn invalid(&self, key: &str, why: &str) -> CliError {
        self.key_error(key, &format!("{why}:"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_tables_agree() {
        let a = Config::parse("simulate.dt = 0.1\nq = 0.3\n").unwrap();
        let b = Config::parse("q = 0.3\n[simulate]\ndt = 0.1\n").unwrap();
        assert_eq!(a.f64("simulate.dt", 0.0).unwrap(), b.f64("simulate.dt", 0.0).unwrap());
        assert_eq!(a.f64("q", 0.0).unwrap(), 0.3);
        assert_eq!(a.usize("grid", 128).unwrap(), 128);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let e = Config::parse("q = 0.3\nsimulate.dtt = 0.1\n").unwrap_err();
        assert_eq!(e.code, CONFIG);
        assert!(e.message.contains("simulate.dtt"), "{}", e.message);
        assert!(e.message.contains("line 2"), "{}", e.message);
    }

    #[test]
    fn type_errors_name_the_key() {
        let c = Config::parse("grid = \"many\"\n").unwrap();
        let e = c.usize("grid", 1).unwrap_err();
        assert!(e.message.contains("`grid`") && e.message.contains("line 1"), "{}", e.message);
    }

    #[test]
    fn docs_list_every_key() {
        let docs = include_str!("../../../docs/config.md");
        for (key, _) in SCHEMA {
            assert!(docs.contains(&format!("`{key}`")), "{key} missing from docs/config.md");
        }
    }

    #[test]
    fn syntax_errors_report_a_line() {
        let e = Config::parse("q = 0.3\nq = = 1\n").unwrap_err();
        assert_eq!(e.code, CONFIG);
        assert!(e.message.contains("line 2"), "{}", e.message);
    }
}
