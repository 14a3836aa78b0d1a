//! Reaction-diffusion systems `u_t = u_xx + f(u)` and the built-in example
//! families.
//!
//! Sign convention for the lambda-omega family: with `J(u1, u2) = (-u2, u1)`,
//!
//! ```text
//! f(u) = lambda(|u|) u - omega(|u|) J u,   lambda(r) = kappa (1 - r^2),
//!                                          omega(r)  = kappa gamma r^2.
//! ```
//!
//! In complex form `B = u1 + i u2` this is `B (lambda - i omega)`, i.e. the
//! equation `A (lambda + i omega)` in the conjugate coordinates
//! `u = (Re A, -Im A)`. Wave trains `a (cos q x, sin q x)` then travel with
//! speed `c = kappa gamma a^2 / q > 0` in the co-moving equation
//! `u'' + c u' + f(u) = 0`. `kappa = 1` is the standard system; other values
//! give the rate-scaled family used to study wave trains of unit period.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

type Map = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct ReactionDiffusionSystem {
    name: String,
    n: usize,
    params: BTreeMap<String, f64>,
    smoothness_k: u32,
    f: Arc<Map>,
    df: Option<Arc<Map>>,
}

impl fmt::Debug for ReactionDiffusionSystem {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("ReactionDiffusionSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("params", &self.params)
            .field("smoothness_k", &self.smoothness_k)
            .field("analytic_jacobian", &self.df.is_some())
            .finish()
    }
}

impl ReactionDiffusionSystem {
    /// `f(u, out)` must write `f(u)` into `out` (both of length `n`).
    pub fn new<F>(name: impl Into<String>, n: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ReactionDiffusionSystem {
            name: name.into(),
            n,
            params: BTreeMap::new(),
            smoothness_k: 2,
            f: Arc::new(f),
            df: None,
        }
    }

    /// `df(u, out)` writes the Jacobian row-major (`out[i * n + j] = d f_i / d u_j`).
    pub fn with_jacobian<F>(mut self, df: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.df = Some(Arc::new(df));
        self
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn with_smoothness(mut self, k: u32) -> Self {
        self.smoothness_k = k.max(2);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    pub fn smoothness_k(&self) -> u32 {
        self.smoothness_k
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.df.is_some()
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: u.len() });
        }
        Ok(())
    }

    pub fn eval_reaction(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        let mut out = vec![0.0; self.n];
        (self.f)(u, &mut out);
        Ok(out)
    }

    /// Row-major `n x n` Jacobian; finite differences if no analytic
    /// Jacobian was registered.
    pub fn eval_jacobian(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        let mut out = vec![0.0; self.n * self.n];
        self.jacobian_into(u, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`Self::eval_reaction`] for inner loops.
    #[inline]
    pub fn reaction_into(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.n);
        (self.f)(u, out);
    }

    #[inline]
    pub fn jacobian_into(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.n);
        match &self.df {
            Some(df) => df(u, out),
            None => self.fd_jacobian_into(u, out),
        }
    }

    /// Central finite-difference Jacobian with step `1e-5 (1 + |u|)`.
    pub fn fd_jacobian(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        let mut out = vec![0.0; self.n * self.n];
        self.fd_jacobian_into(u, &mut out);
        Ok(out)
    }

    fn fd_jacobian_into(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let h = 1e-5 * (1.0 + norm);
        let mut up = u.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            up[j] = u[j] + h;
            (self.f)(&up, &mut fp);
            up[j] = u[j] - h;
            (self.f)(&up, &mut fm);
            up[j] = u[j];
            for i in 0..n {
                out[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }
}

/// Lambda-omega system with `lambda(r) = kappa (1 - r^2)`,
/// `omega(r) = kappa gamma r^2`.
pub fn lambda_omega_scaled(gamma: f64, kappa: f64) -> ReactionDiffusionSystem {
    ReactionDiffusionSystem::new("lambda_omega", 2, move |u, out| {
        let r2 = u[0] * u[0] + u[1] * u[1];
        let lam = kappa * (1.0 - r2);
        let om = kappa * gamma * r2;
        out[0] = lam * u[0] + om * u[1];
        out[1] = lam * u[1] - om * u[0];
    })
    .with_jacobian(move |u, out| {
        let (a, b) = (u[0], u[1]);
        let r2 = a * a + b * b;
        let lam = 1.0 - r2;
        out[0] = kappa * (lam - 2.0 * a * a + 2.0 * gamma * a * b);
        out[1] = kappa * (-2.0 * a * b + gamma * r2 + 2.0 * gamma * b * b);
        out[2] = kappa * (-2.0 * a * b - gamma * r2 - 2.0 * gamma * a * a);
        out[3] = kappa * (lam - 2.0 * b * b - 2.0 * gamma * a * b);
    })
    .with_param("gamma", gamma)
    .with_param("kappa", kappa)
    .with_smoothness(u32::MAX)
}

pub fn lambda_omega(gamma: f64) -> ReactionDiffusionSystem {
    lambda_omega_scaled(gamma, 1.0)
}

/// Scalar `f(u) = u - u^3`.
pub fn scalar_cubic() -> ReactionDiffusionSystem {
    ReactionDiffusionSystem::new("scalar_cubic", 1, |u, out| out[0] = u[0] - u[0] * u[0] * u[0])
        .with_jacobian(|u, out| out[0] = 1.0 - 3.0 * u[0] * u[0])
        .with_smoothness(u32::MAX)
}

pub const BUILTIN_NAMES: [&str; 2] = ["lambda_omega", "scalar_cubic"];

/// Every built-in family at its default parameters.
pub fn builtin_systems() -> Vec<ReactionDiffusionSystem> {
    vec![lambda_omega(0.0), scalar_cubic()]
}

/// Looks up a built-in family by name. Recognised parameters:
/// `gamma` and `kappa` for `lambda_omega`; none for `scalar_cubic`.
pub fn builtin_system(name: &str, params: &BTreeMap<String, f64>) -> Result<ReactionDiffusionSystem> {
    let allowed: &[&str] = match name {
        "lambda_omega" => &["gamma", "kappa"],
        "scalar_cubic" => &[],
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::InvalidInput(format!("system `{name}` has no parameter `{bad}`")));
    }
    Ok(match name {
        "lambda_omega" => {
            let kappa = params.get("kappa").copied().unwrap_or(1.0);
            if !(kappa > 0.0) {
                return Err(Error::InvalidInput(format!("kappa must be positive, got {kappa}")));
            }
            lambda_omega_scaled(params.get("gamma").copied().unwrap_or(0.0), kappa)
        }
        _ => scalar_cubic(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lambda_omega_examples() {
        let s = lambda_omega(0.0);
        assert_eq!(s.eval_reaction(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.eval_reaction(&[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.eval_jacobian(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let s = lambda_omega(0.5);
        let f = s.eval_reaction(&[1.0, 0.0]).unwrap();
        assert!(f[0].abs() < 1e-15 && (f[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_cubic_jacobian() {
        let s = scalar_cubic();
        assert_eq!(s.n(), 1);
        assert_eq!(s.eval_jacobian(&[1.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn dimension_is_checked() {
        let s = lambda_omega(0.0);
        assert!(matches!(s.eval_reaction(&[1.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
        assert!(s.eval_jacobian(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn registry() {
        let mut p = BTreeMap::new();
        p.insert("gamma".to_string(), 0.5);
        let s = builtin_system("lambda_omega", &p).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.param("gamma"), Some(0.5));
        assert_eq!(builtin_system("scalar_cubic", &BTreeMap::new()).unwrap().n(), 1);
        assert!(builtin_system("brusselator", &BTreeMap::new()).is_err());
        assert!(builtin_system("scalar_cubic", &p).is_err());
        assert_eq!(builtin_systems().len(), 2);
    }

    #[test]
    fn fd_fallback_is_used_without_jacobian() {
        let s = ReactionDiffusionSystem::new("toy", 2, |u, o| {
            o[0] = u[0] * u[1];
            o[1] = u[0].sin();
        });
        assert!(!s.has_analytic_jacobian());
        let j = s.eval_jacobian(&[0.3, 2.0]).unwrap();
        let want = [2.0, 0.3, 0.3f64.cos(), 0.0];
        for (a, b) in j.iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    fn norm(m: &[f64]) -> f64 {
        m.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn jacobians_match_finite_differences(
            a in -2.0f64..2.0, b in -2.0f64..2.0, gamma in -1.0f64..1.0, kappa in 0.1f64..50.0
        ) {
            for s in [lambda_omega_scaled(gamma, kappa), scalar_cubic()] {
                let u = &[a, b][..s.n()];
                let j = s.eval_jacobian(u).unwrap();
                let fd = s.fd_jacobian(u).unwrap();
                let diff: Vec<f64> = j.iter().zip(&fd).map(|(x, y)| x - y).collect();
                prop_assert!(norm(&diff) <= 1e-6 * (1.0 + norm(&j)));
            }
        }

        #[test]
        fn lambda_omega_is_rotation_equivariant(
            a in -2.0f64..2.0, b in -2.0f64..2.0, th in -3.2f64..3.2, gamma in -1.0f64..1.0
        ) {
            let s = lambda_omega(gamma);
            let (c, sn) = (th.cos(), th.sin());
            let rot = |v: &[f64]| vec![c * v[0] - sn * v[1], sn * v[0] + c * v[1]];
            let lhs = s.eval_reaction(&rot(&[a, b])).unwrap();
            let rhs = rot(&s.eval_reaction(&[a, b]).unwrap());
            prop_assert!((lhs[0] - rhs[0]).abs() < 1e-12 && (lhs[1] - rhs[1]).abs() < 1e-12);
        }
    }
}
