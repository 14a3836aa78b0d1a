//! Fixed-step Fourier pseudo-spectral integrators for `u_t = Lin u + N(u)`
//! on a periodic grid, with `Lin` diagonal in Fourier space.
//!
//! The state is held per component as unnormalized DFT coefficients.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft, ifft};

type C = Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "imex-bdf2")]
    ImexBdf2,
    #[serde(rename = "etd-rk4")]
    EtdRk4,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ImexBdf2 => "imex-bdf2",
            Scheme::EtdRk4 => "etd-rk4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "imex-bdf2" | "bdf2" | "sbdf2" => Ok(Scheme::ImexBdf2),
            "etd-rk4" | "etdrk4" => Ok(Scheme::EtdRk4),
            other => Err(Error::InvalidInput(format!("unknown scheme '{other}'"))),
        }
    }

    /// Largest admissible `dt * rho`, where `rho` bounds the spectral radius
    /// of the explicitly treated reaction Jacobian.
    pub fn stability_limit(&self) -> f64 {
        match self {
            Scheme::ImexBdf2 => 1.0,
            Scheme::EtdRk4 => 2.5,
        }
    }

    pub fn order(&self) -> u32 {
        match self {
            Scheme::ImexBdf2 => 2,
            Scheme::EtdRk4 => 4,
        }
    }
}

struct EtdCoeffs {
    e: Vec<C>,
    e2: Vec<C>,
    q: Vec<C>,
    f1: Vec<C>,
    f2: Vec<C>,
    f3: Vec<C>,
}

/// Kassam-Trefethen contour means over a full circle, valid for complex
/// symbols.
fn etd_coeffs(lin: &[C], dt: f64) -> EtdCoeffs {
    const M: usize = 32;
    let roots: Vec<C> = (0..M)
        .map(|j| C::from_polar(1.0, 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / M as f64))
        .collect();
    let n = lin.len();
    let mut c = EtdCoeffs {
        e: Vec::with_capacity(n),
        e2: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
        f1: Vec::with_capacity(n),
        f2: Vec::with_capacity(n),
        f3: Vec::with_capacity(n),
    };
    for &l in lin {
        let lh = l * dt;
        c.e.push(lh.exp());
        c.e2.push((lh * 0.5).exp());
        let (mut q, mut f1, mut f2, mut f3) = (C::default(), C::default(), C::default(), C::default());
        for r in &roots {
            let z = lh + r;
            let ez = z.exp();
            let z3 = z * z * z;
            q += ((z * 0.5).exp() - 1.0) / z;
            f1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
            f2 += (2.0 + z + ez * (z - 2.0)) / z3;
            f3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
        }
        let s = dt / M as f64;
        c.q.push(q * s);
        c.f1.push(f1 * s);
        c.f2.push(f2 * s);
        c.f3.push(f3 * s);
    }
    c
}

/// Reaction-type right-hand side evaluated pointwise in physical space:
/// `nl(u, out)` with fields given per component.
pub trait Nonlinearity {
    fn eval(&self, u: &[Vec<f64>], out: &mut [Vec<f64>]);
}

impl<F: Fn(&[Vec<f64>], &mut [Vec<f64>])> Nonlinearity for F {
    fn eval(&self, u: &[Vec<f64>], out: &mut [Vec<f64>]) {
        self(u, out)
    }
}

pub struct SpectralIntegrator {
    scheme: Scheme,
    dt: f64,
    ncomp: usize,
    lin: Vec<C>,
    etd: Option<EtdCoeffs>,
    /// Previous state and nonlinear term for the two-step scheme.
    prev: Option<(Vec<Vec<C>>, Vec<Vec<C>>)>,
    steps: u64,
}

pub fn to_spectral(comps: &[Vec<f64>]) -> Vec<Vec<C>> {
    comps
        .iter()
        .map(|c| {
            let mut z: Vec<C> = c.iter().map(|&x| C::new(x, 0.0)).collect();
            fft(&mut z);
            z
        })
        .collect()
}

pub fn to_physical(state: &[Vec<C>]) -> Vec<Vec<f64>> {
    state
        .iter()
        .map(|c| {
            let mut z = c.clone();
            ifft(&mut z);
            z.iter().map(|v| v.re).collect()
        })
        .collect()
}

impl SpectralIntegrator {
    pub fn new(scheme: Scheme, lin: Vec<C>, ncomp: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        let etd = (scheme == Scheme::EtdRk4).then(|| etd_coeffs(&lin, dt));
        Ok(SpectralIntegrator { scheme, dt, ncomp, lin, etd, prev: None, steps: 0 })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn nonlinear(&self, state: &[Vec<C>], nl: &dyn Nonlinearity) -> Vec<Vec<C>> {
        let u = to_physical(state);
        let mut out = vec![vec![0.0; self.lin.len()]; self.ncomp];
        nl.eval(&u, &mut out);
        to_spectral(&out)
    }

    pub fn step(&mut self, state: &mut [Vec<C>], nl: &dyn Nonlinearity) {
        match self.scheme {
            Scheme::EtdRk4 => self.step_etd(state, nl),
            Scheme::ImexBdf2 => self.step_bdf(state, nl),
        }
        self.steps += 1;
    }

    fn step_etd(&self, state: &mut [Vec<C>], nl: &dyn Nonlinearity) {
        let c = self.etd.as_ref().expect("ETD coefficients");
        let n0 = self.nonlinear(state, nl);
        let comb = |base: &[Vec<C>], nv: &[Vec<C>]| -> Vec<Vec<C>> {
            base.iter()
                .zip(nv)
                .map(|(b, n)| b.iter().zip(n).enumerate().map(|(k, (b, n))| c.e2[k] * b + c.q[k] * n).collect())
                .collect()
        };
        let a = comb(state, &n0);
        let na = self.nonlinear(&a, nl);
        let b = comb(state, &na);
        let nb = self.nonlinear(&b, nl);
        let cs: Vec<Vec<C>> = a
            .iter()
            .zip(nb.iter().zip(&n0))
            .map(|(a, (nb, n0))| {
                a.iter()
                    .enumerate()
                    .map(|(k, a)| c.e2[k] * a + c.q[k] * (nb[k] * 2.0 - n0[k]))
                    .collect()
            })
            .collect();
        let nc = self.nonlinear(&cs, nl);
        for ci in 0..self.ncomp {
            for k in 0..self.lin.len() {
                state[ci][k] = c.e[k] * state[ci][k]
                    + n0[ci][k] * c.f1[k]
                    + (na[ci][k] + nb[ci][k]) * c.f2[k] * 2.0
                    + nc[ci][k] * c.f3[k];
            }
        }
    }

    fn step_bdf(&mut self, state: &mut [Vec<C>], nl: &dyn Nonlinearity) {
        let dt = self.dt;
        let n0 = self.nonlinear(state, nl);
        let current: Vec<Vec<C>> = state.to_vec();
        match self.prev.take() {
            None => {
                // Start with one IMEX Euler step.
                for ci in 0..self.ncomp {
                    for k in 0..self.lin.len() {
                        state[ci][k] = (state[ci][k] + n0[ci][k] * dt) / (1.0 - self.lin[k] * dt);
                    }
                }
            }
            Some((old, n_old)) => {
                for ci in 0..self.ncomp {
                    for k in 0..self.lin.len() {
                        let rhs = state[ci][k] * 4.0 - old[ci][k] + (n0[ci][k] * 2.0 - n_old[ci][k]) * (2.0 * dt);
                        state[ci][k] = rhs / (3.0 - self.lin[k] * (2.0 * dt));
                    }
                }
            }
        }
        self.prev = Some((current, n0));
    }
}
