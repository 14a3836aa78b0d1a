//! Periodic solutions of the profile equation `u'' + c u' + f(u) = 0` and
//! their continuation in the period.

use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::{bloch_symbols, circulant_column, resample, spectral_derivative};
use crate::linalg::solve_real;
use crate::model::{lambda_omega_scaled, ReactionDiffusionSystem};

pub const DEFAULT_GRID_N: usize = 128;

/// A sampled periodic profile. `u_samples` and `du_samples` are sample-major
/// `[grid_n x n]` arrays on `x_j = j * period / grid_n`.
#[derive(Clone, Debug)]
pub struct WaveProfile {
    pub sys: ReactionDiffusionSystem,
    pub period: f64,
    pub c: f64,
    pub grid_n: usize,
    pub u_samples: Vec<f64>,
    pub du_samples: Vec<f64>,
    pub residual: f64,
}

fn to_components(samples: &[f64], grid_n: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|c| (0..grid_n).map(|j| samples[j * n + c]).collect()).collect()
}

fn from_components(comps: &[Vec<f64>]) -> Vec<f64> {
    let n = comps.len();
    let grid_n = comps.first().map_or(0, Vec::len);
    let mut out = vec![0.0; grid_n * n];
    for (c, comp) in comps.iter().enumerate() {
        for (j, v) in comp.iter().enumerate() {
            out[j * n + c] = *v;
        }
    }
    out
}

impl WaveProfile {
    /// Builds a profile from samples, computing `u'` spectrally and the
    /// residual.
    pub fn from_samples(
        sys: ReactionDiffusionSystem,
        period: f64,
        c: f64,
        u_samples: Vec<f64>,
    ) -> Result<Self> {
        let n = sys.n();
        if n == 0 || u_samples.len() % n != 0 || u_samples.is_empty() {
            return Err(Error::DimensionMismatch { expected: n, got: u_samples.len() });
        }
        if !(period > 0.0) {
            return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
        }
        let grid_n = u_samples.len() / n;
        let comps = to_components(&u_samples, grid_n, n);
        let du: Vec<Vec<f64>> = comps.iter().map(|u| spectral_derivative(u, period, 1)).collect();
        let mut p = WaveProfile {
            sys,
            period,
            c,
            grid_n,
            u_samples,
            du_samples: from_components(&du),
            residual: 0.0,
        };
        p.residual = profile_residual(&p);
        Ok(p)
    }

    /// Constant state `u*` viewed as a profile of the given period.
    pub fn constant(sys: ReactionDiffusionSystem, state: &[f64], period: f64, c: f64, grid_n: usize) -> Result<Self> {
        if state.len() != sys.n() {
            return Err(Error::DimensionMismatch { expected: sys.n(), got: state.len() });
        }
        let u = (0..grid_n).flat_map(|_| state.iter().copied()).collect();
        Self::from_samples(sys, period, c, u)
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.period / self.grid_n as f64
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.grid_n as f64
    }

    pub fn value(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.u_samples[j * n..(j + 1) * n]
    }

    pub fn derivative(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.du_samples[j * n..(j + 1) * n]
    }

    pub fn components(&self) -> Vec<Vec<f64>> {
        to_components(&self.u_samples, self.grid_n, self.n())
    }

    pub fn derivative_components(&self) -> Vec<Vec<f64>> {
        to_components(&self.du_samples, self.grid_n, self.n())
    }

    /// `u'` stacked component-major, the layout of Bloch operator vectors.
    pub fn translation_mode(&self) -> Vec<Complex64> {
        self.derivative_components()
            .into_iter()
            .flatten()
            .map(|v| Complex64::new(v, 0.0))
            .collect()
    }

    /// Spectral resampling onto `grid_n` points per period.
    pub fn resampled(&self, grid_n: usize) -> Result<Self> {
        let comps: Vec<Vec<f64>> = self.components().iter().map(|u| resample(u, grid_n)).collect();
        Self::from_samples(self.sys.clone(), self.period, self.c, from_components(&comps))
    }

    /// The profile shifted by `s`, i.e. samples of `u(x - s)`.
    pub fn translated(&self, s: f64) -> Result<Self> {
        let n = self.grid_n;
        let comps: Vec<Vec<f64>> = self
            .components()
            .iter()
            .map(|u| {
                let mut c = crate::fourier::fft_real(u);
                for (m, z) in c.iter_mut().enumerate() {
                    let k = crate::fourier::wavenumber(m, n, self.period);
                    *z *= if crate::fourier::is_nyquist(m, n) {
                        Complex64::new((k * s).cos(), 0.0)
                    } else {
                        Complex64::from_polar(1.0, -k * s)
                    };
                }
                crate::fourier::ifft(&mut c);
                c.iter().map(|z| z.re).collect()
            })
            .collect();
        Self::from_samples(self.sys.clone(), self.period, self.c, from_components(&comps))
    }

    /// Peak-to-peak oscillation amplitude over all components.
    pub fn oscillation(&self) -> f64 {
        self.components()
            .iter()
            .map(|u| {
                let (lo, hi) = u.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

/// Max-norm of the spectrally evaluated `u'' + c u' + f(u)` on the grid.
pub fn profile_residual(p: &WaveProfile) -> f64 {
    let n = p.n();
    let comps = p.components();
    let d2: Vec<Vec<f64>> = comps.iter().map(|u| spectral_derivative(u, p.period, 2)).collect();
    let mut f = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for j in 0..p.grid_n {
        p.sys.reaction_into(p.value(j), &mut f);
        for c in 0..n {
            let r = d2[c][j] + p.c * p.du_samples[j * n + c] + f[c];
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Closed-form data of the lambda-omega wave train of wavenumber `q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveTrainParams {
    pub amplitude: f64,
    pub period: f64,
    pub c: f64,
}

pub fn lambda_omega_wave_params(gamma: f64, kappa: f64, q: f64) -> Result<WaveTrainParams> {
    if !(q > 0.0) || q * q >= kappa {
        return Err(Error::NoWaveTrain { q, kappa });
    }
    let a2 = 1.0 - q * q / kappa;
    Ok(WaveTrainParams { amplitude: a2.sqrt(), period: 2.0 * PI / q, c: kappa * gamma * a2 / q })
}

/// Exact wave train `a (cos q x, sin q x)` of the rate-scaled lambda-omega
/// system on `grid_n` points.
pub fn lambda_omega_wavetrain(gamma: f64, kappa: f64, q: f64, grid_n: usize) -> Result<WaveProfile> {
    let w = lambda_omega_wave_params(gamma, kappa, q)?;
    let u = (0..grid_n)
        .flat_map(|j| {
            let x = j as f64 * w.period / grid_n as f64;
            [w.amplitude * (q * x).cos(), w.amplitude * (q * x).sin()]
        })
        .collect();
    WaveProfile::from_samples(lambda_omega_scaled(gamma, kappa), w.period, w.c, u)
}

/// Exact wave train of the standard (`kappa = 1`) lambda-omega system at the
/// default resolution.
pub fn analytic_wavetrain(gamma: f64, q: f64) -> Result<WaveProfile> {
    lambda_omega_wavetrain(gamma, 1.0, q, DEFAULT_GRID_N)
}

/// First-harmonic guess `A cos(2 pi x / X)` for the periodic orbit of
/// `u'' + u - u^3 = 0` with period `X > 2 pi`.
pub fn scalar_cubic_seed(period: f64, grid_n: usize) -> Result<Vec<f64>> {
    let w = 2.0 * PI / period;
    if w >= 1.0 {
        return Err(Error::InvalidInput(format!("scalar cubic orbits need period > 2 pi, got {period}")));
    }
    let a = (4.0 * (1.0 - w * w) / 3.0).sqrt();
    Ok((0..grid_n).map(|j| a * (w * j as f64 * period / grid_n as f64).cos()).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Target max-norm residual.
    pub tol: f64,
    /// Residual accepted when the iteration stagnates at roundoff.
    pub accept: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { max_iter: 50, tol: 1e-12, accept: 1e-8 }
    }
}

/// Real differentiation matrices on an `n`-point grid of the given period.
fn diff_matrices(n: usize, period: f64) -> (Mat<f64>, Mat<f64>) {
    let (s1, s2) = bloch_symbols(n, period, 0.0);
    let a1 = circulant_column(&s1);
    let a2 = circulant_column(&s2);
    let d1 = Mat::from_fn(n, n, |j, l| a1[(j + n - l) % n].re);
    let d2 = Mat::from_fn(n, n, |j, l| a2[(j + n - l) % n].re);
    (d1, d2)
}

fn matvec_real(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum()).collect()
}

/// Collocation residual `d2 u / s2 + c d1 u / s1 + f(u)` with `u`
/// component-major; `s1, s2` rescale derivatives from a unit grid.
struct Collocation<'a> {
    sys: &'a ReactionDiffusionSystem,
    n: usize,
    grid_n: usize,
    d1: Mat<f64>,
    d2: Mat<f64>,
}

impl<'a> Collocation<'a> {
    fn new(sys: &'a ReactionDiffusionSystem, grid_n: usize, period: f64) -> Self {
        let (d1, d2) = diff_matrices(grid_n, period);
        Collocation { sys, n: sys.n(), grid_n, d1, d2 }
    }

    fn derivs(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = self.grid_n;
        let mut du = Vec::with_capacity(u.len());
        let mut d2u = Vec::with_capacity(u.len());
        for c in 0..self.n {
            du.extend(matvec_real(&self.d1, &u[c * g..(c + 1) * g]));
            d2u.extend(matvec_real(&self.d2, &u[c * g..(c + 1) * g]));
        }
        (du, d2u)
    }

    /// Residual with derivative scalings `a` (on `u''`) and `b` (on `u'`).
    fn residual(&self, u: &[f64], a: f64, b: f64) -> Vec<f64> {
        let (g, n) = (self.grid_n, self.n);
        let (du, d2u) = self.derivs(u);
        let mut r: Vec<f64> = (0..n * g).map(|i| a * d2u[i] + b * du[i]).collect();
        let mut uj = vec![0.0; n];
        let mut fj = vec![0.0; n];
        for j in 0..g {
            for c in 0..n {
                uj[c] = u[c * g + j];
            }
            self.sys.reaction_into(&uj, &mut fj);
            for c in 0..n {
                r[c * g + j] += fj[c];
            }
        }
        r
    }

    /// `d residual / d u` as a dense `(n g) x (n g)` block, written into the
    /// top-left corner of `jac`.
    fn fill_jacobian(&self, u: &[f64], a: f64, b: f64, jac: &mut Mat<f64>) {
        let (g, n) = (self.grid_n, self.n);
        for c in 0..n {
            for i in 0..g {
                for l in 0..g {
                    jac[(c * g + i, c * g + l)] = a * self.d2[(i, l)] + b * self.d1[(i, l)];
                }
            }
        }
        let mut uj = vec![0.0; n];
        let mut dfj = vec![0.0; n * n];
        for j in 0..g {
            for c in 0..n {
                uj[c] = u[c * g + j];
            }
            self.sys.jacobian_into(&uj, &mut dfj);
            for r in 0..n {
                for c in 0..n {
                    jac[(r * g + j, c * g + j)] += dfj[r * n + c];
                }
            }
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Newton iteration for `(u, c)` at fixed period with the phase condition
/// `<seed', u - seed> = 0`. `seed` is sample-major `[grid_n x n]`.
pub fn solve_profile(
    sys: &ReactionDiffusionSystem,
    period: f64,
    seed: &[f64],
    c_guess: f64,
    opts: &NewtonOptions,
) -> Result<(WaveProfile, NewtonStats)> {
    let n = sys.n();
    if n == 0 || seed.is_empty() || seed.len() % n != 0 {
        return Err(Error::DimensionMismatch { expected: n, got: seed.len() });
    }
    if !(period > 0.0) {
        return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
    }
    let g = seed.len() / n;
    let col = Collocation::new(sys, g, period);
    let seed_cm: Vec<f64> = to_components(seed, g, n).concat();
    let (seed_d, _) = col.derivs(&seed_cm);
    let h = period / g as f64;
    let dim = n * g + 1;

    let full_res = |u: &[f64], c: f64| -> Vec<f64> {
        let mut r = col.residual(u, 1.0, c);
        let phase: f64 = seed_d.iter().zip(u.iter().zip(&seed_cm)).map(|(d, (a, b))| d * (a - b)).sum();
        r.push(phase * h);
        r
    };

    let mut u = seed_cm.clone();
    let mut c = c_guess;
    let mut r = full_res(&u, c);
    let mut iterations = 0;
    loop {
        let res = max_abs(&r[..n * g]);
        if res <= opts.tol && r[n * g].abs() <= opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence { iterations, residual: res });
        }
        let mut jac = Mat::<f64>::zeros(dim, dim);
        col.fill_jacobian(&u, 1.0, c, &mut jac);
        let (du, _) = col.derivs(&u);
        for i in 0..n * g {
            jac[(i, n * g)] = du[i];
            jac[(n * g, i)] = seed_d[i] * h;
        }
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = solve_real(&jac, &rhs)
            .ok_or_else(|| Error::DegenerateFamily("singular bordered Jacobian".into()))?;
        iterations += 1;
        // Backtracking on the Euclidean residual.
        let r0 = l2(&r);
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let ut: Vec<f64> = u.iter().zip(&step).map(|(a, s)| a + lam * s).collect();
            let ct = c + lam * step[n * g];
            let rt = full_res(&ut, ct);
            if l2(&rt) < r0 {
                u = ut;
                c = ct;
                r = rt;
                accepted = true;
                break;
            }
            lam *= 0.5;
        }
        if !accepted {
            let res = max_abs(&r[..n * g]);
            if res <= opts.accept {
                break;
            }
            return Err(Error::NonConvergence { iterations, residual: res });
        }
        let step_size = max_abs(&step) * lam;
        if step_size < 1e-14 * (1.0 + max_abs(&u)) && max_abs(&r[..n * g]) <= opts.accept {
            break;
        }
    }
    let samples = from_components(&(0..n).map(|k| u[k * g..(k + 1) * g].to_vec()).collect::<Vec<_>>());
    let profile = WaveProfile::from_samples(sys.clone(), period, c, samples)?;
    if profile.residual > opts.accept {
        return Err(Error::NonConvergence { iterations, residual: profile.residual });
    }
    let residual = profile.residual;
    Ok((profile, NewtonStats { iterations, residual }))
}

/// Re-solves a profile on its own grid, using it as seed.
pub fn refine_profile(p: &WaveProfile) -> Result<WaveProfile> {
    solve_profile(&p.sys, p.period, &p.u_samples, p.c, &NewtonOptions::default()).map(|(p, _)| p)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Completed,
    /// The period stopped being monotone along the branch after member `index`.
    Fold { index: usize },
    /// The corrector failed even after repeated step halving.
    StepFailure { index: usize, last_ds: f64 },
}

/// A branch of wave trains parameterized by arclength in `(u, c, X)`.
#[derive(Clone, Debug)]
pub struct WaveFamily {
    pub members: Vec<WaveProfile>,
    /// `(c, X)` for each member.
    pub parameters: Vec<(f64, f64)>,
    /// `(dc/ds, dX/ds)` for each member.
    pub tangents: Vec<(f64, f64)>,
    pub termination: Termination,
}

#[derive(Clone, Copy, Debug)]
pub struct ContinuationOptions {
    pub ds: f64,
    pub max_halvings: u32,
    pub newton: NewtonOptions,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions { ds: 0.5, max_halvings: 5, newton: NewtonOptions { max_iter: 20, ..Default::default() } }
    }
}

/// Scaled-coordinate continuation state: `u(y)` on `y in [0, 1)` stored
/// component-major, plus `c` and `X`.
struct Branch<'a> {
    col: Collocation<'a>,
    n: usize,
    g: usize,
}

impl<'a> Branch<'a> {
    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let m = self.n * self.g;
        let (c, x) = (z[m], z[m + 1]);
        self.col.residual(&z[..m], 1.0 / (x * x), c / x)
    }

    /// Jacobian rows for the ODE: `[G_u, G_c, G_X]`.
    fn jacobian(&self, z: &[f64], rows: usize) -> Mat<f64> {
        let m = self.n * self.g;
        let (c, x) = (z[m], z[m + 1]);
        let mut jac = Mat::<f64>::zeros(rows, m + 2);
        self.col.fill_jacobian(&z[..m], 1.0 / (x * x), c / x, &mut jac);
        let (du, d2u) = self.col.derivs(&z[..m]);
        for i in 0..m {
            jac[(i, m)] = du[i] / x;
            jac[(i, m + 1)] = -2.0 * d2u[i] / (x * x * x) - c * du[i] / (x * x);
        }
        jac
    }

    fn weight(&self, i: usize) -> f64 {
        if i < self.n * self.g {
            1.0 / self.g as f64
        } else {
            1.0
        }
    }

    fn wnorm(&self, v: &[f64]) -> f64 {
        v.iter().enumerate().map(|(i, x)| self.weight(i) * x * x).sum::<f64>().sqrt()
    }

    /// Unit tangent at `z` oriented along `prev`.
    fn tangent(&self, z: &[f64], prev: &[f64], phase_d: &[f64]) -> Option<Vec<f64>> {
        let m = self.n * self.g;
        let mut jac = self.jacobian(z, m + 2);
        for i in 0..m {
            jac[(m, i)] = phase_d[i];
        }
        for (i, p) in prev.iter().enumerate() {
            jac[(m + 1, i)] = self.weight(i) * p;
        }
        let mut rhs = vec![0.0; m + 2];
        rhs[m + 1] = 1.0;
        let mut t = solve_real(&jac, &rhs)?;
        let nrm = self.wnorm(&t);
        t.iter_mut().for_each(|v| *v /= nrm);
        Some(t)
    }

    fn correct(&self, z0: &[f64], anchor: &[f64], tau: &[f64], ds: f64, phase_d: &[f64], anchor_u: &[f64], opts: &NewtonOptions) -> Option<Vec<f64>> {
        let m = self.n * self.g;
        let mut z = z0.to_vec();
        for _ in 0..opts.max_iter {
            let mut r = self.residual(&z);
            let phase: f64 = phase_d.iter().zip(z[..m].iter().zip(anchor_u)).map(|(d, (a, b))| d * (a - b)).sum();
            let arc: f64 = (0..m + 2).map(|i| self.weight(i) * tau[i] * (z[i] - anchor[i])).sum::<f64>() - ds;
            if max_abs(&r) <= opts.tol.max(1e-11) && phase.abs() <= 1e-11 && arc.abs() <= 1e-11 {
                return Some(z);
            }
            r.push(phase);
            r.push(arc);
            let mut jac = self.jacobian(&z, m + 2);
            for i in 0..m {
                jac[(m, i)] = phase_d[i];
            }
            for i in 0..m + 2 {
                jac[(m + 1, i)] = self.weight(i) * tau[i];
            }
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let step = solve_real(&jac, &rhs)?;
            z.iter_mut().zip(&step).for_each(|(a, s)| *a += s);
            if !(z[m + 1] > 0.0) {
                return None;
            }
        }
        let res = max_abs(&self.residual(&z));
        (res <= opts.accept).then_some(z)
    }
}

/// Pseudo-arclength continuation from `start` along the branch, initially in
/// the direction `(dc, dX)`.
pub fn continue_family(
    start: &WaveProfile,
    direction: (f64, f64),
    steps: usize,
    opts: &ContinuationOptions,
) -> Result<WaveFamily> {
    if start.residual > 1e-8 {
        return Err(Error::InvalidInput(format!("start profile residual {:e} exceeds 1e-8", start.residual)));
    }
    let n = start.n();
    let g = start.grid_n;
    let m = n * g;
    let br = Branch { col: Collocation::new(&start.sys, g, 1.0), n, g };
    let mut z: Vec<f64> = start.components().concat();
    z.push(start.c);
    z.push(start.period);

    let phase_of = |z: &[f64]| -> Vec<f64> {
        let (du, _) = br.col.derivs(&z[..m]);
        du.iter().map(|v| v / g as f64).collect()
    };
    let mut init = vec![0.0; m + 2];
    init[m] = direction.0;
    init[m + 1] = direction.1;
    let mut tau = br
        .tangent(&z, &init, &phase_of(&z))
        .ok_or_else(|| Error::DegenerateFamily("singular continuation Jacobian at start".into()))?;
    if tau[m] * direction.0 + tau[m + 1] * direction.1 < 0.0 {
        tau.iter_mut().for_each(|v| *v = -*v);
    }

    let mut fam = WaveFamily {
        members: vec![start.clone()],
        parameters: vec![(start.c, start.period)],
        tangents: vec![(tau[m], tau[m + 1])],
        termination: Termination::Completed,
    };
    for k in 0..steps {
        let phase_d = phase_of(&z);
        let mut ds = opts.ds;
        let mut next = None;
        for _ in 0..=opts.max_halvings {
            let z0: Vec<f64> = z.iter().zip(&tau).map(|(a, t)| a + ds * t).collect();
            if let Some(zn) = br.correct(&z0, &z, &tau, ds, &phase_d, &z[..m], &opts.newton) {
                next = Some(zn);
                break;
            }
            ds *= 0.5;
        }
        let Some(zn) = next else {
            fam.termination = Termination::StepFailure { index: k, last_ds: ds };
            break;
        };
        let tn = br
            .tangent(&zn, &tau, &phase_of(&zn))
            .ok_or_else(|| Error::DegenerateFamily(format!("singular continuation Jacobian at member {}", k + 1)))?;
        let samples = from_components(&(0..n).map(|c| zn[c * g..(c + 1) * g].to_vec()).collect::<Vec<_>>());
        let member = WaveProfile::from_samples(start.sys.clone(), zn[m + 1], zn[m], samples)?;
        fam.members.push(member);
        fam.parameters.push((zn[m], zn[m + 1]));
        fam.tangents.push((tn[m], tn[m + 1]));
        let fold = tn[m + 1] * tau[m + 1] < 0.0;
        z = zn;
        tau = tn;
        if fold {
            fam.termination = Termination::Fold { index: k + 1 };
            break;
        }
    }
    Ok(fam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lambda_omega, scalar_cubic};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn amplitude_error(p: &WaveProfile, a: f64) -> f64 {
        (0..p.grid_n)
            .map(|j| {
                let v = p.value(j);
                ((v[0] * v[0] + v[1] * v[1]).sqrt() - a).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn analytic_examples() {
        let p = analytic_wavetrain(0.0, 0.4).unwrap();
        assert!((p.period - 15.707963267948966).abs() < 1e-12);
        assert_eq!(p.c, 0.0);
        assert!(amplitude_error(&p, 0.916515138991168) < 1e-12);
        assert!(p.residual <= 1e-10);
        let p = analytic_wavetrain(0.5, 0.3).unwrap();
        assert!((p.c - 1.5166666666666666).abs() < 1e-12);
        assert!(p.residual <= 1e-10);
        let w = lambda_omega_wave_params(0.0, 1.0, 1e-6).unwrap();
        assert!((w.amplitude - 1.0).abs() < 1e-11);
        assert!(matches!(analytic_wavetrain(0.0, 1.0), Err(Error::NoWaveTrain { .. })));
    }

    #[test]
    fn residual_examples() {
        let p = lambda_omega_wavetrain(0.3, 1.0, 0.25, 64).unwrap();
        assert!(profile_residual(&p) <= 1e-10);
        let z = WaveProfile::constant(lambda_omega(0.0), &[0.0, 0.0], 3.0, 0.7, 32).unwrap();
        assert_eq!(profile_residual(&z), 0.0);
        let mut u = p.u_samples.clone();
        u[10] += 1e-2;
        let bad = WaveProfile::from_samples(p.sys.clone(), p.period, p.c, u).unwrap();
        assert!(bad.residual >= 1e-3);
    }

    #[test]
    fn derivative_samples_are_spectral() {
        let p = analytic_wavetrain(0.5, 0.3).unwrap();
        let q = 0.3;
        let a = 0.91f64.sqrt();
        for j in 0..p.grid_n {
            let x = p.x(j);
            let d = p.derivative(j);
            assert!((d[0] + a * q * (q * x).sin()).abs() < 1e-10);
            assert!((d[1] - a * q * (q * x).cos()).abs() < 1e-10);
        }
    }

    #[test]
    fn newton_from_noisy_seed() {
        let exact = analytic_wavetrain(0.0, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seed: Vec<f64> = exact.u_samples.iter().map(|v| v + 1e-3 * rng.random_range(-1.0..1.0)).collect();
        let (p, _) = solve_profile(&exact.sys, exact.period, &seed, 0.0, &NewtonOptions::default()).unwrap();
        assert!(amplitude_error(&p, 0.84f64.sqrt()) < 1e-8);
        assert!(p.c.abs() < 1e-8);
    }

    #[test]
    fn newton_fixed_point() {
        let exact = analytic_wavetrain(0.5, 0.3).unwrap();
        let (p, st) = solve_profile(&exact.sys, exact.period, &exact.u_samples, exact.c, &NewtonOptions::default()).unwrap();
        assert!(st.iterations <= 2);
        assert!(p.residual <= 1e-10);
    }

    #[test]
    fn newton_from_constant_seed_with_kick() {
        // A kick of 0.1 stalls on the spatially homogeneous branch; 0.3
        // is the smallest tried that reaches the wave train.
        let w = lambda_omega_wave_params(0.5, 1.0, 0.3).unwrap();
        let g = 128;
        let q = 0.3;
        let kick = 0.3;
        let seed: Vec<f64> = (0..g)
            .flat_map(|j| {
                let x = j as f64 * w.period / g as f64;
                [w.amplitude + kick * (q * x).cos(), kick * (q * x).sin()]
            })
            .collect();
        let (p, _) = solve_profile(&lambda_omega(0.5), w.period, &seed, 0.0, &NewtonOptions::default()).unwrap();
        assert!((p.c.abs() - 1.516666666666667).abs() < 1e-8, "c = {}", p.c);
        assert!(p.residual <= 1e-10);
    }

    #[test]
    fn phase_condition_pins_translates() {
        let exact = analytic_wavetrain(0.0, 0.3).unwrap();
        for s in [0.0, 1.3, -4.0] {
            let seed = exact.translated(s).unwrap();
            let mut noisy = seed.u_samples.clone();
            noisy.iter_mut().enumerate().for_each(|(i, v)| *v += 1e-4 * ((i * 37 % 11) as f64 - 5.0));
            let (p, _) = solve_profile(&exact.sys, exact.period, &noisy, 0.0, &NewtonOptions::default()).unwrap();
            // Best shift of the analytic train onto the result.
            let j0 = (0..p.grid_n)
                .map(|j| p.value(j)[1].atan2(p.value(j)[0]) - 0.3 * p.x(j))
                .map(|d| d.sin().atan2(d.cos()))
                .sum::<f64>()
                / p.grid_n as f64;
            let best = exact.translated(-j0 / 0.3).unwrap();
            let err = p.u_samples.iter().zip(&best.u_samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-8, "shift {s}: {err:e}");
        }
    }

    #[test]
    fn grid_convergence() {
        let exact = lambda_omega_wavetrain(0.5, 1.0, 0.3, 64).unwrap();
        let seed: Vec<f64> = exact.u_samples.iter().map(|v| v * 1.01).collect();
        let (p64, _) = solve_profile(&exact.sys, exact.period, &seed, 1.4, &NewtonOptions::default()).unwrap();
        let p128 = refine_profile(&p64.resampled(128).unwrap()).unwrap();
        assert!((p64.c - p128.c).abs() <= 1e-9);
        assert!((p64.residual - p128.residual).abs() <= 1e-9);
    }

    #[test]
    fn scalar_cubic_orbit() {
        let seed = scalar_cubic_seed(7.0, 64).unwrap();
        let (p, _) = solve_profile(&scalar_cubic(), 7.0, &seed, 0.0, &NewtonOptions::default()).unwrap();
        assert!(p.residual <= 1e-10);
        assert!(p.c.abs() < 1e-10);
        assert!(p.oscillation() > 0.5);
    }

    #[test]
    fn continuation_zero_speed() {
        let start = analytic_wavetrain(0.0, 0.4).unwrap();
        let fam = continue_family(&start, (0.0, 1.0), 6, &ContinuationOptions::default()).unwrap();
        assert_eq!(fam.members.len(), 7);
        assert_eq!(fam.termination, Termination::Completed);
        for (m, &(c, x)) in fam.members.iter().zip(&fam.parameters).skip(1) {
            assert!(x > start.period);
            let w = lambda_omega_wave_params(0.0, 1.0, 2.0 * PI / x).unwrap();
            assert!(amplitude_error(m, w.amplitude) < 1e-6);
            assert!(c.abs() < 1e-6);
            assert!(m.residual <= 1e-8);
        }
        for w in fam.members.windows(2) {
            let d = w[0].u_samples.iter().zip(&w[1].u_samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 2.0 * ContinuationOptions::default().ds);
        }
    }

    #[test]
    fn continuation_nonzero_speed() {
        let start = analytic_wavetrain(0.5, 0.3).unwrap();
        let fam = continue_family(&start, (0.0, -1.0), 5, &ContinuationOptions::default()).unwrap();
        assert_eq!(fam.members.len(), 6);
        for &(c, x) in &fam.parameters {
            let q = 2.0 * PI / x;
            assert!((c - 0.5 * (1.0 - q * q) / q).abs() < 1e-6, "X = {x}");
        }
        assert!(fam.parameters[5].1 < start.period);
    }

    #[test]
    fn continuation_with_zero_steps() {
        let start = analytic_wavetrain(0.0, 0.4).unwrap();
        let fam = continue_family(&start, (0.0, 1.0), 0, &ContinuationOptions::default()).unwrap();
        assert_eq!(fam.members.len(), 1);
    }
}
