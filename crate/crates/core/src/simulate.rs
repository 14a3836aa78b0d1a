//! Nonlinear runs from localized perturbations of a wave train on a large
//! periodic domain, modulation-phase extraction, the nonlinear source terms
//! and the iteration diagnostic `eta`.
//!
//! Extended-domain fields are stored per component (`field[c][p]`), with
//! `p` indexing `x_p = p h` on `[0, M_d X)`.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bloch::{default_delta_xi, fit_critical_expansion};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fit::{fit_power_law, LinearFit};
use crate::fourier::{fft_real, spectral_derivative, wavenumber, PeriodicInterpolant};
use crate::integrate::{to_physical, to_spectral, Scheme, SpectralIntegrator};
use crate::linalg::solve_real;
use crate::profile::WaveProfile;
use crate::semigroup::Semigroup;
use num_complex::Complex64;

/// Sobolev index used for `eta` and the damping diagnostic.
pub const K_EFF: u32 = 2;

pub type Field = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// `delta`.
    pub amplitude: f64,
    /// Standard deviation `sigma` of the Gaussian bump, in space units.
    pub width: f64,
    /// Bump centre; `None` centres it in the domain.
    pub center: Option<f64>,
    /// Components that receive the bump.
    pub components: Vec<usize>,
    /// Relative multiplicative noise: each sample is scaled by
    /// `1 + noise * U(-1, 1)`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    /// Centred noiseless bump.
    pub fn gaussian(amplitude: f64, width: f64, components: Vec<usize>) -> Self {
        PerturbationSpec { amplitude, width, center: None, components, noise: 0.0, seed: 0 }
    }

    /// `v0(x) = delta exp(-(x - x0)^2 / (2 sigma^2))` in the selected
    /// components, with the distance taken periodically.
    pub fn field(&self, n: usize, n_ext: usize, length: f64) -> Field {
        let h = length / n_ext as f64;
        let x0 = self.center.unwrap_or(0.5 * length);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut v = vec![vec![0.0; n_ext]; n];
        for &c in &self.components {
            for (p, val) in v[c].iter_mut().enumerate() {
                let mut d = p as f64 * h - x0;
                d -= length * (d / length).round();
                *val = self.amplitude * (-0.5 * (d / self.width).powi(2)).exp();
                if self.noise != 0.0 {
                    *val *= 1.0 + self.noise * rng.random_range(-1.0..1.0);
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub profile: WaveProfile,
    pub domain_periods: usize,
    pub points_per_period: usize,
    pub dt: f64,
    pub t_final: f64,
    pub scheme: Scheme,
    pub perturbation: PerturbationSpec,
    /// Times at which the state is recorded (rounded to whole steps).
    pub snapshot_times: Vec<f64>,
}

/// Quantities fixed at initialization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSetup {
    /// `max_x ||df(u(x))||_F`, the bound used in the step-size check.
    pub jacobian_bound: f64,
    pub stability_number: f64,
    /// `sqrt(4 T) + |Im mu1| T` against `M_d X / 4`.
    pub spread: f64,
    pub spread_limit: f64,
    pub mu1: [f64; 2],
    pub v0_l1: f64,
    pub v0_hk: f64,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    pub field: Field,
}

#[derive(Clone, Debug)]
pub struct SimulationRun {
    /// Profile at `points_per_period` resolution.
    pub profile: WaveProfile,
    pub periods: usize,
    pub setup: RunSetup,
    pub v0: Field,
    pub snapshots: Vec<Snapshot>,
    pub scheme: Scheme,
    pub dt: f64,
}

impl SimulationRun {
    pub fn length(&self) -> f64 {
        self.profile.period * self.periods as f64
    }

    pub fn spacing(&self) -> f64 {
        self.profile.spacing()
    }

    /// `u` repeated over the extended domain.
    pub fn background(&self) -> Field {
        extend(&self.profile, self.periods)
    }
}

pub fn extend(profile: &WaveProfile, periods: usize) -> Field {
    profile
        .components()
        .into_iter()
        .map(|c| (0..periods).flat_map(|_| c.iter().copied()).collect())
        .collect()
}

fn frobenius_bound(profile: &WaveProfile) -> f64 {
    let n = profile.n();
    let mut df = vec![0.0; n * n];
    (0..profile.grid_n)
        .map(|j| {
            profile.sys.jacobian_into(profile.value(j), &mut df);
            df.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn norm_l1(f: &[Vec<f64>], h: f64) -> f64 {
    let np = f.first().map_or(0, Vec::len);
    (0..np).map(|p| f.iter().map(|c| c[p] * c[p]).sum::<f64>().sqrt()).sum::<f64>() * h
}

pub fn norm_l2(f: &[Vec<f64>], h: f64) -> f64 {
    (f.iter().flatten().map(|v| v * v).sum::<f64>() * h).sqrt()
}

pub fn norm_linf(f: &[Vec<f64>]) -> f64 {
    let np = f.first().map_or(0, Vec::len);
    (0..np).map(|p| f.iter().map(|c| c[p] * c[p]).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

/// `H^k` norm on the periodic domain of length `length` via the multiplier
/// `(1 + k^2)^k`.
pub fn norm_hk(f: &[Vec<f64>], length: f64, k: u32) -> f64 {
    let mut s = 0.0;
    for c in f {
        let n = c.len();
        for (m, z) in fft_real(c).iter().enumerate() {
            let kk = wavenumber(m, n, length);
            s += (1.0 + kk * kk).powi(k as i32) * z.norm_sqr();
        }
    }
    let n = f.first().map_or(1, Vec::len) as f64;
    (s * length / (n * n)).sqrt()
}

impl SimulationConfig {
    /// Checks the step-size bound and the no-self-interaction budget and
    /// returns the run setup.
    pub fn validate(&self) -> Result<(WaveProfile, RunSetup)> {
        let reject = |m: String| Err(Error::RejectedConfig(m));
        if self.domain_periods < 4 || self.domain_periods % 2 != 0 {
            return reject(format!("domain_periods must be even and >= 4, got {}", self.domain_periods));
        }
        if self.points_per_period < 8 || self.points_per_period % 2 != 0 {
            return reject(format!("points_per_period must be even and >= 8, got {}", self.points_per_period));
        }
        if !(self.dt > 0.0) || !(self.t_final > 0.0) {
            return reject(format!("dt = {} and T_final = {} must be positive", self.dt, self.t_final));
        }
        let n = self.profile.n();
        if self.perturbation.components.iter().any(|&c| c >= n) {
            return reject(format!("perturbed component out of range for n = {n}"));
        }
        if !(self.perturbation.width > 0.0) {
            return reject(format!("perturbation width must be positive, got {}", self.perturbation.width));
        }
        if let Some(t) = self.snapshot_times.iter().find(|t| !(**t >= 0.0 && **t <= self.t_final)) {
            return reject(format!("snapshot time {t} outside [0, {}]", self.t_final));
        }
        let profile = if self.profile.grid_n == self.points_per_period {
            self.profile.clone()
        } else {
            self.profile.resampled(self.points_per_period)?
        };
        let jb = frobenius_bound(&profile);
        let stability_number = self.dt * jb;
        if stability_number > self.scheme.stability_limit() {
            return reject(format!(
                "dt * max|df| = {stability_number:.3} exceeds the {} limit {}",
                self.scheme.name(),
                self.scheme.stability_limit()
            ));
        }
        let mu1 = fit_critical_expansion(&profile, default_delta_xi(&profile))?.mu1;
        let spread = (4.0 * self.t_final).sqrt() + mu1[1].abs() * self.t_final;
        let spread_limit = self.domain_periods as f64 * profile.period / 4.0;
        if spread >= spread_limit {
            return reject(format!(
                "perturbation spread {spread:.1} reaches M_d X / 4 = {spread_limit:.1}; enlarge domain_periods"
            ));
        }
        let length = profile.period * self.domain_periods as f64;
        let v0 = self.perturbation.field(n, self.points_per_period * self.domain_periods, length);
        let h = profile.spacing();
        Ok((
            profile,
            RunSetup {
                jacobian_bound: jb,
                stability_number,
                spread,
                spread_limit,
                mu1,
                v0_l1: norm_l1(&v0, h),
                v0_hk: norm_hk(&v0, length, K_EFF),
            },
        ))
    }
}

/// Integrates `u_t = u_xx + c u_x + f(u)` from `u + v0` and records the
/// requested snapshots.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationRun> {
    let (profile, setup) = cfg.validate()?;
    let n = profile.n();
    let periods = cfg.domain_periods;
    let n_ext = cfg.points_per_period * periods;
    let length = profile.period * periods as f64;
    let base = extend(&profile, periods);
    let v0 = cfg.perturbation.field(n, n_ext, length);
    let u0: Field = base.iter().zip(&v0).map(|(b, v)| b.iter().zip(v).map(|(x, y)| x + y).collect()).collect();
    let lin: Vec<Complex64> = (0..n_ext)
        .map(|m| {
            let k = wavenumber(m, n_ext, length);
            let kd = if 2 * m == n_ext { 0.0 } else { k };
            Complex64::new(-k * k, profile.c * kd)
        })
        .collect();
    let sys = profile.sys.clone();
    let nl = move |u: &[Vec<f64>], out: &mut [Vec<f64>]| {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for p in 0..u[0].len() {
            for c in 0..n {
                a[c] = u[c][p];
            }
            sys.reaction_into(&a, &mut b);
            for c in 0..n {
                out[c][p] = b[c];
            }
        }
    };
    let mut integ = SpectralIntegrator::new(cfg.scheme, lin, n, cfg.dt)?;
    let mut state = to_spectral(&u0);
    let u0_inf = norm_linf(&u0);
    let mut targets: Vec<(u64, usize)> = cfg
        .snapshot_times
        .iter()
        .enumerate()
        .map(|(i, t)| ((t / cfg.dt).round() as u64, i))
        .collect();
    targets.sort();
    let total = (cfg.t_final / cfg.dt).round() as u64;
    let mut slots: Vec<Option<Snapshot>> = vec![None; cfg.snapshot_times.len()];
    let mut next = 0;
    let mut step = 0u64;
    let check = |state: &[Vec<Complex64>], t: f64| -> Result<Field> {
        let u = to_physical(state);
        let r = norm_linf(&u) / u0_inf;
        if !r.is_finite() || r > 10.0 {
            return Err(Error::Divergence { t, ratio: r });
        }
        Ok(u)
    };
    loop {
        while next < targets.len() && targets[next].0 == step {
            let u = check(&state, step as f64 * cfg.dt)?;
            slots[targets[next].1] = Some(Snapshot { t: step as f64 * cfg.dt, field: u });
            next += 1;
        }
        if step >= total {
            break;
        }
        integ.step(&mut state, &nl);
        step += 1;
        if step % 50 == 0 {
            check(&state, step as f64 * cfg.dt)?;
        }
    }
    Ok(SimulationRun {
        profile,
        periods,
        setup,
        v0,
        snapshots: slots.into_iter().flatten().collect(),
        scheme: cfg.scheme,
        dt: cfg.dt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseMethod {
    #[serde(rename = "fit")]
    Fit,
    #[serde(rename = "kernel")]
    Kernel,
}

#[derive(Clone, Debug)]
pub struct PhaseField {
    pub psi: Vec<f64>,
    pub psi_x: Vec<f64>,
    pub psi_xx: Vec<f64>,
    /// Filled from neighbouring snapshots (fit method) or from the kernel's
    /// time derivative.
    pub psi_t: Option<Vec<f64>>,
    pub method: PhaseMethod,
    /// Stage-one shifts at the coarse nodes (fit method).
    pub nodes: Vec<f64>,
}

/// Periodic uniform cubic B-spline with `k` coefficients on `[0, length)`.
struct Spline {
    k: usize,
    delta: f64,
}

fn bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

impl Spline {
    /// Indices and values of the four basis functions nonzero at `x`.
    fn basis(&self, x: f64) -> [(usize, f64); 4] {
        let s = x / self.delta;
        let i = s.floor() as i64;
        let mut out = [(0usize, 0.0); 4];
        for (a, o) in out.iter_mut().enumerate() {
            let j = i - 1 + a as i64;
            *o = (j.rem_euclid(self.k as i64) as usize, bspline(s - j as f64));
        }
        out
    }

    fn eval(&self, c: &[f64], x: f64) -> f64 {
        self.basis(x).iter().map(|(j, b)| c[*j] * b).sum()
    }

    /// Coefficients interpolating node values `s_j = psi(j delta)`.
    fn interpolate(&self, values: &[f64]) -> Result<Vec<f64>> {
        let k = self.k;
        let a = Mat::from_fn(k, k, |i, j| {
            let d = (j as i64 - i as i64).rem_euclid(k as i64);
            if d == 0 {
                4.0 / 6.0
            } else if d == 1 || d == k as i64 - 1 {
                1.0 / 6.0
            } else {
                0.0
            }
        });
        solve_real(&a, values).ok_or_else(|| Error::InvalidInput("singular spline interpolation".into()))
    }
}

/// Options for [`extract_phase_fit_with`].
#[derive(Clone, Debug, Default)]
pub struct PhaseFitOptions<'a> {
    /// Stage-one node shifts of the previous snapshot, used to pick the
    /// valley when the local misfit has two comparable minima.
    pub prior: Option<&'a [f64]>,
}

const NODES_PER_PERIOD: usize = 4;
const SCAN: usize = 32;

/// Locally shifted windowed misfit at node `xk`:
/// `h sum_p w(xk + s - x_p) |u~(x_p) - u(x_p - s)|^2`.
struct LocalFit<'a> {
    utilde: &'a [Vec<f64>],
    ubar: &'a PeriodicInterpolant,
    h: f64,
    period: f64,
    n_ext: usize,
}

impl LocalFit<'_> {
    fn misfit(&self, xk: f64, s: f64) -> f64 {
        let sigma = 0.5 * self.period;
        let reach = 3.0 * sigma;
        let centre = xk + s;
        let p0 = ((centre - reach) / self.h).floor() as i64;
        let p1 = ((centre + reach) / self.h).ceil() as i64;
        let n = self.utilde.len();
        let mut ub = vec![0.0; n];
        let mut acc = 0.0;
        for pi in p0..=p1 {
            let x = pi as f64 * self.h;
            let w = (-0.5 * ((centre - x) / sigma).powi(2)).exp();
            let p = pi.rem_euclid(self.n_ext as i64) as usize;
            self.ubar.eval_all(x - s, &mut ub);
            let d: f64 = (0..n).map(|c| (self.utilde[c][p] - ub[c]).powi(2)).sum();
            acc += w * d;
        }
        acc * self.h
    }

    /// Local minima of the scanned misfit over one period of shifts,
    /// refined by golden-section search: `(s, misfit)` sorted by misfit.
    fn minima(&self, xk: f64) -> Vec<(f64, f64)> {
        let ds = self.period / SCAN as f64;
        let vals: Vec<f64> = (0..SCAN).map(|i| self.misfit(xk, -0.5 * self.period + i as f64 * ds)).collect();
        let mut out = Vec::new();
        for i in 0..SCAN {
            let l = vals[(i + SCAN - 1) % SCAN];
            let r = vals[(i + 1) % SCAN];
            if vals[i] <= l && vals[i] < r {
                let s0 = -0.5 * self.period + i as f64 * ds;
                out.push(self.golden(xk, s0 - ds, s0 + ds));
            }
        }
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        out
    }

    fn golden(&self, xk: f64, mut a: f64, mut b: f64) -> (f64, f64) {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let mut fc = self.misfit(xk, c);
        let mut fd = self.misfit(xk, d);
        while (b - a).abs() > 1e-9 * self.period {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = self.misfit(xk, c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = self.misfit(xk, d);
            }
        }
        let s = 0.5 * (a + b);
        (s, self.misfit(xk, s))
    }
}

fn wrap_to(s: f64, reference: f64, period: f64) -> f64 {
    s - period * ((s - reference) / period).round()
}

pub fn extract_phase_fit(utilde: &[Vec<f64>], profile: &WaveProfile) -> Result<PhaseField> {
    extract_phase_fit_with(utilde, profile, &PhaseFitOptions::default())
}

/// Two-stage phase extraction with the convention `u~(x + psi(x)) ~ u(x)`.
///
/// Stage one finds, at 4 nodes per period, the shift minimizing a Gaussian
/// windowed misfit (window standard deviation `X/2`, i.e. width `2X` at two
/// standard deviations). Stage two refines a periodic cubic spline through
/// those nodes by Gauss-Newton on the global misfit
/// `sum_p |u~(x_p + psi(x_p)) - u(x_p)|^2`.
pub fn extract_phase_fit_with(utilde: &[Vec<f64>], profile: &WaveProfile, opts: &PhaseFitOptions) -> Result<PhaseField> {
    let n = profile.n();
    if utilde.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: utilde.len() });
    }
    let n_ext = utilde[0].len();
    if n_ext % profile.grid_n != 0 {
        return Err(Error::InvalidInput(format!(
            "field length {n_ext} is not a whole number of {}-point periods",
            profile.grid_n
        )));
    }
    let periods = n_ext / profile.grid_n;
    let period = profile.period;
    let length = period * periods as f64;
    let h = profile.spacing();
    let ubar = PeriodicInterpolant::new(&profile.components(), period, 16);
    let local = LocalFit { utilde, ubar: &ubar, h, period, n_ext };
    let k = NODES_PER_PERIOD * periods;
    let delta = length / k as f64;

    // Stage one.
    let mut nodes = Vec::with_capacity(k);
    for j in 0..k {
        let xk = j as f64 * delta;
        let mins = local.minima(xk);
        let Some(&(s_best, m_best)) = mins.first() else {
            return Err(Error::AmbiguousPhase { x: xk });
        };
        let ambiguous = mins.len() > 1 && mins[1].1 <= 1.1 * m_best && mins[1].1 > 0.0;
        let reference = opts.prior.map(|p| p[j]).or_else(|| nodes.last().copied());
        let s = match (ambiguous, reference) {
            (false, r) => r.map_or(s_best, |r| wrap_to(s_best, r, period)),
            (true, Some(r)) => {
                let (s, _) = mins
                    .iter()
                    .filter(|m| m.1 <= 1.1 * m_best)
                    .map(|m| (wrap_to(m.0, r, period), m.1))
                    .min_by(|a, b| (a.0 - r).abs().partial_cmp(&(b.0 - r).abs()).unwrap())
                    .expect("nonempty");
                s
            }
            (true, None) => return Err(Error::AmbiguousPhase { x: xk }),
        };
        nodes.push(s);
    }

    // Stage two.
    let spline = Spline { k, delta };
    let mut coef = spline.interpolate(&nodes)?;
    let ut = PeriodicInterpolant::new(utilde, length, 8);
    let dut: Vec<Vec<f64>> = utilde.iter().map(|c| spectral_derivative(c, length, 1)).collect();
    let dut = PeriodicInterpolant::new(&dut, length, 8);
    let ub_grid = profile.components();
    let mut val = vec![0.0; n];
    let mut der = vec![0.0; n];
    for _ in 0..12 {
        let mut ata = Mat::<f64>::zeros(k, k);
        let mut atb = vec![0.0; k];
        for p in 0..n_ext {
            let x = p as f64 * h;
            let basis = spline.basis(x);
            let psi: f64 = basis.iter().map(|(j, b)| coef[*j] * b).sum();
            ut.eval_all(x + psi, &mut val);
            dut.eval_all(x + psi, &mut der);
            for c in 0..n {
                let r = val[c] - ub_grid[c][p % profile.grid_n];
                for &(ja, ba) in &basis {
                    atb[ja] += der[c] * ba * r;
                    for &(jb, bb) in &basis {
                        ata[(ja, jb)] += der[c] * der[c] * ba * bb;
                    }
                }
            }
        }
        let step = solve_real(&ata, &atb).ok_or_else(|| Error::InvalidInput("singular phase normal equations".into()))?;
        let mut biggest: f64 = 0.0;
        for (c, d) in coef.iter_mut().zip(&step) {
            *c -= d;
            biggest = biggest.max(d.abs());
        }
        if biggest < 1e-12 * period {
            break;
        }
    }
    let psi: Vec<f64> = (0..n_ext).map(|p| spline.eval(&coef, p as f64 * h)).collect();
    let psi_x = spectral_derivative(&psi, length, 1);
    let psi_xx = spectral_derivative(&psi, length, 2);
    if let Some(p) = psi_x.iter().position(|v| v.abs() >= 0.5) {
        return Err(Error::AnsatzBreakdown { max_psi_x: psi_x[p].abs() });
    }
    Ok(PhaseField { psi, psi_x, psi_xx, psi_t: None, method: PhaseMethod::Fit, nodes })
}

/// `psi_lin = -int e(x,t;y) v0(y) dy` with its `x` and `t` derivatives.
pub fn extract_phase_kernel(v0: &[Vec<f64>], t: f64, sg: &Semigroup) -> Result<PhaseField> {
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("kernel phase needs t > 0, got {t}")));
    }
    let [psi, psi_x, psi_t] = sg.linear_phase(v0, t)?;
    let psi_xx = spectral_derivative(&psi, sg.grid().length(), 2);
    Ok(PhaseField { psi, psi_x, psi_xx, psi_t: Some(psi_t), method: PhaseMethod::Kernel, nodes: Vec::new() })
}

/// `v(x) = u~(x + psi(x)) - u(x)` by spectral interpolation of `u~`.
pub fn compute_modulated_residual(utilde: &[Vec<f64>], profile: &WaveProfile, psi: &PhaseField) -> Result<Field> {
    let n = profile.n();
    if utilde.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: utilde.len() });
    }
    let n_ext = utilde[0].len();
    if psi.psi.len() != n_ext {
        return Err(Error::DimensionMismatch { expected: n_ext, got: psi.psi.len() });
    }
    if let Some(v) = psi.psi_x.iter().find(|v| v.abs() >= 0.5) {
        return Err(Error::AnsatzBreakdown { max_psi_x: v.abs() });
    }
    let h = profile.spacing();
    let length = h * n_ext as f64;
    let ut = PeriodicInterpolant::new(utilde, length, 8);
    let ub = profile.components();
    let mut val = vec![0.0; n];
    let mut out = vec![vec![0.0; n_ext]; n];
    for p in 0..n_ext {
        ut.eval_all(p as f64 * h + psi.psi[p], &mut val);
        for c in 0..n {
            out[c][p] = val[c] - ub[c][p % profile.grid_n];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TermNorms {
    pub l1: f64,
    pub l2: f64,
}

#[derive(Clone, Debug)]
pub struct NonlinearTerms {
    pub q: Field,
    pub r: Field,
    pub s: Field,
    pub t: Field,
    pub r_x: Field,
    pub q_norms: TermNorms,
    pub r_norms: TermNorms,
    pub s_norms: TermNorms,
    pub t_norms: TermNorms,
    pub r_x_norms: TermNorms,
}

impl NonlinearTerms {
    /// `||(Q, R_x, T)||_{L1} + ||(Q, R_x, T)||_{L2}`.
    pub fn qrt_l1_l2(&self, h: f64) -> f64 {
        let stacked: Field = self.q.iter().chain(&self.r_x).chain(&self.t).cloned().collect();
        norm_l1(&stacked, h) + norm_l2(&stacked, h)
    }
}

/// Pointwise `Q = f(v+u) - f(u) - df(u) v`, `R = (u_x + v_x) psi_x^2 / (1 + psi_x)`,
/// `S = v psi_x` and `T = (df(v+u) - df(u)) psi_x`, with their norms.
pub fn compute_nonlinear_terms(v: &[Vec<f64>], psi: &PhaseField, profile: &WaveProfile) -> Result<NonlinearTerms> {
    let n = profile.n();
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    let n_ext = v[0].len();
    if psi.psi_x.len() != n_ext {
        return Err(Error::DimensionMismatch { expected: n_ext, got: psi.psi_x.len() });
    }
    let h = profile.spacing();
    let length = h * n_ext as f64;
    let ub = profile.components();
    let ud = profile.derivative_components();
    let vx: Field = v.iter().map(|c| spectral_derivative(c, length, 1)).collect();
    let mut q = vec![vec![0.0; n_ext]; n];
    let mut r = vec![vec![0.0; n_ext]; n];
    let mut s = vec![vec![0.0; n_ext]; n];
    let mut t = vec![vec![0.0; n_ext]; n];
    let (mut u, mut w) = (vec![0.0; n], vec![0.0; n]);
    let (mut fu, mut fw) = (vec![0.0; n], vec![0.0; n]);
    let (mut du, mut dw) = (vec![0.0; n * n], vec![0.0; n * n]);
    for p in 0..n_ext {
        let j = p % profile.grid_n;
        for c in 0..n {
            u[c] = ub[c][j];
            w[c] = ub[c][j] + v[c][p];
        }
        profile.sys.reaction_into(&u, &mut fu);
        profile.sys.reaction_into(&w, &mut fw);
        profile.sys.jacobian_into(&u, &mut du);
        profile.sys.jacobian_into(&w, &mut dw);
        let px = psi.psi_x[p];
        for a in 0..n {
            let dv: f64 = (0..n).map(|b| du[a * n + b] * v[b][p]).sum();
            q[a][p] = fw[a] - fu[a] - dv;
            r[a][p] = (ud[a][j] + vx[a][p]) * px * px / (1.0 + px);
            s[a][p] = v[a][p] * px;
            t[a][p] = (0..n).map(|b| (dw[a * n + b] - du[a * n + b]) * px).sum();
        }
    }
    let r_x: Field = r.iter().map(|c| spectral_derivative(c, length, 1)).collect();
    let norms = |f: &Field| TermNorms { l1: norm_l1(f, h), l2: norm_l2(f, h) };
    Ok(NonlinearTerms {
        q_norms: norms(&q),
        r_norms: norms(&r),
        s_norms: norms(&s),
        t_norms: norms(&t),
        r_x_norms: norms(&r_x),
        q,
        r,
        s,
        t,
        r_x,
    })
}

/// One entry of the `eta` history.
#[derive(Clone, Debug)]
pub struct EtaSample<'a> {
    pub t: f64,
    pub v: &'a [Vec<f64>],
    pub psi_t: &'a [f64],
    pub psi_x: &'a [f64],
}

/// `eta(t) = sup_{s <= t} ||(v, psi_t, psi_x)||_{H^K}(s) (1+s)^{3/4}` with
/// `K = K_EFF`, over the samples in time order.
pub fn compute_eta(history: &[EtaSample], length: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len());
    let mut sup: f64 = 0.0;
    for s in history {
        let mut stacked: Field = s.v.to_vec();
        stacked.push(s.psi_t.to_vec());
        stacked.push(s.psi_x.to_vec());
        let val = norm_hk(&stacked, length, K_EFF) * (1.0 + s.t).powf(0.75);
        sup = sup.max(val);
        out.push(sup);
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormSeries {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeFit {
    pub name: String,
    pub window: (f64, f64),
    pub slope: f64,
    pub stderr: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub series: Vec<NormSeries>,
    pub fits: Vec<SlopeFit>,
    pub eta: Vec<f64>,
    pub window: (f64, f64),
    pub setup: RunSetup,
    /// Fitted velocity of the centroid of `psi^2`.
    pub drift_velocity: f64,
    /// `-Im mu1`, the predicted drift.
    pub predicted_drift: f64,
    /// Relative `L2` difference between kernel and fit phases per time,
    /// when the cross-check ran.
    pub kernel_discrepancy: Option<Vec<f64>>,
}

impl DecayReport {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.series.iter().find(|s| s.name == name).map(|s| s.values.as_slice())
    }

    pub fn fit(&self, name: &str) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.name == name)
    }
}

/// Predicted exponents: modulated `L^p` norms decay like
/// `(1+t)^(-(1-1/p)/2 - 1/2)`, unmodulated norms and `psi` like
/// `(1+t)^(-(1-1/p)/2)`, and `(psi_t, psi_x)` like `(1+t)^(-3/4)`.
pub fn predicted_slope(name: &str) -> Option<f64> {
    Some(match name {
        "mod_l2" => -0.75,
        "mod_linf" => -1.0,
        "unmod_l2" | "psi_l2" => -0.25,
        "unmod_linf" | "psi_linf" => -0.5,
        "psi_tx_l2" | "psi_tx_hk" => -0.75,
        _ => return None,
    })
}

#[derive(Clone, Debug)]
pub struct DecayOptions {
    /// Fit window; defaults to `[20, 0.9 T]`.
    pub window: Option<(f64, f64)>,
    /// Cross-check the fit phase against the kernel phase.
    pub kernel_crosscheck: Option<Semigroup>,
    pub exec: Exec,
}

impl Default for DecayOptions {
    fn default() -> Self {
        DecayOptions { window: None, kernel_crosscheck: None, exec: Exec::default() }
    }
}

/// Per-snapshot post-processing results.
struct Processed {
    phase: PhaseField,
    v: Field,
}

fn process_snapshot(run: &SimulationRun, snap: &Snapshot, prior: Option<&[f64]>) -> Result<Processed> {
    let phase = extract_phase_fit_with(&snap.field, &run.profile, &PhaseFitOptions { prior })?;
    let v = compute_modulated_residual(&snap.field, &run.profile, &phase)?;
    Ok(Processed { phase, v })
}

/// Phase and modulated residual at every snapshot. Snapshots are processed
/// in parallel; a snapshot whose phase is ambiguous is redone in time order
/// with the previous snapshot's nodes as the prior.
fn process_all(run: &SimulationRun, exec: Exec) -> Result<Vec<Processed>> {
    let first: Vec<Result<Processed>> = exec.map(&run.snapshots, |s| process_snapshot(run, s, None));
    let mut out: Vec<Processed> = Vec::with_capacity(first.len());
    for (k, r) in first.into_iter().enumerate() {
        match r {
            Ok(p) => out.push(p),
            Err(Error::AmbiguousPhase { .. }) if k > 0 => {
                let prior = out[k - 1].phase.nodes.clone();
                out.push(process_snapshot(run, &run.snapshots[k], Some(&prior))?);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn diff_in_time(times: &[f64], fields: &[&[f64]]) -> Vec<Vec<f64>> {
    let m = times.len();
    (0..m)
        .map(|k| {
            let (a, b) = if m == 1 {
                (0, 0)
            } else if k == 0 {
                (0, 1)
            } else if k + 1 == m {
                (m - 2, m - 1)
            } else {
                (k - 1, k + 1)
            };
            if a == b {
                return vec![0.0; fields[k].len()];
            }
            let dt = times[b] - times[a];
            fields[a].iter().zip(fields[b]).map(|(x, y)| (y - x) / dt).collect()
        })
        .collect()
}

/// Norm series, fits and diagnostics of a finished run.
pub fn decay_report(run: &SimulationRun, opts: &DecayOptions) -> Result<DecayReport> {
    if run.snapshots.len() < 3 {
        return Err(Error::InvalidInput("decay report needs at least 3 snapshots".into()));
    }
    let times: Vec<f64> = run.snapshots.iter().map(|s| s.t).collect();
    let h = run.spacing();
    let length = run.length();
    let base = run.background();
    let processed = process_all(run, opts.exec)?;
    let psis: Vec<&[f64]> = processed.iter().map(|p| p.phase.psi.as_slice()).collect();
    let psi_t = diff_in_time(&times, &psis);

    let mut unmod_l2 = Vec::new();
    let mut unmod_linf = Vec::new();
    let mut mod_l2 = Vec::new();
    let mut mod_linf = Vec::new();
    let mut psi_l2 = Vec::new();
    let mut psi_linf = Vec::new();
    let mut psi_tx_l2 = Vec::new();
    let mut psi_tx_hk = Vec::new();
    let mut v_hk = Vec::new();
    let mut qrt = Vec::new();
    let mut qrt_weighted = Vec::new();
    let mut damping = Vec::new();
    let mut centroid = Vec::new();
    let x0 = 0.5 * length;
    for (k, (snap, pr)) in run.snapshots.iter().zip(&processed).enumerate() {
        let w: Field = snap.field.iter().zip(&base).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
        unmod_l2.push(norm_l2(&w, h));
        unmod_linf.push(norm_linf(&w));
        mod_l2.push(norm_l2(&pr.v, h));
        mod_linf.push(norm_linf(&pr.v));
        let psi = vec![pr.phase.psi.clone()];
        psi_l2.push(norm_l2(&psi, h));
        psi_linf.push(norm_linf(&psi));
        let tx = vec![psi_t[k].clone(), pr.phase.psi_x.clone()];
        psi_tx_l2.push(norm_l2(&tx, h));
        let txh = norm_hk(&tx, length, K_EFF);
        psi_tx_hk.push(txh);
        let vh = norm_hk(&pr.v, length, K_EFF);
        v_hk.push(vh);
        damping.push(vh / (norm_l2(&pr.v, h) + txh));
        let mut phase = pr.phase.clone();
        phase.psi_t = Some(psi_t[k].clone());
        let terms = compute_nonlinear_terms(&pr.v, &phase, &run.profile)?;
        let m = terms.qrt_l1_l2(h);
        qrt.push(m);
        qrt_weighted.push(m * (1.0 + snap.t).powf(1.5));
        // Centroid of psi^2 relative to the domain centre.
        let (mut num, mut den) = (0.0, 0.0);
        for (p, v) in pr.phase.psi.iter().enumerate() {
            let mut d = p as f64 * h - x0;
            d -= length * (d / length).round();
            num += d * v * v;
            den += v * v;
        }
        centroid.push(if den > 0.0 { num / den } else { 0.0 });
    }
    let history: Vec<EtaSample> = processed
        .iter()
        .zip(&times)
        .zip(&psi_t)
        .map(|((p, &t), pt)| EtaSample { t, v: &p.v, psi_t: pt, psi_x: &p.phase.psi_x })
        .collect();
    let eta = compute_eta(&history, length);
    let t_final = *times.last().expect("snapshots");
    let window = opts.window.unwrap_or((20.0, 0.9 * t_final));

    let kernel_discrepancy = match &opts.kernel_crosscheck {
        Some(sg) => {
            let mut out = Vec::new();
            for (pr, &t) in processed.iter().zip(&times) {
                if t <= 0.0 {
                    out.push(f64::NAN);
                    continue;
                }
                let kp = extract_phase_kernel(&run.v0, t, sg)?;
                let d: f64 = kp.psi.iter().zip(&pr.phase.psi).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let s: f64 = pr.phase.psi.iter().map(|b| b * b).sum::<f64>();
                out.push((d / s).sqrt());
            }
            Some(out)
        }
        None => None,
    };

    let series = vec![
        NormSeries { name: "unmod_l2".into(), values: unmod_l2 },
        NormSeries { name: "unmod_linf".into(), values: unmod_linf },
        NormSeries { name: "mod_l2".into(), values: mod_l2 },
        NormSeries { name: "mod_linf".into(), values: mod_linf },
        NormSeries { name: "psi_l2".into(), values: psi_l2 },
        NormSeries { name: "psi_linf".into(), values: psi_linf },
        NormSeries { name: "psi_tx_l2".into(), values: psi_tx_l2 },
        NormSeries { name: "psi_tx_hk".into(), values: psi_tx_hk },
        NormSeries { name: "v_hk".into(), values: v_hk },
        NormSeries { name: "damping_ratio".into(), values: damping },
        NormSeries { name: "qrt_l1_l2".into(), values: qrt },
        NormSeries { name: "qrt_weighted".into(), values: qrt_weighted },
        NormSeries { name: "eta".into(), values: eta.clone() },
        NormSeries { name: "psi_centroid".into(), values: centroid.clone() },
    ];
    let mut fits = Vec::new();
    for s in &series {
        if let Some(pred) = predicted_slope(&s.name) {
            let f: LinearFit = fit_power_law(&times, &s.values, window)?;
            fits.push(SlopeFit { name: s.name.clone(), window, slope: f.slope, stderr: f.stderr, predicted: pred });
        }
    }
    // Drift: least-squares slope of the centroid against t over the window.
    let (tw, cw): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&centroid)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(t, c)| (*t, *c))
        .unzip();
    let drift_velocity = if tw.len() >= 2 {
        let mt = tw.iter().sum::<f64>() / tw.len() as f64;
        let mc = cw.iter().sum::<f64>() / cw.len() as f64;
        let sxy: f64 = tw.iter().zip(&cw).map(|(t, c)| (t - mt) * (c - mc)).sum();
        let sxx: f64 = tw.iter().map(|t| (t - mt).powi(2)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    Ok(DecayReport {
        times,
        series,
        fits,
        eta,
        window,
        setup: run.setup.clone(),
        drift_velocity,
        predicted_drift: -run.setup.mu1[1],
        kernel_discrepancy,
    })
}

/// Runs the simulation and builds its decay report.
pub fn decay_suite(cfg: &SimulationConfig, opts: &DecayOptions) -> Result<(SimulationRun, DecayReport)> {
    let run = run_simulation(cfg)?;
    let report = decay_report(&run, opts)?;
    Ok((run, report))
}
