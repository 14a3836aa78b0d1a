//! Spectral utilities on periodic grids: FFT helpers, differentiation,
//! resampling, off-grid interpolation, and the discrete Bloch transform.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = PLANNER
        .get_or_init(|| Mutex::new(FftPlanner::new()))
        .lock()
        .expect("fft planner poisoned");
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Unnormalized forward DFT, `X_m = sum_j x_j e^{-2 pi i m j / n}`.
pub fn fft(data: &mut [Complex64]) {
    if data.len() > 1 {
        plan(data.len(), false).process(data);
    }
}

/// Inverse DFT including the `1/n` factor.
pub fn ifft(data: &mut [Complex64]) {
    let n = data.len();
    if n > 1 {
        plan(n, true).process(data);
    }
    let s = 1.0 / n as f64;
    for z in data.iter_mut() {
        *z *= s;
    }
}

pub fn fft_real(samples: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft(&mut buf);
    buf
}

/// Signed frequency index in `[-n/2, n/2)`.
pub fn signed_index(m: usize, n: usize) -> i64 {
    if 2 * m < n {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

pub fn is_nyquist(m: usize, n: usize) -> bool {
    n % 2 == 0 && 2 * m == n
}

pub fn wavenumber(m: usize, n: usize, period: f64) -> f64 {
    2.0 * PI * signed_index(m, n) as f64 / period
}

/// Spectral derivative of real periodic samples. The Nyquist mode is dropped
/// for odd orders so that the result stays real.
pub fn spectral_derivative(samples: &[f64], period: f64, order: u32) -> Vec<f64> {
    let n = samples.len();
    let mut c = fft_real(samples);
    for (m, z) in c.iter_mut().enumerate() {
        let k = wavenumber(m, n, period);
        if order % 2 == 1 && is_nyquist(m, n) {
            *z = Complex64::new(0.0, 0.0);
        } else {
            *z *= Complex64::new(0.0, k).powu(order);
        }
    }
    ifft(&mut c);
    c.iter().map(|z| z.re).collect()
}

/// Trigonometric resampling of real periodic samples to `n_new` points.
pub fn resample(samples: &[f64], n_new: usize) -> Vec<f64> {
    let n = samples.len();
    if n == n_new {
        return samples.to_vec();
    }
    let c = fft_real(samples);
    let mut d = vec![Complex64::new(0.0, 0.0); n_new];
    for m in 0..n {
        let s = signed_index(m, n);
        let a = 2 * s.unsigned_abs() as usize;
        if is_nyquist(m, n) && n_new > n {
            // Split the old Nyquist coefficient between +n/2 and -n/2.
            let half = c[m] * 0.5;
            d[n / 2] += half;
            d[n_new - n / 2] += half;
        } else if a <= n_new {
            d[s.rem_euclid(n_new as i64) as usize] += c[m];
        }
    }
    ifft(&mut d);
    let scale = n_new as f64 / n as f64;
    d.iter().map(|z| z.re * scale).collect()
}

/// First and second derivative symbols of the Bloch operator,
/// `(d/dx + i xi)` and `(d/dx + i xi)^2`, on an `n`-point cell of the given
/// period. For even `n` the Nyquist mode is treated symmetrically:
/// `s1 = i xi` and `s2 = -(k_nyq^2 + xi^2)`, the average of the two aliased
/// branches `+-k_nyq`.
pub fn bloch_symbols(n: usize, period: f64, xi: f64) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut s1 = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    for m in 0..n {
        let k = wavenumber(m, n, period);
        if is_nyquist(m, n) {
            s1.push(Complex64::new(0.0, xi));
            s2.push(Complex64::new(-(k * k + xi * xi), 0.0));
        } else {
            let kk = k + xi;
            s1.push(Complex64::new(0.0, kk));
            s2.push(Complex64::new(-kk * kk, 0.0));
        }
    }
    (s1, s2)
}

/// First column of the circulant matrix with the given Fourier symbol:
/// `A[j][l] = col[(j - l) mod n]`.
pub fn circulant_column(symbol: &[Complex64]) -> Vec<Complex64> {
    let mut a = symbol.to_vec();
    ifft(&mut a);
    a
}

/// Off-grid evaluation of periodic band-limited data: the samples are
/// upsampled by FFT zero-padding and then interpolated with a local
/// 8-point Lagrange stencil on the fine grid.
#[derive(Clone, Debug)]
pub struct PeriodicInterpolant {
    period: f64,
    fine: Vec<Vec<f64>>,
    nf: usize,
    hf: f64,
}

const STENCIL: i64 = 8;

impl PeriodicInterpolant {
    /// `components[c]` holds the samples of component `c` on a uniform grid
    /// of `[0, period)`.
    pub fn new(components: &[Vec<f64>], period: f64, upsample: usize) -> Self {
        let n = components.first().map_or(0, Vec::len);
        let nf = n * upsample.max(1);
        let fine = components.iter().map(|c| resample(c, nf)).collect();
        PeriodicInterpolant { period, fine, nf, hf: period / nf as f64 }
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn components(&self) -> usize {
        self.fine.len()
    }

    pub fn eval(&self, comp: usize, x: f64) -> f64 {
        let (i0, w) = self.weights(x);
        self.apply(comp, i0, &w)
    }

    /// All components at `x`, sharing the stencil weights.
    pub fn eval_all(&self, x: f64, out: &mut [f64]) {
        let (i0, w) = self.weights(x);
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.apply(c, i0, &w);
        }
    }

    fn weights(&self, x: f64) -> (i64, [f64; STENCIL as usize]) {
        let s = x.rem_euclid(self.period) / self.hf;
        let base = s.floor();
        let theta = s - base;
        let lo = -(STENCIL / 2 - 1);
        let mut w = [0.0; STENCIL as usize];
        for (a, wa) in w.iter_mut().enumerate() {
            let ka = lo + a as i64;
            let mut num = 1.0;
            let mut den = 1.0;
            for b in 0..STENCIL {
                let kb = lo + b;
                if kb != ka {
                    num *= theta - kb as f64;
                    den *= (ka - kb) as f64;
                }
            }
            *wa = num / den;
        }
        (base as i64 + lo, w)
    }

    fn apply(&self, comp: usize, i0: i64, w: &[f64]) -> f64 {
        let f = &self.fine[comp];
        let nf = self.nf as i64;
        w.iter()
            .enumerate()
            .map(|(a, wa)| wa * f[(i0 + a as i64).rem_euclid(nf) as usize])
            .sum()
    }
}

/// Extended periodic domain of `periods` cells of `cell_n` points each, with
/// the reindexing of its DFT into Bloch components.
///
/// Extended mode `s` (signed) is written `s = r + periods * m` with
/// `r` in `[-periods/2, periods/2)`, giving `xi_r = 2 pi r / (periods X)` and
/// cell mode `m`. The symbols used on the extended grid are the Bloch
/// symbols at `(xi_r, m)`, so direct integration and Bloch-diagonal
/// evolution are the same discretization.
#[derive(Clone, Debug)]
pub struct BlochGrid {
    pub cell_n: usize,
    pub periods: usize,
    pub period: f64,
}

impl BlochGrid {
    pub fn new(cell_n: usize, periods: usize, period: f64) -> Self {
        BlochGrid { cell_n, periods, period }
    }

    pub fn n_ext(&self) -> usize {
        self.cell_n * self.periods
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.cell_n as f64
    }

    pub fn length(&self) -> f64 {
        self.period * self.periods as f64
    }

    pub fn r_of(&self, ir: usize) -> i64 {
        ir as i64 - (self.periods / 2) as i64
    }

    pub fn xi(&self, ir: usize) -> f64 {
        2.0 * PI * self.r_of(ir) as f64 / self.length()
    }

    pub fn xis(&self) -> Vec<f64> {
        (0..self.periods).map(|ir| self.xi(ir)).collect()
    }

    /// Maps an extended DFT index to `(ir, cell mode index)`.
    pub fn decompose(&self, m_ext: usize) -> (usize, usize) {
        let md = self.periods as i64;
        let s = signed_index(m_ext, self.n_ext());
        let r = (s + md / 2).rem_euclid(md) - md / 2;
        let ir = (r + md / 2) as usize;
        let m = ((s - r) / md).rem_euclid(self.cell_n as i64) as usize;
        (ir, m)
    }

    /// Symbols of `d/dx` and `d^2/dx^2` on the extended grid.
    pub fn symbol_tables(&self) -> (Vec<Complex64>, Vec<Complex64>) {
        let per_xi: Vec<_> = (0..self.periods)
            .map(|ir| bloch_symbols(self.cell_n, self.period, self.xi(ir)))
            .collect();
        let n_ext = self.n_ext();
        let mut s1 = Vec::with_capacity(n_ext);
        let mut s2 = Vec::with_capacity(n_ext);
        for me in 0..n_ext {
            let (ir, m) = self.decompose(me);
            s1.push(per_xi[ir].0[m]);
            s2.push(per_xi[ir].1[m]);
        }
        (s1, s2)
    }

    /// Bloch transform of a field given per component on the extended grid.
    /// Returns, for each `ir`, the cell function `g_hat(xi_r, x_j)` stored
    /// component-major (`comp * cell_n + j`), so that
    /// `g(x_j + pX) = (1/periods) sum_r e^{i xi_r (x_j + pX)} g_hat_r(x_j)`.
    pub fn forward(&self, comps: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        let n = self.cell_n;
        let nc = comps.len();
        let mut cells = vec![vec![Complex64::new(0.0, 0.0); n * nc]; self.periods];
        for (c, field) in comps.iter().enumerate() {
            let mut g = field.clone();
            fft(&mut g);
            for (me, z) in g.iter().enumerate() {
                let (ir, m) = self.decompose(me);
                cells[ir][c * n + m] = *z;
            }
        }
        for cell in cells.iter_mut() {
            for c in 0..nc {
                ifft(&mut cell[c * n..(c + 1) * n]);
            }
        }
        cells
    }

    /// Inverse of [`BlochGrid::forward`].
    pub fn inverse(&self, cells: &[Vec<Complex64>], ncomp: usize) -> Vec<Vec<Complex64>> {
        let n = self.cell_n;
        let n_ext = self.n_ext();
        let mut coeffs: Vec<Vec<Complex64>> = cells
            .iter()
            .map(|cell| {
                let mut c = cell.clone();
                for k in 0..ncomp {
                    fft(&mut c[k * n..(k + 1) * n]);
                }
                c
            })
            .collect();
        let mut out = vec![vec![Complex64::new(0.0, 0.0); n_ext]; ncomp];
        for (k, field) in out.iter_mut().enumerate() {
            for (me, z) in field.iter_mut().enumerate() {
                let (ir, m) = self.decompose(me);
                *z = coeffs[ir][k * n + m];
            }
            ifft(field);
        }
        coeffs.clear();
        out
    }

    /// `(1/periods) sum_r ||g_hat_r||^2_{L2(cell)}`, equal to the squared
    /// L2 norm of the original field.
    pub fn bloch_norm_sq(&self, cells: &[Vec<Complex64>]) -> f64 {
        let h = self.spacing();
        cells
            .iter()
            .map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>() * h)
            .sum::<f64>()
            / self.periods as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_trig_is_exact() {
        let n = 32;
        let p = 7.0;
        let k = 2.0 * PI * 3.0 / p;
        let x: Vec<f64> = (0..n).map(|j| j as f64 * p / n as f64).collect();
        let u: Vec<f64> = x.iter().map(|x| (k * x).sin()).collect();
        let du = spectral_derivative(&u, p, 1);
        let d2u = spectral_derivative(&u, p, 2);
        for j in 0..n {
            assert!((du[j] - k * (k * x[j]).cos()).abs() < 1e-12);
            assert!((d2u[j] + k * k * u[j]).abs() < 1e-11);
        }
    }

    #[test]
    fn resample_round_trip() {
        let n = 16;
        let u: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).cos() + 0.3).collect();
        let up = resample(&u, 64);
        let back = resample(&up, 16);
        for j in 0..n {
            assert!((back[j] - u[j]).abs() < 1e-13);
            assert!((up[4 * j] - u[j]).abs() < 1e-13);
        }
    }

    #[test]
    fn interpolant_matches_smooth_function() {
        let n = 32;
        let p = 10.0;
        let f = |x: f64| (2.0 * PI * x / p).sin() + 0.5 * (4.0 * PI * x / p).cos();
        let u: Vec<f64> = (0..n).map(|j| f(j as f64 * p / n as f64)).collect();
        let it = PeriodicInterpolant::new(&[u], p, 8);
        for i in 0..50 {
            let x = -3.0 + 0.37 * i as f64;
            assert!((it.eval(0, x) - f(x)).abs() < 1e-12, "x = {x}: {}", (it.eval(0, x) - f(x)).abs());
        }
    }

    #[test]
    fn decompose_covers_all_pairs_once() {
        let g = BlochGrid::new(8, 6, 2.0);
        let mut seen = vec![false; g.n_ext()];
        for me in 0..g.n_ext() {
            let (ir, m) = g.decompose(me);
            let idx = ir * 8 + m;
            assert!(!seen[idx]);
            seen[idx] = true;
            let s = signed_index(me, g.n_ext());
            let r = g.r_of(ir);
            assert_eq!((s - r).rem_euclid(6), 0);
        }
    }

    #[test]
    fn bloch_transform_is_isometric_and_invertible() {
        let g = BlochGrid::new(16, 8, 3.0);
        let h = g.spacing();
        let field: Vec<Complex64> = (0..g.n_ext())
            .map(|p| {
                let x = p as f64 * h - 12.0;
                Complex64::new((-x * x / 4.0).exp() * (1.0 + 0.2 * x), 0.0)
            })
            .collect();
        let direct: f64 = field.iter().map(|z| z.norm_sqr()).sum::<f64>() * h;
        let cells = g.forward(std::slice::from_ref(&field));
        assert!((g.bloch_norm_sq(&cells) - direct).abs() < 1e-12 * direct);
        let back = g.inverse(&cells, 1);
        for (a, b) in back[0].iter().zip(&field) {
            assert!((a - b).norm() < 1e-13);
        }
        // Reconstruction formula with explicit Floquet factors.
        for p in [0usize, 17, 77] {
            let x = p as f64 * h;
            let j = p % 16;
            let mut s = Complex64::new(0.0, 0.0);
            for (ir, cell) in cells.iter().enumerate() {
                s += Complex64::from_polar(1.0, g.xi(ir) * x) * cell[j];
            }
            s /= 8.0;
            assert!((s - field[p]).norm() < 1e-13);
        }
    }
}
