//! Low/high frequency split of the linearized semigroup `e^{Lt}` on an
//! extended periodic domain of `M_d` periods, the phase kernel `e(x,t;y)`
//! and the remainder `G~^I`.
//!
//! Bloch components live on the discrete quasimomenta
//! `xi_r = 2 pi r / (M_d X)`, so the `xi` quadrature is the trapezoid rule
//! with spacing `2 pi / (M_d X)` and every kernel is the `M_d X`-periodic
//! image of the kernel on the line. With the cell pairing
//! `h sum_j ell(x_j) q(x_j) = 1`, kernels read
//! `K(x,t;y) = (1/M_d) sum_r e^{i xi_r (x-y)} phi(xi_r) e^{mu_r t} a_r(x) ell_r(y)`
//! and act by `(K g)(x) = h sum_p K(x,t;y_p) g(y_p)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bloch::{assemble_bloch, critical_branch, BlochOperator, CriticalPair};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fit::{fit_log_linear, fit_power_law, LinearFit};
use crate::fourier::{fft, ifft, wavenumber, BlochGrid};
use crate::integrate::{to_physical, to_spectral, Scheme, SpectralIntegrator};
use crate::linalg::{self, CMat, Eigen};
use crate::profile::WaveProfile;

type C = Complex64;

/// Eigenbasis condition number above which propagation falls back to the
/// matrix exponential.
pub const EIGEN_COND_LIMIT: f64 = 1e6;

/// Polynomial smoothstep ramp on `[0, 1]` of odd degree 3, 5 or 7.
fn smoothstep(s: f64, degree: u32) -> f64 {
    let s = s.clamp(0.0, 1.0);
    match degree {
        3 => s * s * (3.0 - 2.0 * s),
        5 => s * s * s * (10.0 + s * (-15.0 + 6.0 * s)),
        _ => s.powi(4) * (35.0 + s * (-84.0 + s * (70.0 - 20.0 * s))),
    }
}

fn smoothstep_slope(s: f64, degree: u32) -> f64 {
    if !(0.0..=1.0).contains(&s) {
        return 0.0;
    }
    match degree {
        3 => 6.0 * s * (1.0 - s),
        5 => 30.0 * s * s * (1.0 - s) * (1.0 - s),
        _ => 140.0 * s.powi(3) * (1.0 - s).powi(3),
    }
}

/// Frequency cutoff `phi` (1 on `|xi| <= eps`, 0 on `|xi| >= 2 eps`) and the
/// time ramp `chi` (0 on `t <= 1`, 1 on `t >= 2`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub eps: f64,
    /// Degree of the smoothstep polynomial used for both ramps.
    pub smoothstep_degree: u32,
}

impl CutoffSpec {
    pub fn new(eps: f64) -> Result<Self> {
        Self::with_degree(eps, 5)
    }

    pub fn with_degree(eps: f64, degree: u32) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidInput(format!("cutoff eps must be positive, got {eps}")));
        }
        if ![3, 5, 7].contains(&degree) {
            return Err(Error::InvalidInput(format!("smoothstep degree must be 3, 5 or 7, got {degree}")));
        }
        Ok(CutoffSpec { eps, smoothstep_degree: degree })
    }

    /// `eps = min(pi / (4X), radius / 2)` with `radius` the empirical
    /// analyticity radius of the critical curve.
    pub fn for_profile(period: f64, analyticity_radius: f64) -> Result<Self> {
        Self::new((PI / (4.0 * period)).min(0.5 * analyticity_radius))
    }

    pub fn phi(&self, xi: f64) -> f64 {
        1.0 - smoothstep((xi.abs() - self.eps) / self.eps, self.smoothstep_degree)
    }

    pub fn chi(&self, t: f64) -> f64 {
        smoothstep(t - 1.0, self.smoothstep_degree)
    }

    pub fn dchi(&self, t: f64) -> f64 {
        smoothstep_slope(t - 1.0, self.smoothstep_degree)
    }

    pub fn support(&self) -> f64 {
        2.0 * self.eps
    }
}

/// `e^{L_xi t}` on one Bloch component, by eigendecomposition when the
/// eigenbasis is well conditioned and by scaling and squaring otherwise.
#[derive(Clone, Debug)]
pub struct NodePropagator {
    matrix: CMat,
    eig: Option<Eigen>,
}

impl NodePropagator {
    pub fn new(matrix: CMat) -> Self {
        let eig = linalg::eigen(&matrix).filter(|e| e.cond <= EIGEN_COND_LIMIT);
        NodePropagator { matrix, eig }
    }

    pub fn uses_eigenbasis(&self) -> bool {
        self.eig.is_some()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, t: f64, g: &[C]) -> Vec<C> {
        match &self.eig {
            Some(e) => {
                let mut w = linalg::matvec(&e.inverse, g);
                for (wi, l) in w.iter_mut().zip(&e.values) {
                    *wi *= (l * t).exp();
                }
                linalg::matvec(&e.vectors, &w)
            }
            None => self.apply_expm(t, g),
        }
    }

    pub fn apply_expm(&self, t: f64, g: &[C]) -> Vec<C> {
        let n = self.dim();
        let at = CMat::from_fn(n, n, |i, j| self.matrix[(i, j)] * t);
        linalg::matvec(&linalg::expm(&at), g)
    }
}

/// Applies `e^{L_xi t}` to a component-major cell vector.
pub fn bloch_propagate(op: &BlochOperator, t: f64, g_hat: &[C]) -> Result<Vec<C>> {
    if g_hat.len() != op.matrix.nrows() {
        return Err(Error::DimensionMismatch { expected: op.matrix.nrows(), got: g_hat.len() });
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!("propagation time must be nonnegative, got {t}")));
    }
    Ok(NodePropagator::new(op.matrix.clone()).apply(t, g_hat))
}

/// Kernel pieces reported in the norm tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelPiece {
    #[serde(rename = "GI")]
    GI,
    #[serde(rename = "Gtilde")]
    Gtilde,
    #[serde(rename = "e")]
    E,
    #[serde(rename = "dx_e")]
    DxE,
    #[serde(rename = "dy_e")]
    DyE,
    #[serde(rename = "dt_e")]
    DtE,
    #[serde(rename = "SII")]
    SII,
}

impl KernelPiece {
    pub const ALL: [KernelPiece; 7] = [
        KernelPiece::GI,
        KernelPiece::Gtilde,
        KernelPiece::E,
        KernelPiece::DxE,
        KernelPiece::DyE,
        KernelPiece::DtE,
        KernelPiece::SII,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            KernelPiece::GI => "GI",
            KernelPiece::Gtilde => "Gtilde",
            KernelPiece::E => "e",
            KernelPiece::DxE => "dx_e",
            KernelPiece::DyE => "dy_e",
            KernelPiece::DtE => "dt_e",
            KernelPiece::SII => "SII",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        KernelPiece::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown kernel piece '{s}'")))
    }

    /// Predicted power-law exponent of the `L^p` norm in `x` (`p = 2` or
    /// `p = inf`); `None` for the exponentially damped high-frequency part.
    pub fn predicted_slope(&self, p_inf: bool) -> Option<f64> {
        let base = if p_inf { -0.5 } else { -0.25 };
        match self {
            KernelPiece::E | KernelPiece::DyE | KernelPiece::GI => Some(base),
            KernelPiece::DxE | KernelPiece::DtE | KernelPiece::Gtilde => Some(base - 0.5),
            KernelPiece::SII => None,
        }
    }

    fn is_matrix(&self) -> bool {
        matches!(self, KernelPiece::GI | KernelPiece::Gtilde)
    }
}

/// Kernel sampled over the extended grid: `entries[k][p]` with `k` the
/// component (`n` entries for the row kernels, `n * n` row-major for the
/// matrix kernels).
#[derive(Clone, Debug)]
pub struct KernelField {
    pub entries: Vec<Vec<f64>>,
    /// Largest imaginary part discarded, relative to the largest entry.
    pub imag_rel: f64,
}

impl KernelField {
    fn pointwise_norm(&self, p: usize) -> f64 {
        self.entries.iter().map(|e| e[p] * e[p]).sum::<f64>().sqrt()
    }

    pub fn norm_l2(&self, h: f64) -> f64 {
        let np = self.entries.first().map_or(0, |e| e.len());
        ((0..np).map(|p| self.pointwise_norm(p).powi(2)).sum::<f64>() * h).sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        let np = self.entries.first().map_or(0, |e| e.len());
        (0..np).map(|p| self.pointwise_norm(p)).fold(0.0, f64::max)
    }
}

/// Split propagator on the extended domain: per-`xi_r` propagators and the
/// critical eigenpairs on `supp phi`.
#[derive(Clone, Debug)]
pub struct Semigroup {
    profile: WaveProfile,
    grid: BlochGrid,
    cutoff: CutoffSpec,
    nodes: Vec<NodePropagator>,
    critical: Vec<Option<CriticalPair>>,
    /// `d/dy` of `ell_r` on the cell, for the `dy_e` kernel.
    dell: Vec<Option<Vec<C>>>,
}

fn cell_derivative(v: &[C], ncomp: usize, period: f64) -> Vec<C> {
    let n = v.len() / ncomp;
    let mut out = v.to_vec();
    for c in 0..ncomp {
        let s = &mut out[c * n..(c + 1) * n];
        fft(s);
        for (m, z) in s.iter_mut().enumerate() {
            *z *= if 2 * m == n { C::new(0.0, 0.0) } else { C::new(0.0, wavenumber(m, n, period)) };
        }
        ifft(s);
    }
    out
}

impl Semigroup {
    pub fn new(profile: &WaveProfile, periods: usize, cutoff: CutoffSpec, exec: Exec) -> Result<Self> {
        if periods < 4 || periods % 2 != 0 {
            return Err(Error::InvalidInput(format!("domain periods must be even and >= 4, got {periods}")));
        }
        if cutoff.support() > PI / profile.period {
            return Err(Error::InvalidInput(format!(
                "cutoff support 2 eps = {} exceeds the Brillouin zone pi/X = {}",
                cutoff.support(),
                PI / profile.period
            )));
        }
        let grid = BlochGrid::new(profile.grid_n, periods, profile.period);
        let xis = grid.xis();
        let nodes: Vec<Result<NodePropagator>> =
            exec.map(&xis, |&xi| Ok(NodePropagator::new(assemble_bloch(profile, xi)?.matrix)));
        let nodes = nodes.into_iter().collect::<Result<Vec<_>>>()?;
        let support: Vec<f64> = xis.iter().copied().filter(|x| cutoff.phi(*x) > 0.0).collect();
        let pairs = critical_branch(profile, &support, exec)?;
        let mut critical: Vec<Option<CriticalPair>> = vec![None; periods];
        let mut dell: Vec<Option<Vec<C>>> = vec![None; periods];
        let mut it = pairs.into_iter();
        for (ir, xi) in xis.iter().enumerate() {
            if cutoff.phi(*xi) > 0.0 {
                let pair = it.next().expect("pair per supported node");
                dell[ir] = Some(cell_derivative(&pair.ell, profile.n(), profile.period));
                critical[ir] = Some(pair);
            }
        }
        Ok(Semigroup { profile: profile.clone(), grid, cutoff, nodes, critical, dell })
    }

    pub fn profile(&self) -> &WaveProfile {
        &self.profile
    }

    pub fn grid(&self) -> &BlochGrid {
        &self.grid
    }

    pub fn cutoff(&self) -> &CutoffSpec {
        &self.cutoff
    }

    /// Same profile and cutoff on twice as many periods (twice the `xi`
    /// nodes).
    pub fn refined(&self, exec: Exec) -> Result<Semigroup> {
        Semigroup::new(&self.profile, 2 * self.grid.periods, self.cutoff, exec)
    }

    /// Critical eigenvalue at node `ir`, if inside `supp phi`.
    pub fn critical(&self, ir: usize) -> Option<&CriticalPair> {
        self.critical[ir].as_ref()
    }

    pub fn fallback_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| !n.uses_eigenbasis()).count()
    }

    fn check_field(&self, g: &[Vec<f64>]) -> Result<()> {
        let n = self.profile.n();
        if g.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: g.len() });
        }
        for c in g {
            if c.len() != self.grid.n_ext() {
                return Err(Error::DimensionMismatch { expected: self.grid.n_ext(), got: c.len() });
            }
        }
        Ok(())
    }

    pub fn transform(&self, g: &[Vec<f64>]) -> Result<Vec<Vec<C>>> {
        self.check_field(g)?;
        let comps: Vec<Vec<C>> = g.iter().map(|c| c.iter().map(|&x| C::new(x, 0.0)).collect()).collect();
        Ok(self.grid.forward(&comps))
    }

    /// Inverse transform, returning the real part and the largest discarded
    /// imaginary part relative to the largest real value.
    pub fn inverse_real(&self, cells: &[Vec<C>]) -> (Vec<Vec<f64>>, f64) {
        let z = self.grid.inverse(cells, self.profile.n());
        let re_max = z.iter().flatten().map(|v| v.re.abs()).fold(0.0, f64::max);
        let im_max = z.iter().flatten().map(|v| v.im.abs()).fold(0.0, f64::max);
        let rel = if re_max > 0.0 { im_max / re_max } else { im_max };
        (z.into_iter().map(|c| c.into_iter().map(|v| v.re).collect()).collect(), rel)
    }

    /// `phi e^{mu t} P` applied per node.
    fn low_cells(&self, cells: &[Vec<C>], t: f64) -> Vec<Vec<C>> {
        let h = self.grid.spacing();
        cells
            .iter()
            .enumerate()
            .map(|(ir, cell)| match &self.critical[ir] {
                Some(pair) => {
                    let w = (pair.mu * t).exp() * self.cutoff.phi(self.grid.xi(ir));
                    pair.project(cell, h).into_iter().map(|z| z * w).collect()
                }
                None => vec![C::new(0.0, 0.0); cell.len()],
            })
            .collect()
    }

    fn full_cells(&self, cells: &[Vec<C>], t: f64) -> Vec<Vec<C>> {
        cells.iter().zip(&self.nodes).map(|(c, node)| node.apply(t, c)).collect()
    }

    /// `S^I(t) g` and `S^II(t) g`.
    pub fn apply_split(&self, g: &[Vec<f64>], t: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let cells = self.transform(g)?;
        let full = self.full_cells(&cells, t);
        let low = self.low_cells(&full, 0.0);
        let high: Vec<Vec<C>> = full
            .iter()
            .zip(&low)
            .map(|(f, l)| f.iter().zip(l).map(|(a, b)| a - b).collect())
            .collect();
        Ok((self.inverse_real(&low).0, self.inverse_real(&high).0))
    }

    pub fn apply_low_freq(&self, g: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
        let cells = self.transform(g)?;
        Ok(self.inverse_real(&self.low_cells(&cells, t)).0)
    }

    /// `S^II(t) g`: transform, `(1 - phi P) e^{L_xi t}` per node, inverse.
    pub fn apply_high_freq(&self, g: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
        Ok(self.apply_split(g, t)?.1)
    }

    pub fn apply_full(&self, g: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
        let cells = self.transform(g)?;
        Ok(self.inverse_real(&self.full_cells(&cells, t)).0)
    }

    /// `sum_r c_r(x_j) e^{i xi_r x_p}` over the extended grid (`p = j + s N`),
    /// for `c_r` given per cell point; the caller's per-node factors already
    /// contain `1/M_d`.
    fn floquet_sum(&self, coeff: &dyn Fn(usize, usize) -> C) -> Vec<C> {
        let n = self.grid.cell_n;
        let md = self.grid.periods;
        let h = self.grid.spacing();
        let mut out = vec![C::new(0.0, 0.0); self.grid.n_ext()];
        let active: Vec<usize> = (0..md).filter(|&ir| self.critical[ir].is_some()).collect();
        let mut b = vec![C::new(0.0, 0.0); md];
        for j in 0..n {
            b.iter_mut().for_each(|z| *z = C::new(0.0, 0.0));
            let xj = j as f64 * h;
            for &ir in &active {
                let r = self.grid.r_of(ir);
                b[r.rem_euclid(md as i64) as usize] = coeff(ir, j) * C::from_polar(1.0, self.grid.xi(ir) * xj);
            }
            ifft(&mut b);
            for (s, z) in b.iter().enumerate() {
                out[j + s * n] = z * md as f64;
            }
        }
        out
    }

    fn grid_index(&self, y: f64) -> Result<usize> {
        let h = self.grid.spacing();
        let k = (y / h).round();
        if (y - k * h).abs() > 1e-9 * h {
            return Err(Error::InvalidInput(format!("source point y = {y} is not a grid point (h = {h})")));
        }
        Ok((k as i64).rem_euclid(self.grid.n_ext() as i64) as usize)
    }

    /// Per-node weight `phi e^{mu t} e^{-i xi y} / M_d` times the piece's
    /// `xi`/`t` factor.
    fn node_weight(&self, ir: usize, t: f64, y: f64, piece: KernelPiece) -> C {
        let pair = self.critical[ir].as_ref().expect("supported node");
        let xi = self.grid.xi(ir);
        let base = (pair.mu * t).exp() * C::from_polar(1.0, -xi * y) * (self.cutoff.phi(xi) / self.grid.periods as f64);
        match piece {
            KernelPiece::DxE => base * C::new(0.0, xi),
            KernelPiece::DtE => base * pair.mu,
            _ => base,
        }
    }

    /// `ell_r(y)` or `d/dy (e^{-i xi y} ell_r(y)) e^{i xi y}` for component `b`.
    fn source_factor(&self, ir: usize, jy: usize, b: usize, piece: KernelPiece) -> C {
        let n = self.grid.cell_n;
        let pair = self.critical[ir].as_ref().expect("supported node");
        let ell = pair.ell[b * n + jy];
        if piece == KernelPiece::DyE {
            let d = self.dell[ir].as_ref().expect("supported node")[b * n + jy];
            d - C::new(0.0, self.grid.xi(ir)) * ell
        } else {
            ell
        }
    }

    /// Kernel piece at time `t` for the source point `y` (a grid point).
    /// Row kernels (`e`, `dx_e`, `dy_e`, `dt_e`) include the `chi(t)` ramp,
    /// and `dt_e` includes `chi'(t) e~`.
    pub fn kernel(&self, piece: KernelPiece, t: f64, y: f64) -> Result<KernelField> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!("kernel time must be nonnegative, got {t}")));
        }
        if piece == KernelPiece::SII {
            return self.high_freq_kernel(t, y);
        }
        let p0 = self.grid_index(y)?;
        let y = p0 as f64 * self.grid.spacing();
        let jy = p0 % self.grid.cell_n;
        let n = self.profile.n();
        let cn = self.grid.cell_n;
        let md = self.grid.periods;
        let weights: Vec<C> = (0..md)
            .map(|ir| if self.critical[ir].is_some() { self.node_weight(ir, t, y, piece) } else { C::new(0.0, 0.0) })
            .collect();
        let mut entries = Vec::new();
        let mut im_max: f64 = 0.0;
        let mut re_max: f64 = 0.0;
        let mut push = |z: Vec<C>, scale: f64| {
            im_max = im_max.max(z.iter().map(|v| v.im.abs() * scale.abs()).fold(0.0, f64::max));
            let re: Vec<f64> = z.iter().map(|v| v.re * scale).collect();
            re_max = re_max.max(re.iter().map(|v| v.abs()).fold(0.0, f64::max));
            entries.push(re);
        };
        if piece.is_matrix() {
            let ud = self.profile.derivative_components();
            for a in 0..n {
                for b in 0..n {
                    let z = self.floquet_sum(&|ir, j| {
                        let pair = self.critical[ir].as_ref().expect("supported node");
                        let mut qx = pair.q[a * cn + j];
                        if piece == KernelPiece::Gtilde {
                            qx -= ud[a][j];
                        }
                        weights[ir] * qx * self.source_factor(ir, jy, b, piece)
                    });
                    push(z, 1.0);
                }
            }
        } else {
            let chi = self.cutoff.chi(t);
            let dchi = self.cutoff.dchi(t);
            for b in 0..n {
                let z = self.floquet_sum(&|ir, _| weights[ir] * self.source_factor(ir, jy, b, piece));
                if piece == KernelPiece::DtE && dchi != 0.0 {
                    let e = self.floquet_sum(&|ir, _| {
                        self.node_weight(ir, t, y, KernelPiece::E) * self.source_factor(ir, jy, b, KernelPiece::E)
                    });
                    let z: Vec<C> = z.iter().zip(&e).map(|(a, e)| a * chi + e * dchi).collect();
                    push(z, 1.0);
                } else {
                    push(z, chi);
                }
            }
        }
        let imag_rel = if re_max > 0.0 { im_max / re_max } else { im_max };
        Ok(KernelField { entries, imag_rel })
    }

    /// Narrow Gaussian of width two grid cells centred at grid point `y`,
    /// normalized to unit mass, in component `comp`.
    pub fn mollified_delta(&self, y: f64, comp: usize) -> Result<Vec<Vec<f64>>> {
        let p0 = self.grid_index(y)?;
        let h = self.grid.spacing();
        let w = 2.0 * h;
        let ne = self.grid.n_ext();
        let length = self.grid.length();
        let y = p0 as f64 * h;
        let mut g = vec![vec![0.0; ne]; self.profile.n()];
        for (p, v) in g[comp].iter_mut().enumerate() {
            let mut d = p as f64 * h - y;
            d -= length * (d / length).round();
            *v = (-0.5 * (d / w).powi(2)).exp() / (w * (2.0 * PI).sqrt());
        }
        Ok(g)
    }

    /// `S^II(t)` applied to the mollified delta in each component; reported
    /// in the same layout as the matrix kernels.
    fn high_freq_kernel(&self, t: f64, y: f64) -> Result<KernelField> {
        let n = self.profile.n();
        let mut cols = Vec::with_capacity(n);
        for b in 0..n {
            cols.push(self.apply_high_freq(&self.mollified_delta(y, b)?, t)?);
        }
        let mut entries = Vec::with_capacity(n * n);
        for a in 0..n {
            for col in &cols {
                entries.push(col[a].clone());
            }
        }
        Ok(KernelField { entries, imag_rel: 0.0 })
    }

    /// `psi_lin(x,t) = -int e(x,t;y) v0(y) dy`, with `psi_x` and `psi_t`.
    pub fn linear_phase(&self, v0: &[Vec<f64>], t: f64) -> Result<[Vec<f64>; 3]> {
        let cells = self.transform(v0)?;
        let h = self.grid.spacing();
        let md = self.grid.periods;
        let chi = self.cutoff.chi(t);
        let dchi = self.cutoff.dchi(t);
        let ne = self.grid.n_ext();
        let mut spec = [vec![C::new(0.0, 0.0); ne], vec![C::new(0.0, 0.0); ne], vec![C::new(0.0, 0.0); ne]];
        for ir in 0..md {
            let Some(pair) = &self.critical[ir] else { continue };
            let xi = self.grid.xi(ir);
            let a: C = pair.ell.iter().zip(&cells[ir]).map(|(l, g)| l * g).sum::<C>() * h;
            let base = -(pair.mu * t).exp() * self.cutoff.phi(xi) * a / md as f64;
            let r = self.grid.r_of(ir);
            let idx = r.rem_euclid(ne as i64) as usize;
            spec[0][idx] = base * chi;
            spec[1][idx] = base * chi * C::new(0.0, xi);
            spec[2][idx] = base * (pair.mu * chi + dchi);
        }
        Ok(spec.map(|mut s| {
            ifft(&mut s);
            s.iter().map(|z| z.re * ne as f64).collect()
        }))
    }
}

/// Norms of one piece at one time, as a supremum over the sampled `y`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KernelNormRow {
    pub t: f64,
    pub piece: KernelPiece,
    pub norm_l2: f64,
    pub norm_linf: f64,
}

#[derive(Clone, Debug)]
pub struct KernelDecomposition {
    pub t_grid: Vec<f64>,
    pub y_ref: Vec<f64>,
    /// `e(x,t;y_ref[0])` per time, per component.
    pub e_kernel: Vec<Vec<Vec<f64>>>,
    /// `G~^I(x,t;y_ref[0])` per time, entries row-major.
    pub g_tilde: Vec<Vec<Vec<f64>>>,
    pub norms: Vec<KernelNormRow>,
    pub cutoff: CutoffSpec,
    /// Largest relative change of any kernel under doubling the `xi` nodes.
    pub quadrature_change: f64,
    /// Largest discarded imaginary part, relative.
    pub max_imag: f64,
}

/// Relative sup-difference of kernels computed on `M_d` and `2 M_d`
/// periods, compared on the coarse domain centred at the source.
fn quadrature_change(a: &KernelField, b: &KernelField, p0: usize, ne: usize) -> f64 {
    let scale = a.norm_linf();
    let mut worst: f64 = 0.0;
    for (ea, eb) in a.entries.iter().zip(&b.entries) {
        for (p, va) in ea.iter().enumerate() {
            // Offset from the source in (-ne/2, ne/2].
            let d = (p as i64 - p0 as i64).rem_euclid(ne as i64);
            let d = if d > ne as i64 / 2 { d - ne as i64 } else { d };
            let q = (p0 as i64 + d).rem_euclid(2 * ne as i64) as usize;
            worst = worst.max((va - eb[q]).abs());
        }
    }
    if scale > 0.0 {
        worst / scale
    } else {
        worst
    }
}

/// Norm tables for all pieces over `t_grid`, with the supremum over
/// `y_per_period` source points in the central period, and the
/// quadrature doubling check at `y_ref[0]`.
pub fn decompose_kernels(
    sg: &Semigroup,
    t_grid: &[f64],
    y_per_period: usize,
    exec: Exec,
) -> Result<KernelDecomposition> {
    if y_per_period == 0 || sg.grid.cell_n % y_per_period != 0 {
        return Err(Error::InvalidInput(format!(
            "y samples per period ({y_per_period}) must divide the cell resolution {}",
            sg.grid.cell_n
        )));
    }
    let h = sg.grid.spacing();
    let p_center = (sg.grid.periods / 2) * sg.grid.cell_n;
    let stride = sg.grid.cell_n / y_per_period;
    let y_ref: Vec<f64> = (0..y_per_period).map(|k| (p_center + k * stride) as f64 * h).collect();
    let refined = sg.refined(exec)?;
    let ne = sg.grid.n_ext();

    struct PerTime {
        rows: Vec<KernelNormRow>,
        e: Vec<Vec<f64>>,
        gt: Vec<Vec<f64>>,
        change: f64,
        imag: f64,
    }
    let results: Vec<Result<PerTime>> = exec.map(t_grid, |&t| {
        let mut rows = Vec::new();
        let mut e0 = Vec::new();
        let mut gt0 = Vec::new();
        let mut change: f64 = 0.0;
        let mut imag: f64 = 0.0;
        for piece in KernelPiece::ALL {
            let (mut l2, mut linf) = (0.0f64, 0.0f64);
            for (k, &y) in y_ref.iter().enumerate() {
                let kf = sg.kernel(piece, t, y)?;
                l2 = l2.max(kf.norm_l2(h));
                linf = linf.max(kf.norm_linf());
                imag = imag.max(kf.imag_rel);
                if k == 0 {
                    if piece != KernelPiece::SII {
                        let kr = refined.kernel(piece, t, y)?;
                        change = change.max(quadrature_change(&kf, &kr, sg.grid_index(y)?, ne));
                    }
                    match piece {
                        KernelPiece::E => e0 = kf.entries.clone(),
                        KernelPiece::Gtilde => gt0 = kf.entries.clone(),
                        _ => {}
                    }
                }
            }
            rows.push(KernelNormRow { t, piece, norm_l2: l2, norm_linf: linf });
        }
        Ok(PerTime { rows, e: e0, gt: gt0, change, imag })
    });
    let mut out = KernelDecomposition {
        t_grid: t_grid.to_vec(),
        y_ref,
        e_kernel: Vec::new(),
        g_tilde: Vec::new(),
        norms: Vec::new(),
        cutoff: sg.cutoff,
        quadrature_change: 0.0,
        max_imag: 0.0,
    };
    for r in results {
        let r = r?;
        out.norms.extend(r.rows);
        out.e_kernel.push(r.e);
        out.g_tilde.push(r.gt);
        out.quadrature_change = out.quadrature_change.max(r.change);
        out.max_imag = out.max_imag.max(r.imag);
    }
    if out.quadrature_change > 1e-5 {
        return Err(Error::QuadratureResolution { rel_change: out.quadrature_change });
    }
    Ok(out)
}

impl KernelDecomposition {
    /// `(t, L2, Linf)` series of one piece.
    pub fn series(&self, piece: KernelPiece) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let rows: Vec<&KernelNormRow> = self.norms.iter().filter(|r| r.piece == piece).collect();
        (
            rows.iter().map(|r| r.t).collect(),
            rows.iter().map(|r| r.norm_l2).collect(),
            rows.iter().map(|r| r.norm_linf).collect(),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelFit {
    pub piece: KernelPiece,
    /// `"L2"` or `"Linf"`.
    pub norm: String,
    pub window: (f64, f64),
    pub slope: f64,
    pub stderr: f64,
    pub predicted_slope: Option<f64>,
}

/// Power-law fits of every piece with a predicted exponent (and log-linear
/// fits of `SII`, whose slope is then a rate in `t`).
pub fn fit_kernel_norms(decomp: &KernelDecomposition, window: (f64, f64)) -> Result<Vec<KernelFit>> {
    let mut out = Vec::new();
    for piece in KernelPiece::ALL {
        let (t, l2, linf) = decomp.series(piece);
        for (name, values, p_inf) in [("L2", &l2, false), ("Linf", &linf, true)] {
            let fit: LinearFit = if piece == KernelPiece::SII {
                fit_log_linear(&t, values, window)?
            } else {
                fit_power_law(&t, values, window)?
            };
            out.push(KernelFit {
                piece,
                norm: name.to_string(),
                window,
                slope: fit.slope,
                stderr: fit.stderr,
                predicted_slope: piece.predicted_slope(p_inf),
            });
        }
    }
    Ok(out)
}

/// `(u'(x) e + G~^I) * g + S^II g` against `e^{Lt} g` for the mollified
/// delta at `y` in component `comp`; relative `L2` error.
pub fn reconstruction_error(sg: &Semigroup, t: f64, y: f64, comp: usize) -> Result<f64> {
    let g = sg.mollified_delta(y, comp)?;
    let h = sg.grid.spacing();
    let n = sg.profile.n();
    let ne = sg.grid.n_ext();
    let cn = sg.grid.cell_n;
    let ud = sg.profile.derivative_components();
    let mut sum = vec![vec![0.0; ne]; n];
    for (p, &w) in g[comp].iter().enumerate() {
        if w < 1e-16 * g[comp].iter().fold(0.0f64, |a, b| a.max(*b)) {
            continue;
        }
        let yp = p as f64 * h;
        let e = sg.kernel(KernelPiece::E, t, yp)?;
        let gt = sg.kernel(KernelPiece::Gtilde, t, yp)?;
        for a in 0..n {
            for q in 0..ne {
                let v = ud[a][q % cn] * e.entries[comp][q] + gt.entries[a * n + comp][q];
                sum[a][q] += h * w * v;
            }
        }
    }
    let high = sg.apply_high_freq(&g, t)?;
    let full = sg.apply_full(&g, t)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..n {
        for q in 0..ne {
            num += (sum[a][q] + high[a][q] - full[a][q]).powi(2);
            den += full[a][q].powi(2);
        }
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub times: Vec<f64>,
    /// Relative `L2` discrepancy at each time.
    pub discrepancy: Vec<f64>,
    pub max_discrepancy: f64,
    /// `| ||g||^2 - (1/M_d) sum_r ||g_r||^2 | / ||g||^2`.
    pub isometry_error: f64,
    pub dt: f64,
}

/// Direct ETDRK4 integration of `v_t = v_xx + c v_x + df(u) v` on the
/// extended grid, with the same Fourier symbols as the Bloch operators.
pub fn direct_linear_evolution(sg: &Semigroup, g: &[Vec<f64>], times: &[f64], dt: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    sg.check_field(g)?;
    let profile = &sg.profile;
    let n = profile.n();
    let cn = sg.grid.cell_n;
    let (s1, s2) = sg.grid.symbol_tables();
    let lin: Vec<C> = s1.iter().zip(&s2).map(|(a, b)| b + a * profile.c).collect();
    let mut jac = vec![0.0; n * n * cn];
    for j in 0..cn {
        profile.sys.jacobian_into(profile.value(j), &mut jac[j * n * n..(j + 1) * n * n]);
    }
    let nl = move |u: &[Vec<f64>], out: &mut [Vec<f64>]| {
        let ne = u[0].len();
        for p in 0..ne {
            let d = &jac[(p % cn) * n * n..(p % cn + 1) * n * n];
            for a in 0..n {
                out[a][p] = (0..n).map(|b| d[a * n + b] * u[b][p]).sum();
            }
        }
    };
    let mut integ = SpectralIntegrator::new(Scheme::EtdRk4, lin, n, dt)?;
    let mut state = to_spectral(g);
    let mut out = Vec::with_capacity(times.len());
    let mut steps_done = 0u64;
    let mut sorted: Vec<(usize, f64)> = times.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut slots: Vec<Option<Vec<Vec<f64>>>> = vec![None; times.len()];
    for (i, t) in sorted {
        let target = (t / dt).round() as u64;
        if ((target as f64) * dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::InvalidInput(format!("time {t} is not a multiple of dt = {dt}")));
        }
        while steps_done < target {
            integ.step(&mut state, &nl);
            steps_done += 1;
        }
        slots[i] = Some(to_physical(&state));
    }
    for s in slots {
        out.push(s.expect("every time filled"));
    }
    Ok(out)
}

fn l2_sq(f: &[Vec<f64>], h: f64) -> f64 {
    f.iter().flatten().map(|v| v * v).sum::<f64>() * h
}

/// Compares `S^I(t) g + S^II(t) g` with direct integration at `times`.
pub fn linear_consistency_check(sg: &Semigroup, g: &[Vec<f64>], times: &[f64], dt: f64) -> Result<ConsistencyReport> {
    let h = sg.grid.spacing();
    let cells = sg.transform(g)?;
    let gn = l2_sq(g, h);
    let isometry_error = (sg.grid.bloch_norm_sq(&cells) - gn).abs() / gn;
    let direct = direct_linear_evolution(sg, g, times, dt)?;
    let mut discrepancy = Vec::with_capacity(times.len());
    for (t, d) in times.iter().zip(&direct) {
        let (low, high) = sg.apply_split(g, *t)?;
        let mut num = 0.0;
        for a in 0..g.len() {
            for p in 0..d[a].len() {
                num += (low[a][p] + high[a][p] - d[a][p]).powi(2);
            }
        }
        discrepancy.push((num * h / l2_sq(d, h)).sqrt());
    }
    let max_discrepancy = discrepancy.iter().copied().fold(0.0, f64::max);
    if max_discrepancy > 1e-4 {
        let k = discrepancy.iter().position(|d| *d == max_discrepancy).unwrap_or(0);
        return Err(Error::Inconsistency { discrepancy: max_discrepancy, t: times[k] });
    }
    Ok(ConsistencyReport { times: times.to_vec(), discrepancy, max_discrepancy, isometry_error, dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lambda_omega;
    use crate::profile::lambda_omega_wavetrain;

    fn small() -> Semigroup {
        let p = lambda_omega_wavetrain(0.0, 1.0, 0.4, 32).unwrap();
        let cut = CutoffSpec::for_profile(p.period, f64::INFINITY).unwrap();
        Semigroup::new(&p, 16, cut, Exec::default()).unwrap()
    }

    fn gaussian(sg: &Semigroup, width: f64, comp: usize) -> Vec<Vec<f64>> {
        let h = sg.grid().spacing();
        let x0 = 0.5 * sg.grid().length();
        let mut g = vec![vec![0.0; sg.grid().n_ext()]; sg.profile().n()];
        for (p, v) in g[comp].iter_mut().enumerate() {
            *v = (-((p as f64 * h - x0) / width).powi(2) / 2.0).exp();
        }
        g
    }

    #[test]
    fn cutoff_ramps() {
        let c = CutoffSpec::new(0.1).unwrap();
        assert_eq!(c.phi(0.05), 1.0);
        assert_eq!(c.phi(-0.1), 1.0);
        assert_eq!(c.phi(0.2), 0.0);
        assert_eq!(c.phi(0.3), 0.0);
        assert!((c.phi(0.15) - 0.5).abs() < 1e-14);
        assert_eq!(c.chi(0.5), 0.0);
        assert_eq!(c.chi(1.0), 0.0);
        assert_eq!(c.chi(2.0), 1.0);
        assert_eq!(c.chi(7.0), 1.0);
        let mut last = 0.0;
        for k in 0..=100 {
            let v = c.chi(1.0 + k as f64 / 100.0);
            assert!(v >= last);
            last = v;
        }
        assert!(CutoffSpec::new(0.0).is_err());
        assert!(CutoffSpec::with_degree(0.1, 4).is_err());
    }

    #[test]
    fn dchi_matches_finite_difference() {
        for deg in [3, 5, 7] {
            let c = CutoffSpec::with_degree(0.1, deg).unwrap();
            for t in [1.2, 1.5, 1.9] {
                let fd = (c.chi(t + 1e-6) - c.chi(t - 1e-6)) / 2e-6;
                assert!((fd - c.dchi(t)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn propagate_identity_and_semigroup_law() {
        let p = lambda_omega_wavetrain(0.5, 1.0, 0.3, 16).unwrap();
        let op = assemble_bloch(&p, 0.05).unwrap();
        let g: Vec<C> = (0..op.matrix.nrows()).map(|i| C::new((i as f64).sin(), 0.2)).collect();
        let id = bloch_propagate(&op, 0.0, &g).unwrap();
        for (a, b) in id.iter().zip(&g) {
            assert!((a - b).norm() < 1e-12);
        }
        let a = bloch_propagate(&op, 0.7, &bloch_propagate(&op, 0.4, &g).unwrap()).unwrap();
        let b = bloch_propagate(&op, 1.1, &g).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-8);
        }
        let node = NodePropagator::new(op.matrix.clone());
        assert!(node.uses_eigenbasis());
        let e = node.apply_expm(1.1, &g);
        for (x, y) in e.iter().zip(&b) {
            assert!((x - y).norm() < 1e-8);
        }
        assert!(bloch_propagate(&op, 1.0, &g[1..]).is_err());
    }

    #[test]
    fn propagate_constant_state_per_mode() {
        let sys = lambda_omega(0.0);
        let p = WaveProfile::constant(sys.clone(), &[0.5, 0.0], 6.0, 0.3, 16).unwrap();
        let df = sys.eval_jacobian(&[0.5, 0.0]).unwrap();
        let op = assemble_bloch(&p, 0.0).unwrap();
        let n = 16;
        let t = 0.8;
        // Single Fourier mode m in component 0.
        let m = 2;
        let k = wavenumber(m, n, 6.0);
        let mut g = vec![C::new(0.0, 0.0); 2 * n];
        for j in 0..n {
            g[j] = C::from_polar(1.0, k * p.x(j));
        }
        let out = bloch_propagate(&op, t, &g).unwrap();
        // Diagonal Jacobian at a real state with gamma = 0.
        let lam0 = C::new(df[0] - k * k, k * p.c);
        for j in 0..n {
            let want = (lam0 * t).exp() * g[j];
            assert!((out[j] - want).norm() < 1e-10);
            assert!(out[n + j].norm() < 1e-10);
        }
    }

    #[test]
    fn bloch_high_and_low_sum_to_full() {
        let sg = small();
        let g = gaussian(&sg, 3.0, 1);
        let (lo, hi) = sg.apply_split(&g, 2.0).unwrap();
        let full = sg.apply_full(&g, 2.0).unwrap();
        for a in 0..2 {
            for p in 0..full[a].len() {
                assert!((lo[a][p] + hi[a][p] - full[a][p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn high_freq_annihilates_phi_range() {
        let sg = small();
        let h = sg.grid().spacing();
        let md = sg.grid().periods;
        let cut = *sg.cutoff();
        // Cells q_r * c_r with c_{-r} = conj(c_r) on |xi| <= eps.
        let mut cells = vec![vec![C::new(0.0, 0.0); 2 * sg.grid().cell_n]; md];
        for (ir, cell) in cells.iter_mut().enumerate() {
            let xi = sg.grid().xi(ir);
            if xi.abs() > cut.eps {
                continue;
            }
            let r = sg.grid().r_of(ir) as f64;
            let c = C::new(1.0 / (1.0 + r * r), 0.3 * r / (1.0 + r * r));
            let q = &sg.critical(ir).unwrap().q;
            *cell = q.iter().map(|z| z * c).collect();
        }
        let (g, _) = sg.inverse_real(&cells);
        let gn = l2_sq(&g, h).sqrt();
        let out = sg.apply_high_freq(&g, 1.5).unwrap();
        assert!(l2_sq(&out, h).sqrt() <= 1e-6 * gn);
    }

    #[test]
    fn phase_kernel_vanishes_before_ramp() {
        let sg = small();
        let y = sg.grid().length() / 2.0;
        for piece in [KernelPiece::E, KernelPiece::DxE, KernelPiece::DyE, KernelPiece::DtE] {
            let k = sg.kernel(piece, 0.5, y).unwrap();
            assert_eq!(k.norm_linf(), 0.0);
        }
        let v0 = gaussian(&sg, 2.0, 0);
        let [psi, psix, psit] = sg.linear_phase(&v0, 0.9).unwrap();
        assert!(psi.iter().chain(&psix).chain(&psit).all(|v| *v == 0.0));
    }

    #[test]
    fn kernels_are_real_and_lattice_symmetric() {
        let sg = small();
        let n_cell = sg.grid().cell_n;
        let ne = sg.grid().n_ext();
        let h = sg.grid().spacing();
        let y = (ne / 2 + 3) as f64 * h;
        for piece in [KernelPiece::GI, KernelPiece::Gtilde, KernelPiece::E, KernelPiece::DyE] {
            let a = sg.kernel(piece, 6.0, y).unwrap();
            let b = sg.kernel(piece, 6.0, y + sg.profile().period).unwrap();
            assert!(a.imag_rel < 1e-10, "{piece:?} imag {}", a.imag_rel);
            let scale = a.norm_linf();
            for (ea, eb) in a.entries.iter().zip(&b.entries) {
                for p in 0..ne {
                    assert!((ea[p] - eb[(p + n_cell) % ne]).abs() < 1e-8 * scale);
                }
            }
        }
    }

    #[test]
    fn kernel_reconstruction_matches_full_propagator() {
        let sg = small();
        let y = (sg.grid().n_ext() / 2) as f64 * sg.grid().spacing();
        for t in [2.5, 8.0] {
            for comp in 0..2 {
                let err = reconstruction_error(&sg, t, y, comp).unwrap();
                assert!(err < 1e-5, "t = {t}, comp = {comp}: {err}");
            }
        }
    }

    #[test]
    fn row_kernel_matches_linear_phase() {
        // psi_lin = -h sum_p e(x,t;y_p) v0(y_p).
        let sg = small();
        let h = sg.grid().spacing();
        let v0 = sg.mollified_delta(sg.grid().length() / 2.0, 1).unwrap();
        let t = 4.0;
        let [psi, psix, _] = sg.linear_phase(&v0, t).unwrap();
        let mut want = vec![0.0; psi.len()];
        let mut want_x = vec![0.0; psi.len()];
        for (p, &w) in v0[1].iter().enumerate() {
            if w < 1e-14 {
                continue;
            }
            let e = sg.kernel(KernelPiece::E, t, p as f64 * h).unwrap();
            let ex = sg.kernel(KernelPiece::DxE, t, p as f64 * h).unwrap();
            for q in 0..psi.len() {
                want[q] -= h * w * e.entries[1][q];
                want_x[q] -= h * w * ex.entries[1][q];
            }
        }
        let scale = want.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for q in 0..psi.len() {
            assert!((psi[q] - want[q]).abs() < 1e-9 * scale);
            assert!((psix[q] - want_x[q]).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn short_time_high_freq_linf_factor_bounded() {
        let sg = small();
        let g = sg.mollified_delta(sg.grid().length() / 2.0, 0).unwrap();
        let h = sg.grid().spacing();
        let gn = l2_sq(&g, h).sqrt();
        let mut worst: f64 = 0.0;
        for k in 0..10 {
            let t = 1e-3 * 2f64.powi(k);
            let s = sg.apply_high_freq(&g, t).unwrap();
            let inf = s.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
            worst = worst.max(inf * t.powf(0.25) / gn);
        }
        assert!(worst.is_finite() && worst < 10.0, "{worst}");
    }

    #[test]
    fn consistency_with_direct_integration() {
        let sg = small();
        let g = gaussian(&sg, 2.0, 0);
        let rep = linear_consistency_check(&sg, &g, &[1.0, 5.0], 0.01).unwrap();
        assert!(rep.isometry_error < 1e-10);
        assert!(rep.max_discrepancy < 1e-5, "{:?}", rep.discrepancy);
    }
}
