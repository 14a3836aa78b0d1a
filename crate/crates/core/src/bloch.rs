//! Bloch operators `L_xi = (d/dx + i xi)^2 + c (d/dx + i xi) + df(u)` on one
//! period, their spectra, the diffusive stability checks (D1)/(D2), and the
//! critical curve through the translation eigenvalue.

use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fourier::{bloch_symbols, circulant_column};
use crate::linalg::{self, CMat};
use crate::profile::WaveProfile;

type C = Complex64;

/// Fourier-collocation matrix of `L_xi`, component-major
/// (`row = comp * grid_n + j`).
#[derive(Clone, Debug)]
pub struct BlochOperator {
    pub xi: f64,
    pub matrix: CMat,
    pub grid_n: usize,
    pub n: usize,
}

pub fn assemble_bloch(profile: &WaveProfile, xi: f64) -> Result<BlochOperator> {
    let edge = PI / profile.period;
    if xi.abs() > edge * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!("|xi| = {} exceeds pi/X = {edge}", xi.abs())));
    }
    Ok(assemble_unchecked(profile, xi))
}

fn assemble_unchecked(profile: &WaveProfile, xi: f64) -> BlochOperator {
    let g = profile.grid_n;
    let n = profile.n();
    let (s1, s2) = bloch_symbols(g, profile.period, xi);
    let sigma: Vec<C> = s1.iter().zip(&s2).map(|(a, b)| b + a * profile.c).collect();
    let col = circulant_column(&sigma);
    let mut m = Mat::<C>::zeros(g * n, g * n);
    for c in 0..n {
        for j in 0..g {
            for l in 0..g {
                m[(c * g + j, c * g + l)] = col[(j + g - l) % g];
            }
        }
    }
    let mut df = vec![0.0; n * n];
    for j in 0..g {
        profile.sys.jacobian_into(profile.value(j), &mut df);
        for r in 0..n {
            for c in 0..n {
                m[(r * g + j, c * g + j)] += C::new(df[r * n + c], 0.0);
            }
        }
    }
    BlochOperator { xi, matrix: m, grid_n: g, n }
}

/// Discrete `L2` inner product on one period, conjugate-linear in `a`.
pub fn inner(a: &[C], b: &[C], h: f64) -> C {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<C>() * h
}

fn overlap(a: &[C], b: &[C]) -> f64 {
    let na = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let nb = b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    inner(a, b, 1.0).norm() / (na * nb)
}

fn column(m: &CMat, j: usize) -> Vec<C> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

/// Right/left eigenpair of the critical curve. `q` is normalized by
/// `<u', q> = <u', u'>` and `ell` is the dual row with the bilinear pairing
/// `h sum ell q = 1`; the left eigenfunction in the sesquilinear convention
/// is `qtilde = conj(ell)`.
#[derive(Clone, Debug)]
pub struct CriticalPair {
    pub xi: f64,
    pub mu: C,
    pub q: Vec<C>,
    pub ell: Vec<C>,
    /// Distance from `mu` to the nearest other eigenvalue.
    pub separation: f64,
}

impl CriticalPair {
    pub fn qtilde(&self) -> Vec<C> {
        self.ell.iter().map(|z| z.conj()).collect()
    }

    /// `P g = q * (h sum ell g)`.
    pub fn project(&self, g: &[C], h: f64) -> Vec<C> {
        let a: C = self.ell.iter().zip(g).map(|(l, v)| l * v).sum::<C>() * h;
        self.q.iter().map(|q| q * a).collect()
    }
}

struct NodeEigen {
    xi: f64,
    values: Vec<C>,
    vectors: CMat,
}

fn node_eigen(profile: &WaveProfile, xi: f64) -> Option<NodeEigen> {
    let op = assemble_unchecked(profile, xi);
    let ev = linalg::eigen_vectors(&op.matrix)?;
    Some(NodeEigen { xi, values: ev.0, vectors: ev.1 })
}

/// Picks the critical eigenpair at a node given the reference vector
/// (`u'` at `xi = 0`, the previous `q` otherwise) and normalizes it.
fn critical_at(profile: &WaveProfile, node: &NodeEigen, reference: &[C], udash: &[C]) -> Result<(CriticalPair, f64)> {
    let m = node.values.len();
    let (best, ov) = (0..m)
        .map(|j| (j, overlap(reference, &column(&node.vectors, j))))
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
    let mu = node.values[best];
    let separation = (0..m)
        .filter(|&j| j != best)
        .map(|j| (node.values[j] - mu).norm())
        .fold(f64::INFINITY, f64::min);
    if separation < 1e-8 {
        return Err(Error::NearDegeneracy { xi: node.xi, gap: separation });
    }
    let h = profile.spacing();
    let v = column(&node.vectors, best);
    let alpha = inner(udash, udash, h) / inner(udash, &v, h);
    let q: Vec<C> = v.iter().map(|z| z * alpha).collect();
    // Dual row: solve V^T y = e_best.
    let vt = node.vectors.transpose().to_owned();
    let mut e = vec![C::new(0.0, 0.0); m];
    e[best] = C::new(1.0, 0.0);
    let row = linalg::solve_complex(&vt, &e).ok_or(Error::Eigensolver { xi: node.xi })?;
    let ell: Vec<C> = row.iter().map(|z| z / (alpha * h)).collect();
    Ok((CriticalPair { xi: node.xi, mu, q, ell, separation }, ov))
}

/// Path from 0 to each requested `xi` with steps no larger than `max_step`.
fn branch_nodes(xis: &[f64], max_step: f64) -> Vec<f64> {
    let mut pos: Vec<f64> = xis.iter().copied().filter(|x| *x > 0.0).collect();
    let mut neg: Vec<f64> = xis.iter().map(|x| -x).filter(|x| *x > 0.0).collect();
    let fill = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        let mut out = Vec::new();
        let mut last = 0.0;
        for &x in v.iter() {
            let k = ((x - last) / max_step).ceil().max(1.0) as usize;
            for i in 1..k {
                out.push(last + (x - last) * i as f64 / k as f64);
            }
            out.push(x);
            last = x;
        }
        out
    };
    let p = fill(&mut pos);
    let ng = fill(&mut neg);
    let mut all = vec![0.0];
    all.extend(p);
    all.extend(ng.iter().map(|x| -x));
    all
}

/// Critical eigenpairs at the requested `xi`, continued from `q(0) = u'` by
/// maximal eigenvector overlap.
pub fn critical_branch(profile: &WaveProfile, xis: &[f64], exec: Exec) -> Result<Vec<CriticalPair>> {
    let max_step = PI / (32.0 * profile.period);
    let nodes = branch_nodes(xis, max_step);
    let eig: Vec<Option<NodeEigen>> = exec.map(&nodes, |&xi| node_eigen(profile, xi));
    let udash = profile.translation_mode();
    let mut pairs: Vec<Option<CriticalPair>> = (0..nodes.len()).map(|_| None).collect();
    let node_at = |k: usize| eig[k].as_ref().ok_or(Error::Eigensolver { xi: nodes[k] });
    let (c0, _) = critical_at(profile, node_at(0)?, &udash, &udash)?;
    pairs[0] = Some(c0.clone());
    // Positive nodes come right after 0, then the negative ones.
    let npos = nodes.iter().filter(|x| **x > 0.0).count();
    for range in [1..1 + npos, 1 + npos..nodes.len()] {
        let mut prev = c0.q.clone();
        for k in range {
            let (c, _) = critical_at(profile, node_at(k)?, &prev, &udash)?;
            prev = c.q.clone();
            pairs[k] = Some(c);
        }
    }
    xis.iter()
        .map(|x| {
            let k = nodes
                .iter()
                .position(|y| y == x)
                .expect("requested node on path");
            Ok(pairs[k].clone().expect("critical pair computed"))
        })
        .collect()
}

/// Critical eigenpair at a single `xi`.
pub fn spectral_projection(profile: &WaveProfile, xi: f64) -> Result<CriticalPair> {
    Ok(critical_branch(profile, &[xi], Exec::Sequential)?.remove(0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Discontinuity {
    pub xi: f64,
    pub curve: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug)]
pub struct BlochSpectrum {
    pub profile: WaveProfile,
    /// Ascending, contains 0.
    pub xi_grid: Vec<f64>,
    /// All eigenvalues at each node.
    pub eigenvalues: Vec<Vec<C>>,
    /// `tracked[j][k]`: index into `eigenvalues[k]` of tracked curve `j`;
    /// curve 0 is the critical curve.
    pub tracked: Vec<Vec<usize>>,
    /// Critical eigenpairs along curve 0. The branch is continued outward
    /// from 0 and stops (`None` from there on) at the first node where the
    /// critical eigenvalue is not simple, typically the zone edge where the
    /// curve meets its mirror image.
    pub critical: Vec<Option<CriticalPair>>,
    pub discontinuities: Vec<Discontinuity>,
    /// Nodes where the eigensolver failed (excluded from the grid).
    pub excluded: Vec<f64>,
    pub zero_index: usize,
    /// Largest `xi` up to which consecutive critical eigenvectors keep
    /// overlap above 0.9.
    pub analyticity_radius: f64,
    /// Upper bound on `Re` of the spectrum not represented by the matrix.
    pub tail_bound: f64,
}

impl BlochSpectrum {
    pub fn tracked_value(&self, curve: usize, k: usize) -> C {
        self.eigenvalues[k][self.tracked[curve][k]]
    }
}

/// Uniform grid of `xi_count` points on `[-pi/X, pi/X]` plus `0` and a
/// geometric refinement `+-(pi/X) 10^(-e)`, `e = 4, 3.5, ...`, down to the
/// uniform spacing.
pub fn sweep_grid(period: f64, xi_count: usize) -> Vec<f64> {
    let edge = PI / period;
    let mut xs: Vec<f64> = (0..xi_count)
        .map(|k| -edge + 2.0 * edge * k as f64 / (xi_count - 1) as f64)
        .collect();
    xs.push(0.0);
    let du = 2.0 * edge / (xi_count - 1) as f64;
    let mut e = 4.0;
    while edge * 10f64.powf(-e) < du {
        xs.push(edge * 10f64.powf(-e));
        xs.push(-edge * 10f64.powf(-e));
        e -= 0.5;
    }
    for x in xs.iter_mut() {
        if x.abs() < 1e-14 * edge {
            *x = 0.0;
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * edge);
    xs
}

fn numerical_range_bound(profile: &WaveProfile) -> f64 {
    let n = profile.n();
    let mut df = vec![0.0; n * n];
    let mut worst = f64::NEG_INFINITY;
    for j in 0..profile.grid_n {
        profile.sys.jacobian_into(profile.value(j), &mut df);
        // Largest eigenvalue of the symmetric part, bounded by Gershgorin.
        for r in 0..n {
            let d = df[r * n + r];
            let off: f64 = (0..n).filter(|&c| c != r).map(|c| 0.5 * (df[r * n + c] + df[c * n + r]).abs()).sum();
            worst = worst.max(d + off);
        }
    }
    worst
}

pub fn sweep_spectrum(profile: &WaveProfile, xi_count: usize, j_track: usize) -> Result<BlochSpectrum> {
    sweep_spectrum_with(profile, xi_count, j_track, Exec::default())
}

pub fn sweep_spectrum_with(profile: &WaveProfile, xi_count: usize, j_track: usize, exec: Exec) -> Result<BlochSpectrum> {
    if xi_count < 16 {
        return Err(Error::InvalidInput(format!("xi_count must be at least 16, got {xi_count}")));
    }
    let grid = sweep_grid(profile.period, xi_count);
    let results: Vec<Option<NodeEigen>> = exec.map(&grid, |&xi| node_eigen(profile, xi));
    let excluded: Vec<f64> = grid.iter().zip(&results).filter(|(_, r)| r.is_none()).map(|(x, _)| *x).collect();
    let nodes: Vec<NodeEigen> = results.into_iter().flatten().collect();
    let xi_grid: Vec<f64> = nodes.iter().map(|nd| nd.xi).collect();
    let zero_index = xi_grid
        .iter()
        .position(|x| *x == 0.0)
        .ok_or_else(|| Error::Eigensolver { xi: 0.0 })?;
    let m = nodes[0].values.len();
    let j_track = j_track.clamp(1, m);
    let udash = profile.translation_mode();

    let mut tracked = vec![vec![0usize; nodes.len()]; j_track];
    let mut critical: Vec<Option<CriticalPair>> = (0..nodes.len()).map(|_| None).collect();
    let mut discontinuities = Vec::new();

    // Seed at xi = 0: curve 0 is aligned with u', the rest by smallest |mu|.
    let z = &nodes[zero_index];
    let (c0, _) = critical_at(profile, z, &udash, &udash)?;
    let crit0 = (0..m)
        .map(|j| (j, overlap(&udash, &column(&z.vectors, j))))
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
        .0;
    let mut order: Vec<usize> = (0..m).filter(|&j| j != crit0).collect();
    order.sort_by(|&a, &b| z.values[a].norm().partial_cmp(&z.values[b].norm()).unwrap());
    tracked[0][zero_index] = crit0;
    for (slot, &j) in order.iter().take(j_track - 1).enumerate() {
        tracked[slot + 1][zero_index] = j;
    }
    critical[zero_index] = Some(c0);

    let mut radius = None;
    let sweeps: [Vec<usize>; 2] = [
        (zero_index + 1..nodes.len()).collect(),
        (0..zero_index).rev().collect(),
    ];
    for (dir, path) in sweeps.iter().enumerate() {
        let mut prev = zero_index;
        let mut branch_open = true;
        for &k in path {
            let prev_vecs: Vec<Vec<C>> = (0..j_track).map(|c| column(&nodes[prev].vectors, tracked[c][prev])).collect();
            let new_vecs: Vec<Vec<C>> = (0..m).map(|j| column(&nodes[k].vectors, j)).collect();
            let mut pairs = Vec::with_capacity(j_track * m);
            for (c, pv) in prev_vecs.iter().enumerate() {
                let mu_prev = nodes[prev].values[tracked[c][prev]];
                for (j, nv) in new_vecs.iter().enumerate() {
                    pairs.push((overlap(pv, nv), (nodes[k].values[j] - mu_prev).norm(), c, j));
                }
            }
            pairs.sort_by(|a, b| {
                if (a.0 - b.0).abs() > 1e-6 {
                    b.0.partial_cmp(&a.0).unwrap()
                } else {
                    a.1.partial_cmp(&b.1).unwrap()
                }
            });
            let mut curve_done = vec![false; j_track];
            let mut col_used = vec![false; m];
            for (ov, _, c, j) in pairs {
                if curve_done[c] || col_used[j] {
                    continue;
                }
                curve_done[c] = true;
                col_used[j] = true;
                tracked[c][k] = j;
                if ov < 0.5 {
                    discontinuities.push(Discontinuity { xi: nodes[k].xi, curve: c, overlap: ov });
                }
                if c == 0 && dir == 0 && ov < 0.9 && radius.is_none() {
                    radius = Some(nodes[prev].xi);
                }
            }
            if branch_open {
                let prev_q = critical[prev].as_ref().expect("previous critical pair").q.clone();
                match critical_at(profile, &nodes[k], &prev_q, &udash) {
                    Ok((cp, _)) => critical[k] = Some(cp),
                    Err(Error::NearDegeneracy { .. }) => {
                        branch_open = false;
                        let at_edge = (nodes[k].xi.abs() - PI / profile.period).abs() <= 1e-12 / profile.period;
                        if dir == 0 && !at_edge && radius.is_none() {
                            radius = Some(nodes[prev].xi);
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            prev = k;
        }
    }
    let kmax = PI * profile.grid_n as f64 / profile.period;
    let tail_bound = -kmax * kmax + numerical_range_bound(profile);

    Ok(BlochSpectrum {
        profile: profile.clone(),
        xi_grid,
        eigenvalues: nodes.into_iter().map(|nd| nd.values).collect(),
        tracked,
        critical,
        discontinuities,
        excluded,
        zero_index,
        analyticity_radius: radius.unwrap_or(PI / profile.period),
        tail_bound,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct D1Result {
    pub ok: bool,
    /// `|mu|` of the eigenvalue identified with the translation mode.
    pub zero_residual: f64,
    /// Distance from 0 of the next-nearest eigenvalue.
    pub gap: f64,
    /// `-max Re mu` over the remaining eigenvalues.
    pub real_gap: f64,
    pub multiplicity: usize,
    /// Angle between the zero eigenvector and `u'`.
    pub angle: f64,
}

fn df_scale(profile: &WaveProfile) -> f64 {
    let n = profile.n();
    let mut df = vec![0.0; n * n];
    let mut s: f64 = 0.0;
    for j in 0..profile.grid_n {
        profile.sys.jacobian_into(profile.value(j), &mut df);
        s = s.max(df.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    1.0 + s
}

pub fn default_d1_tol(profile: &WaveProfile) -> f64 {
    1e-6 * df_scale(profile)
}

/// (D1): a single eigenvalue of `L_0` within `tol` of 0, with eigenvector
/// parallel to `u'`.
pub fn verify_d1(profile: &WaveProfile, tol: f64) -> Result<D1Result> {
    let node = node_eigen(profile, 0.0).ok_or(Error::Eigensolver { xi: 0.0 })?;
    Ok(d1_from_node(profile, &node, tol))
}

fn d1_from_node(profile: &WaveProfile, node: &NodeEigen, tol: f64) -> D1Result {
    let udash = profile.translation_mode();
    let m = node.values.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| node.values[a].norm().partial_cmp(&node.values[b].norm()).unwrap());
    let multiplicity = idx.iter().filter(|&&j| node.values[j].norm() <= tol).count();
    let z = idx[0];
    let cosang = overlap(&udash, &column(&node.vectors, z)).min(1.0);
    let angle = (1.0 - cosang * cosang).max(0.0).sqrt();
    let real_gap = -idx[1..].iter().map(|&j| node.values[j].re).fold(f64::NEG_INFINITY, f64::max);
    D1Result {
        ok: multiplicity == 1 && angle <= 1e-4,
        zero_residual: node.values[z].norm(),
        gap: node.values[idx[1]].norm(),
        real_gap,
        multiplicity,
        angle,
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CriticalExpansion {
    pub mu1: [f64; 2],
    pub mu2: [f64; 2],
    pub residual: f64,
    pub delta_xi: f64,
}

impl CriticalExpansion {
    pub fn mu1(&self) -> C {
        C::new(self.mu1[0], self.mu1[1])
    }

    pub fn mu2(&self) -> C {
        C::new(self.mu2[0], self.mu2[1])
    }
}

pub fn default_delta_xi(profile: &WaveProfile) -> f64 {
    1e-3 * PI / profile.period
}

/// Least-squares fit of `mu(xi) = mu1 xi + mu2 xi^2` to the critical
/// eigenvalue at `xi in {+-d, +-2d, +-3d}`. Fails when the residual exceeds
/// `1e-3 |mu2| d^2` plus the rounding floor of the eigensolver.
pub fn critical_expansion(profile: &WaveProfile, delta_xi: f64) -> Result<CriticalExpansion> {
    let (e, threshold) = fit_with_threshold(profile, delta_xi)?;
    if e.residual > threshold {
        return Err(Error::IllConditionedExpansion { residual: e.residual, threshold });
    }
    Ok(e)
}

/// [`critical_expansion`] without the conditioning check.
pub fn fit_critical_expansion(profile: &WaveProfile, delta_xi: f64) -> Result<CriticalExpansion> {
    Ok(fit_with_threshold(profile, delta_xi)?.0)
}

fn fit_with_threshold(profile: &WaveProfile, delta_xi: f64) -> Result<(CriticalExpansion, f64)> {
    let xs: Vec<f64> = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0].iter().map(|k| k * delta_xi).collect();
    let pairs = critical_branch(profile, &xs, Exec::Sequential)?;
    let mus: Vec<C> = pairs.iter().map(|p| p.mu).collect();
    // Normal equations for the two real regressors (xi, xi^2).
    let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
    let (mut b1, mut b2) = (C::new(0.0, 0.0), C::new(0.0, 0.0));
    for (x, m) in xs.iter().zip(&mus) {
        a11 += x * x;
        a12 += x * x * x;
        a22 += x * x * x * x;
        b1 += m * *x;
        b2 += m * (x * x);
    }
    let det = a11 * a22 - a12 * a12;
    let mu1 = (b1 * a22 - b2 * a12) / det;
    let mu2 = (b2 * a11 - b1 * a12) / det;
    let residual = xs
        .iter()
        .zip(&mus)
        .map(|(x, m)| (m - mu1 * *x - mu2 * (x * x)).norm())
        .fold(0.0, f64::max);
    // Relative tolerance on the quadratic term plus the eigensolver's
    // rounding floor, which dominates where mu2 passes through zero.
    let kmax = PI * profile.grid_n as f64 / profile.period;
    let noise = 64.0 * f64::EPSILON * (kmax * kmax * (1.0 + profile.c.abs()) + df_scale(profile));
    let threshold = 1e-3 * mu2.norm() * delta_xi * delta_xi + noise;
    Ok((CriticalExpansion { mu1: [mu1.re, mu1.im], mu2: [mu2.re, mu2.im], residual, delta_xi }, threshold))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub d1_ok: bool,
    pub d1_zero_residual: f64,
    pub d1_gap: f64,
    pub d1_real_gap: f64,
    pub d2_ok: bool,
    pub theta_hat: f64,
    pub mu1: [f64; 2],
    pub mu2: [f64; 2],
    pub expansion_residual: f64,
    pub analyticity_radius: f64,
    pub tail_bound: f64,
    /// `(xi, j)` with `j` the eigenvalue rank by decreasing real part.
    pub failures: Vec<(f64, usize)>,
    /// Scalar systems are expected to fail (D2).
    pub scalar_system: bool,
    pub discontinuities: Vec<Discontinuity>,
}

/// (D2) from a sweep: `theta_hat = min (-Re mu) / xi^2` over all eigenvalues
/// at `xi != 0`, clipped at 0, with the critical curve near 0 replaced by
/// the fitted `-Re mu2`; at `xi = 0` every eigenvalue other than the
/// translation eigenvalue must have `Re mu <= -real_gap / 2` with a positive
/// real gap.
pub fn verify_d2(spectrum: &BlochSpectrum) -> Result<StabilityReport> {
    let profile = &spectrum.profile;
    let k0 = spectrum.xi_grid.iter().position(|x| *x == 0.0).ok_or_else(|| {
        Error::InvalidInput("spectrum does not contain xi = 0".into())
    })?;
    let node0 = node_eigen(profile, 0.0).ok_or(Error::Eigensolver { xi: 0.0 })?;
    let d1 = d1_from_node(profile, &node0, default_d1_tol(profile));
    let expansion = critical_expansion(profile, default_delta_xi(profile));
    let (mu1, mu2, res) = match &expansion {
        Ok(e) => (e.mu1, e.mu2, e.residual),
        Err(Error::IllConditionedExpansion { residual, .. }) => ([f64::NAN; 2], [f64::NAN; 2], *residual),
        Err(_) => ([f64::NAN; 2], [f64::NAN; 2], f64::NAN),
    };
    let edge = PI / profile.period;
    let fit_zone = 1e-2 * edge;
    let mut theta = f64::INFINITY;
    let mut failures = Vec::new();
    for (k, &xi) in spectrum.xi_grid.iter().enumerate() {
        let vals = &spectrum.eigenvalues[k];
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].re.partial_cmp(&vals[a].re).unwrap());
        let crit = spectrum.tracked[0][k];
        if k == k0 {
            for (rank, &j) in order.iter().enumerate() {
                if j != crit && !(d1.real_gap > 0.0 && vals[j].re <= -d1.real_gap / 2.0) {
                    failures.push((xi, rank));
                }
            }
            continue;
        }
        for (rank, &j) in order.iter().enumerate() {
            let ratio = if j == crit && xi.abs() <= fit_zone && mu2[0].is_finite() {
                -mu2[0]
            } else {
                -vals[j].re / (xi * xi)
            };
            theta = theta.min(ratio);
            if ratio <= 0.0 {
                failures.push((xi, rank));
            }
        }
    }
    let theta_hat = theta.max(0.0);
    let d2_ok = theta_hat > 0.0 && failures.is_empty() && spectrum.tail_bound < 0.0 && d1.ok;
    Ok(StabilityReport {
        d1_ok: d1.ok,
        d1_zero_residual: d1.zero_residual,
        d1_gap: d1.gap,
        d1_real_gap: d1.real_gap,
        d2_ok,
        theta_hat,
        mu1,
        mu2,
        expansion_residual: res,
        analyticity_radius: spectrum.analyticity_radius,
        tail_bound: spectrum.tail_bound,
        failures,
        scalar_system: profile.n() == 1,
        discontinuities: spectrum.discontinuities.clone(),
    })
}
