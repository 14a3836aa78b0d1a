//! One function per verb. Each stage reads its declared inputs from the
//! output directory (or an explicit path) and writes its artifacts there.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use wavetrain::bloch::{sweep_spectrum, verify_d2, StabilityReport};
use wavetrain::fit::{fit_power_law, geometric_times};
use wavetrain::integrate::Scheme;
use wavetrain::io::{
    decay_norms_csv, kernel_norms_csv, parse_decay_norms_csv, parse_kernel_norms_csv, profile_csv, read_json,
    read_profile_json, write_json, write_profile_json, write_snapshot, SnapshotDump,
};
use wavetrain::model::builtin_system;
use wavetrain::profile::{
    continue_family, lambda_omega_wavetrain, scalar_cubic_seed, solve_profile, ContinuationOptions, NewtonOptions,
    Termination, WaveProfile,
};
use wavetrain::semigroup::{decompose_kernels, fit_kernel_norms, CutoffSpec, KernelPiece, Semigroup};
use wavetrain::simulate::{decay_suite, predicted_slope, DecayOptions, DecayReport, PerturbationSpec, SimulationConfig};
use wavetrain::Exec;

use crate::config::Config;
use crate::exit::{CliError, DECAY_CHECK, MISSING_INPUT, NONCONVERGENCE, UNSTABLE};

pub struct Ctx {
    pub cfg: Config,
    pub out: PathBuf,
    pub exec: Exec,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.path(name), text).map_err(|e| wavetrain::Error::Io(e).into())
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<(), CliError> {
        Ok(write_json(&self.path(name), v)?)
    }

    /// Reads a required upstream artifact; absence exits with 66.
    fn require(&self, path: &Path, produced_by: &str) -> Result<(), CliError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(CliError::new(
                MISSING_INPUT,
                format!("missing input {} (run `wavetrain {produced_by}` first)", path.display()),
            ))
        }
    }

    fn profile(&self) -> Result<WaveProfile, CliError> {
        let path = match self.cfg.str_opt("inputs.profile")? {
            Some(p) => PathBuf::from(p),
            None => self.path("profile.json"),
        };
        self.require(&path, "profile")?;
        Ok(read_profile_json(&path)?)
    }

    fn stability(&self) -> Result<StabilityReport, CliError> {
        let path = self.path("stability.json");
        self.require(&path, "verify")?;
        Ok(read_json(&path)?)
    }
}

pub fn cmd_profile(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let system = cfg.str("system", "lambda_omega")?;
    let grid = cfg.usize("grid", 128)?;
    if grid < 8 || grid % 2 != 0 {
        return Err(cfg.invalid("grid", "must be even and at least 8"));
    }
    let mut params = BTreeMap::new();
    let (sys, period, seed, c_guess) = match system {
        "lambda_omega" => {
            let gamma = cfg.f64("gamma", 0.0)?;
            let kappa = cfg.f64("kappa", 1.0)?;
            let q = cfg.f64("q", 0.2)?;
            params.insert("gamma".to_string(), gamma);
            params.insert("kappa".to_string(), kappa);
            let sys = builtin_system(system, &params)?;
            if cfg.has("period") {
                return Err(cfg.invalid("period", "lambda_omega takes q, not period"));
            }
            let seed = lambda_omega_wavetrain(gamma, kappa, q, grid)?;
            (sys, seed.period, seed.u_samples, seed.c)
        }
        "scalar_cubic" => {
            let Some(period) = cfg.f64_opt("period")? else {
                return Err(cfg.invalid("period", "required for scalar_cubic"));
            };
            let sys = builtin_system(system, &params)?;
            (sys, period, scalar_cubic_seed(period, grid)?, 0.0)
        }
        other => {
            return Err(cfg.invalid("system", &format!("unknown system `{other}`, expected lambda_omega or scalar_cubic")))
        }
    };
    let (p, stats) = match solve_profile(&sys, period, &seed, c_guess, &NewtonOptions::default()) {
        Ok(r) => r,
        Err(e @ wavetrain::Error::NonConvergence { .. }) => return Err(CliError::new(NONCONVERGENCE, e.to_string())),
        Err(e) => return Err(e.into()),
    };
    write_profile_json(&ctx.path("profile.json"), &p)?;
    ctx.write("profile.csv", &profile_csv(&p)?)?;
    eprintln!(
        "profile: X = {:.6}, c = {:.10}, residual {:.2e} after {} Newton steps",
        p.period, p.c, p.residual, stats.iterations
    );
    if p.residual > 1e-8 {
        return Err(CliError::new(NONCONVERGENCE, format!("profile residual {:.2e} exceeds 1e-8", p.residual)));
    }
    Ok(())
}

#[derive(Serialize)]
struct FamilyMember {
    c: f64,
    #[serde(rename = "X")]
    period: f64,
    dc_ds: f64,
    dx_ds: f64,
    residual: f64,
}

#[derive(Serialize)]
struct FamilyDoc {
    members: Vec<FamilyMember>,
    termination: String,
    /// Last good member before a fold or a failed step.
    stopped_after: Option<usize>,
}

pub fn cmd_family(ctx: &Ctx) -> Result<(), CliError> {
    let start = ctx.profile()?;
    let cfg = &ctx.cfg;
    let steps = cfg.usize("family.steps", 10)?;
    let mut opts = ContinuationOptions::default();
    opts.ds = cfg.f64("family.ds", opts.ds)?;
    let dir = (cfg.f64("family.dc", 0.0)?, cfg.f64("family.dx", 1.0)?);
    let fam = continue_family(&start, dir, steps, &opts)?;
    let (termination, stopped_after) = match fam.termination {
        Termination::Completed => ("completed".to_string(), None),
        Termination::Fold { index } => ("fold".to_string(), Some(index)),
        Termination::StepFailure { index, .. } => ("step_failure".to_string(), Some(index)),
    };
    let members = fam
        .members
        .iter()
        .zip(&fam.tangents)
        .map(|(m, t)| FamilyMember { c: m.c, period: m.period, dc_ds: t.0, dx_ds: t.1, residual: m.residual })
        .collect();
    ctx.write_json("family.json", &FamilyDoc { members, termination, stopped_after })?;
    eprintln!("family: {} members", fam.members.len());
    Ok(())
}

fn spectrum(ctx: &Ctx, p: &WaveProfile) -> Result<wavetrain::bloch::BlochSpectrum, CliError> {
    let xi_count = ctx.cfg.usize("spectrum.xi_count", 65)?;
    let tracked = ctx.cfg.usize("spectrum.tracked", 4)?;
    Ok(sweep_spectrum(p, xi_count, tracked)?)
}

pub fn cmd_spectrum(ctx: &Ctx) -> Result<(), CliError> {
    let p = ctx.profile()?;
    let spec = spectrum(ctx, &p)?;
    ctx.write("spectrum.csv", &wavetrain::io::spectrum_csv(&spec)?)?;
    eprintln!("spectrum: {} xi nodes", spec.xi_grid.len());
    Ok(())
}

pub fn cmd_verify(ctx: &Ctx) -> Result<(), CliError> {
    let p = ctx.profile()?;
    let spec = spectrum(ctx, &p)?;
    let rep = verify_d2(&spec)?;
    ctx.write("spectrum.csv", &wavetrain::io::spectrum_csv(&spec)?)?;
    ctx.write_json("stability.json", &rep)?;
    eprintln!(
        "verify: d1_ok = {}, d2_ok = {}, theta_hat = {:.4e}, mu1 = ({:.3e}, {:.6}), mu2 = ({:.6}, {:.3e})",
        rep.d1_ok, rep.d2_ok, rep.theta_hat, rep.mu1[0], rep.mu1[1], rep.mu2[0], rep.mu2[1]
    );
    if rep.d1_ok && rep.d2_ok {
        Ok(())
    } else {
        let locs: Vec<String> = rep.failures.iter().take(8).map(|(xi, j)| format!("xi = {xi:.4} (curve {j})")).collect();
        Err(CliError::new(
            UNSTABLE,
            format!("spectrally unstable: {} failing nodes, first at {}", rep.failures.len(), locs.join(", ")),
        ))
    }
}

pub fn cmd_kernel(ctx: &Ctx) -> Result<(), CliError> {
    let p = ctx.profile()?;
    let st = ctx.stability()?;
    if !(st.d1_ok && st.d2_ok) {
        return Err(CliError::new(UNSTABLE, "kernel decomposition needs a verified stable profile"));
    }
    let cfg = &ctx.cfg;
    let periods = cfg.usize("kernel.periods", 256)?;
    let t_min = cfg.f64("kernel.t_min", 20.0)?;
    let t_max = cfg.f64("kernel.t_max", 500.0)?;
    if !(t_min > 0.0 && t_max > t_min) {
        return Err(cfg.invalid("kernel.t_max", "needs 0 < kernel.t_min < kernel.t_max"));
    }
    let per_decade = cfg.usize("kernel.per_decade", 24)?;
    let ypp = cfg.usize("kernel.y_per_period", 8)?;
    let cut = CutoffSpec::for_profile(p.period, st.analyticity_radius)?;
    let sg = Semigroup::new(&p, periods, cut, ctx.exec)?;
    let times = geometric_times(t_min, t_max, per_decade.max(1));
    let dec = decompose_kernels(&sg, &times, ypp, ctx.exec)?;
    let fits = fit_kernel_norms(&dec, (t_min, t_max))?;
    ctx.write("kernel_norms.csv", &kernel_norms_csv(&dec.norms)?)?;
    ctx.write_json("kernel_fits.json", &fits)?;
    eprintln!("kernel: {} times, xi doubling change {:.1e}", times.len(), dec.quadrature_change);
    Ok(())
}

pub fn cmd_simulate(ctx: &Ctx) -> Result<(), CliError> {
    let p = ctx.profile()?;
    let cfg = &ctx.cfg;
    if !cfg.bool("simulate.allow_unstable", false)? {
        let st = ctx.stability()?;
        if !(st.d1_ok && st.d2_ok) {
            return Err(CliError::new(
                UNSTABLE,
                "profile failed verification; set simulate.allow_unstable = true to run anyway",
            ));
        }
    }
    let t_final = cfg.f64("simulate.t_final", 500.0)?;
    let scheme = Scheme::parse(cfg.str("simulate.scheme", "etd-rk4")?).map_err(|e| cfg.invalid("simulate.scheme", &e.to_string()))?;
    let default_comp = if p.n() > 1 { 1 } else { 0 };
    let components = cfg.usize_list("simulate.components")?.unwrap_or(vec![default_comp]);
    let mut perturbation =
        PerturbationSpec::gaussian(cfg.f64("simulate.delta", 1e-2)?, cfg.f64("simulate.sigma", 2.0)?, components);
    perturbation.center = cfg.f64_opt("simulate.center")?;
    perturbation.noise = cfg.f64("simulate.noise", 0.0)?;
    perturbation.seed = cfg.u64("seed", 0)?;
    let snapshot_times = match cfg.f64_list("simulate.snapshots")? {
        Some(t) => t,
        None => {
            let t0 = cfg.f64("simulate.snapshot_t_min", 1.0)?;
            if !(t0 > 0.0 && t0 <= t_final) {
                return Err(cfg.invalid("simulate.snapshot_t_min", "must lie in (0, t_final]"));
            }
            let mut t = vec![0.0];
            t.extend(geometric_times(t0, t_final, cfg.usize("simulate.snapshots_per_decade", 24)?.max(1)));
            t
        }
    };
    let sim = SimulationConfig {
        profile: p,
        domain_periods: cfg.usize("simulate.periods", 64)?,
        points_per_period: cfg.usize("simulate.points_per_period", 32)?,
        dt: cfg.f64("simulate.dt", 0.05)?,
        t_final,
        scheme,
        perturbation,
        snapshot_times,
    };
    let window = (cfg.f64("simulate.window_min", 20.0)?, cfg.f64("simulate.window_max", 0.9 * t_final)?);
    let opts = DecayOptions { window: Some(window), kernel_crosscheck: None, exec: ctx.exec };
    let (run, report) = decay_suite(&sim, &opts)?;
    ctx.write("decay_norms.csv", &decay_norms_csv(&report)?)?;
    ctx.write_json("decay_report.json", &report)?;
    if cfg.bool("simulate.dump", false)? {
        let file = fs::File::create(ctx.path("snapshots.bin")).map_err(wavetrain::Error::Io)?;
        let mut w = BufWriter::new(file);
        for s in &run.snapshots {
            let dump = SnapshotDump {
                periods: run.periods,
                points_per_period: run.profile.grid_n,
                t: s.t,
                field: s.field.clone(),
            };
            write_snapshot(&mut w, &dump)?;
        }
    }
    eprintln!(
        "simulate: {} snapshots, drift {:.4} (predicted {:.4})",
        run.snapshots.len(),
        report.drift_velocity,
        report.predicted_drift
    );
    Ok(())
}

/// Slope targets checked by `report`: `(series, tolerance)`.
const DECAY_TOLERANCES: [(&str, f64); 3] = [("unmod_l2", 0.1), ("mod_l2", 0.15), ("psi_linf", 0.1)];
const KERNEL_CHECKS: [(KernelPiece, &str); 6] = [
    (KernelPiece::Gtilde, "Linf"),
    (KernelPiece::Gtilde, "L2"),
    (KernelPiece::E, "Linf"),
    (KernelPiece::DxE, "Linf"),
    (KernelPiece::DyE, "Linf"),
    (KernelPiece::GI, "Linf"),
];
const KERNEL_TOLERANCE: f64 = 0.15;
const DRIFT_TOLERANCE: f64 = 0.1;

#[derive(Debug, Serialize)]
pub struct ReportRow {
    pub source: String,
    pub series: String,
    pub window: (f64, f64),
    pub fitted: Option<f64>,
    pub stderr: Option<f64>,
    pub predicted: f64,
    /// `None` for rows reported without a pass/fail target.
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Serialize)]
struct ReportDoc {
    all_pass: bool,
    rows: Vec<ReportRow>,
}

fn fit_row(source: &str, series: String, t: &[f64], v: &[f64], window: (f64, f64), predicted: f64, tol: Option<f64>) -> ReportRow {
    match fit_power_law(t, v, window) {
        Ok(f) => ReportRow {
            source: source.into(),
            series,
            window,
            fitted: Some(f.slope),
            stderr: Some(f.stderr),
            predicted,
            tolerance: tol,
            pass: tol.map(|tol| (f.slope - predicted).abs() <= tol),
            note: None,
        },
        Err(e) => ReportRow {
            source: source.into(),
            series,
            window,
            fitted: None,
            stderr: None,
            predicted,
            tolerance: tol,
            pass: Some(false),
            note: Some(e.to_string()),
        },
    }
}

fn decay_rows(ctx: &Ctx, rows: &mut Vec<ReportRow>) -> Result<bool, CliError> {
    let path = ctx.path("decay_norms.csv");
    if !path.is_file() {
        return Ok(false);
    }
    let text = fs::read_to_string(&path).map_err(wavetrain::Error::Io)?;
    let table = parse_decay_norms_csv(&text).map_err(|e| CliError::new(DECAY_CHECK, format!("decay_norms.csv: {e}")))?;
    let meta: Option<DecayReport> = read_json(&ctx.path("decay_report.json")).ok();
    let t_max = table.values().flat_map(|(t, _)| t.iter().copied()).fold(0.0, f64::max);
    let window = meta.as_ref().map_or((20.0, 0.9 * t_max), |m| m.window);
    for (name, (t, v)) in &table {
        let Some(pred) = predicted_slope(name) else { continue };
        let tol = DECAY_TOLERANCES.iter().find(|(n, _)| n == name).map(|(_, tol)| *tol);
        rows.push(fit_row("decay", name.clone(), t, v, window, pred, tol));
    }
    for (name, _) in DECAY_TOLERANCES {
        if !table.contains_key(name) {
            rows.push(ReportRow {
                source: "decay".into(),
                series: name.into(),
                window,
                fitted: None,
                stderr: None,
                predicted: predicted_slope(name).unwrap_or(f64::NAN),
                tolerance: None,
                pass: Some(false),
                note: Some("series missing from decay_norms.csv".into()),
            });
        }
    }
    if let (Some(meta), Some((t, c))) = (meta, table.get("psi_centroid")) {
        let pts: Vec<(f64, f64)> = t.iter().zip(c).filter(|(t, _)| **t >= window.0 && **t <= window.1).map(|(a, b)| (*a, *b)).collect();
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let mc = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|(t, c)| (t - mt) * (c - mc)).sum();
        let sxx: f64 = pts.iter().map(|(t, _)| (t - mt).powi(2)).sum();
        let drift = sxy / sxx;
        let want = meta.predicted_drift;
        let checked = want.abs() > 1e-3;
        let ok = drift.is_finite() && ((drift - want) / want).abs() <= DRIFT_TOLERANCE;
        rows.push(ReportRow {
            source: "decay".into(),
            series: "drift_velocity".into(),
            window,
            fitted: drift.is_finite().then_some(drift),
            stderr: None,
            predicted: want,
            tolerance: checked.then_some(DRIFT_TOLERANCE),
            pass: checked.then_some(ok),
            note: Some("relative tolerance; compared only when |predicted| > 1e-3".into()),
        });
    }
    Ok(true)
}

fn kernel_rows(ctx: &Ctx, rows: &mut Vec<ReportRow>) -> Result<bool, CliError> {
    let path = ctx.path("kernel_norms.csv");
    if !path.is_file() {
        return Ok(false);
    }
    let text = fs::read_to_string(&path).map_err(wavetrain::Error::Io)?;
    let table = parse_kernel_norms_csv(&text).map_err(|e| CliError::new(DECAY_CHECK, format!("kernel_norms.csv: {e}")))?;
    let t_lo = table.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
    let t_hi = table.iter().map(|r| r.t).fold(0.0, f64::max);
    for piece in KernelPiece::ALL {
        for (norm, p_inf) in [("L2", false), ("Linf", true)] {
            let Some(pred) = piece.predicted_slope(p_inf) else { continue };
            let rs: Vec<_> = table.iter().filter(|r| r.piece == piece).collect();
            if rs.is_empty() {
                continue;
            }
            let t: Vec<f64> = rs.iter().map(|r| r.t).collect();
            let v: Vec<f64> = rs.iter().map(|r| if p_inf { r.norm_linf } else { r.norm_l2 }).collect();
            let checked = KERNEL_CHECKS.iter().any(|(p, n)| *p == piece && *n == norm);
            rows.push(fit_row(
                "kernel",
                format!("{}_{norm}", piece.name()),
                &t,
                &v,
                (t_lo, t_hi),
                pred,
                checked.then_some(KERNEL_TOLERANCE),
            ));
        }
    }
    Ok(true)
}

pub fn cmd_report(ctx: &Ctx) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let has_decay = decay_rows(ctx, &mut rows)?;
    let has_kernel = kernel_rows(ctx, &mut rows)?;
    if !has_decay && !has_kernel {
        return Err(CliError::new(
            MISSING_INPUT,
            format!("no decay_norms.csv or kernel_norms.csv in {}", ctx.out.display()),
        ));
    }
    let failing: Vec<&ReportRow> = rows.iter().filter(|r| r.pass == Some(false)).collect();
    let all_pass = failing.is_empty();
    let summary: Vec<String> = failing
        .iter()
        .map(|r| match r.fitted {
            Some(s) => format!("{} {}: slope {s:.3}, predicted {}", r.source, r.series, r.predicted),
            None => format!("{} {}: {}", r.source, r.series, r.note.as_deref().unwrap_or("no fit")),
        })
        .collect();
    ctx.write_json("report.json", &ReportDoc { all_pass, rows })?;
    if all_pass {
        eprintln!("report: all checks pass");
        Ok(())
    } else {
        Err(CliError::new(DECAY_CHECK, format!("failing rows:\n  {}", summary.join("\n  "))))
    }
}
