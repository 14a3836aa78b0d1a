//! Fitted phase of a small-amplitude nonlinear run against the linear
//! kernel phase `psi_lin = -int e v0`, on the rescaled unit-period wave
//! train (`q = 2 pi`, `kappa = 4 q^2`).

use std::f64::consts::PI;

use wavetrain::bloch::{sweep_spectrum, verify_d2};
use wavetrain::fit::fit_power_law;
use wavetrain::integrate::Scheme;
use wavetrain::profile::lambda_omega_wavetrain;
use wavetrain::semigroup::{CutoffSpec, Semigroup};
use wavetrain::simulate::{
    decay_report, extract_phase_kernel, norm_linf, run_simulation, DecayOptions, PerturbationSpec, SimulationConfig,
};
use wavetrain::Exec;

#[test]
fn fitted_and_kernel_phases_agree_at_small_amplitude() {
    let q = 2.0 * PI;
    let profile = lambda_omega_wavetrain(0.0, 4.0 * q * q, q, 32).unwrap();
    let periods = 128;
    let spec = sweep_spectrum(&profile, 65, 4).unwrap();
    let rep = verify_d2(&spec).unwrap();
    assert!(rep.d2_ok);
    let cut = CutoffSpec::for_profile(profile.period, rep.analyticity_radius).unwrap();
    let sg = Semigroup::new(&profile, periods, cut, Exec::default()).unwrap();

    let times: Vec<f64> = (0..=9).map(|k| 10.0 * 10f64.powf(k as f64 / 9.0)).collect();
    let cfg = SimulationConfig {
        profile: profile.clone(),
        domain_periods: periods,
        points_per_period: 32,
        dt: 0.005,
        t_final: 100.0,
        scheme: Scheme::EtdRk4,
        perturbation: PerturbationSpec::gaussian(1e-3, 0.1, vec![1]),
        snapshot_times: times.clone(),
    };
    let run = run_simulation(&cfg).unwrap();
    let opts = DecayOptions { window: Some((10.0, 100.0)), kernel_crosscheck: Some(sg.clone()), exec: Exec::default() };
    let report = decay_report(&run, &opts).unwrap();
    let disc = report.kernel_discrepancy.unwrap();
    for (t, d) in times.iter().zip(&disc) {
        assert!(*d <= 0.1, "t = {t}: relative L2 difference {d}");
    }

    // psi_lin alone decays like t^(-1/2) in sup norm.
    let dense: Vec<f64> = (0..=11).map(|k| 10.0 * 10f64.powf(k as f64 / 11.0)).collect();
    let sup_dense: Vec<f64> = dense
        .iter()
        .map(|&t| norm_linf(&[extract_phase_kernel(&run.v0, t, &sg).unwrap().psi]))
        .collect();
    let f = fit_power_law(&dense, &sup_dense, (10.0, 100.0)).unwrap();
    assert!((f.slope + 0.5).abs() <= 0.1, "slope {}", f.slope);
}

#[test]
fn kernel_phase_vanishes_before_cutoff_time() {
    let q = 2.0 * PI;
    let profile = lambda_omega_wavetrain(0.0, 4.0 * q * q, q, 32).unwrap();
    let cut = CutoffSpec::new(PI / 4.0).unwrap();
    let sg = Semigroup::new(&profile, 16, cut, Exec::default()).unwrap();
    let ne = sg.grid().n_ext();
    let h = sg.grid().spacing();
    let bump: Vec<f64> = (0..ne).map(|i| (-((i as f64 * h - 8.0) / 0.2).powi(2)).exp()).collect();
    let v0 = vec![bump.clone(), bump];
    for t in [0.25, 0.5, 1.0] {
        let ph = extract_phase_kernel(&v0, t, &sg).unwrap();
        assert!(norm_linf(&[ph.psi.clone()]) == 0.0, "t = {t}");
        assert!(norm_linf(&[ph.psi_t.unwrap()]) == 0.0, "t = {t}");
    }
    assert!(extract_phase_kernel(&v0, 0.0, &sg).is_err());
}
