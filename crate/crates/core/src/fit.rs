//! Least-squares decay fits and geometric time grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub samples: usize,
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = if xs.len() > 2 && sxx > 0.0 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    LinearFit { slope, intercept, stderr, samples: xs.len() }
}

fn windowed(t: &[f64], v: &[f64], window: (f64, f64)) -> Result<(Vec<f64>, Vec<f64>)> {
    if t.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: t.len(), got: v.len() });
    }
    let (ts, vs): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(v)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(t, v)| (*t, *v))
        .unzip();
    if ts.len() < 8 {
        return Err(Error::InvalidInput(format!(
            "power-law fit needs at least 8 samples in [{}, {}], found {}",
            window.0,
            window.1,
            ts.len()
        )));
    }
    if let Some(bad) = vs.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidInput(format!("power-law fit needs positive values, found {bad}")));
    }
    Ok((ts, vs))
}

/// Slope of `log v` against `log(1 + t)` over samples with `t` in `window`.
pub fn fit_power_law(t: &[f64], v: &[f64], window: (f64, f64)) -> Result<LinearFit> {
    let (ts, vs) = windowed(t, v, window)?;
    let xs: Vec<f64> = ts.iter().map(|t| (1.0 + t).ln()).collect();
    let ys: Vec<f64> = vs.iter().map(|v| v.ln()).collect();
    Ok(linear_fit(&xs, &ys))
}

/// Slope of `log v` against `t` (the negative of an exponential decay rate).
pub fn fit_log_linear(t: &[f64], v: &[f64], window: (f64, f64)) -> Result<LinearFit> {
    let (ts, vs) = windowed(t, v, window)?;
    let ys: Vec<f64> = vs.iter().map(|v| v.ln()).collect();
    Ok(linear_fit(&ts, &ys))
}

/// Geometric grid on `[t0, t1]` with `per_decade` points per decade, always
/// containing both endpoints.
pub fn geometric_times(t0: f64, t1: f64, per_decade: usize) -> Vec<f64> {
    assert!(t0 > 0.0 && t1 >= t0 && per_decade > 0);
    let steps = ((t1 / t0).log10() * per_decade as f64).ceil().max(1.0) as usize;
    let ratio = (t1 / t0).powf(1.0 / steps as f64);
    (0..=steps).map(|k| if k == steps { t1 } else { t0 * ratio.powi(k as i32) }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_power_law() {
        let t = geometric_times(20.0, 500.0, 24);
        let v: Vec<f64> = t.iter().map(|t| (1.0 + t).powf(-0.75)).collect();
        let f = fit_power_law(&t, &v, (20.0, 500.0)).unwrap();
        assert!((f.slope + 0.75).abs() < 1e-6);
        let c = vec![3.0; t.len()];
        assert!(fit_power_law(&t, &c, (20.0, 500.0)).unwrap().slope.abs() < 1e-12);
    }

    #[test]
    fn oscillating_power_law() {
        let t = geometric_times(20.0, 500.0, 24);
        let v: Vec<f64> = t.iter().map(|t| (2.0 + (1.0 + t).ln().sin()) / (1.0 + t)).collect();
        let f = fit_power_law(&t, &v, (20.0, 500.0)).unwrap();
        // Brute-force reference: the slope of the log-oscillation term over
        // the window, averaged by least squares, is small.
        assert!((f.slope + 1.0).abs() < 0.1, "{}", f.slope);
    }

    #[test]
    fn rejects_bad_input() {
        let t = geometric_times(1.0, 10.0, 24);
        let mut v = vec![1.0; t.len()];
        v[3] = 0.0;
        assert!(fit_power_law(&t, &v, (1.0, 10.0)).is_err());
        assert!(fit_power_law(&t[..5], &v[..5], (1.0, 10.0)).is_err());
    }

    #[test]
    fn geometric_grid_density() {
        let t = geometric_times(20.0, 500.0, 24);
        assert_eq!(t[0], 20.0);
        assert_eq!(*t.last().unwrap(), 500.0);
        assert_eq!(t.len(), 35);
    }

    proptest! {
        #[test]
        fn recovers_any_exponent(p in -3.0f64..1.0, a in 0.01f64..100.0) {
            let t = geometric_times(1.0, 1000.0, 12);
            let v: Vec<f64> = t.iter().map(|t| a * (1.0 + t).powf(p)).collect();
            let f = fit_power_law(&t, &v, (1.0, 1000.0)).unwrap();
            prop_assert!((f.slope - p).abs() < 1e-9);
            prop_assert!(f.stderr < 1e-9);
        }
    }
}
