//! Artifact formats: JSON documents, CSV tables and the binary snapshot
//! dump. Floating-point values are written with 17 significant digits
//! (`{:.16e}`), which round-trips every `f64` exactly.
//!
//! Binary snapshot layout (little endian): `M_d: u64`,
//! `points_per_period: u64`, `n: u64`, `t: f64`, then `M_d *
//! points_per_period * n` `f64` values, sample-major (all components of
//! sample 0, then sample 1, ...).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::bloch::BlochSpectrum;
use crate::error::{Error, Result};
use crate::model::builtin_system;
use crate::profile::WaveProfile;
use crate::semigroup::{KernelNormRow, KernelPiece};
use crate::simulate::DecayReport;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Pretty JSON with floats written by [`fmt_f64`].
struct ExactFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for ExactFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(fmt_f64(v).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// On-disk form of a profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub system: String,
    pub params: BTreeMap<String, f64>,
    #[serde(rename = "X")]
    pub period: f64,
    pub c: f64,
    #[serde(rename = "grid_N")]
    pub grid_n: usize,
    pub n: usize,
    /// Sample-major `[grid_N x n]`.
    pub u_samples: Vec<f64>,
    pub residual: f64,
}

impl ProfileDoc {
    pub fn from_profile(p: &WaveProfile) -> Self {
        ProfileDoc {
            system: p.sys.name().to_string(),
            params: p.sys.params().clone(),
            period: p.period,
            c: p.c,
            grid_n: p.grid_n,
            n: p.n(),
            u_samples: p.u_samples.clone(),
            residual: p.residual,
        }
    }

    /// Rebuilds the profile; the system must be a built-in family.
    pub fn to_profile(&self) -> Result<WaveProfile> {
        let sys = builtin_system(&self.system, &self.params)?;
        if sys.n() != self.n {
            return Err(Error::InvalidInput(format!(
                "system `{}` has {} components, document says {}",
                self.system,
                sys.n(),
                self.n
            )));
        }
        if self.u_samples.len() != self.grid_n * self.n {
            return Err(Error::DimensionMismatch { expected: self.grid_n * self.n, got: self.u_samples.len() });
        }
        WaveProfile::from_samples(sys, self.period, self.c, self.u_samples.clone())
    }
}

pub fn write_profile_json(path: &Path, p: &WaveProfile) -> Result<()> {
    write_json(path, &ProfileDoc::from_profile(p))
}

pub fn read_profile_json(path: &Path) -> Result<WaveProfile> {
    read_json::<ProfileDoc>(path)?.to_profile()
}

fn csv_string<F>(header: &[&str], fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    (|| {
        w.write_record(header)?;
        fill(&mut w)?;
        w.flush()?;
        Ok::<_, csv::Error>(())
    })()
    .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("CSV is UTF-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("CSV: {e}"))
}

/// Columns `x, u0, .., u{n-1}, du0, .., du{n-1}`.
pub fn profile_csv(p: &WaveProfile) -> Result<String> {
    let n = p.n();
    let names: Vec<String> =
        std::iter::once("x".to_string()).chain((0..n).map(|c| format!("u{c}"))).chain((0..n).map(|c| format!("du{c}"))).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    csv_string(&header, |w| {
        for j in 0..p.grid_n {
            let row: Vec<String> = std::iter::once(p.x(j))
                .chain(p.value(j).iter().copied())
                .chain(p.derivative(j).iter().copied())
                .map(fmt_f64)
                .collect();
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Rows `xi, j, re_mu, im_mu, tracked_flag`, where `tracked_flag` is the
/// index of the tracked curve through the eigenvalue (0 is the critical
/// curve) or -1.
pub fn spectrum_csv(spec: &BlochSpectrum) -> Result<String> {
    csv_string(&["xi", "j", "re_mu", "im_mu", "tracked_flag"], |w| {
        for (k, (xi, eigs)) in spec.xi_grid.iter().zip(&spec.eigenvalues).enumerate() {
            for (j, mu) in eigs.iter().enumerate() {
                let flag = spec.tracked.iter().position(|curve| curve[k] == j).map_or(-1, |c| c as i64);
                w.write_record([fmt_f64(*xi), j.to_string(), fmt_f64(mu.re), fmt_f64(mu.im), flag.to_string()])?;
            }
        }
        Ok(())
    })
}

/// Rows `t, norm_L2, norm_Linf, piece`.
pub fn kernel_norms_csv(rows: &[KernelNormRow]) -> Result<String> {
    csv_string(&["t", "norm_L2", "norm_Linf", "piece"], |w| {
        for r in rows {
            w.write_record([fmt_f64(r.t), fmt_f64(r.norm_l2), fmt_f64(r.norm_linf), r.piece.name().to_string()])?;
        }
        Ok(())
    })
}

pub fn parse_kernel_norms_csv(text: &str) -> Result<Vec<KernelNormRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 4 {
            return Err(Error::InvalidInput(format!("kernel norm row has {} fields, expected 4", rec.len())));
        }
        out.push(KernelNormRow {
            t: parse_f64(&rec[0])?,
            norm_l2: parse_f64(&rec[1])?,
            norm_linf: parse_f64(&rec[2])?,
            piece: KernelPiece::parse(&rec[3])?,
        });
    }
    Ok(out)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::InvalidInput(format!("not a number: `{s}`")))
}

/// Long-format rows `t, norm_name, value` for every series of the report.
pub fn decay_norms_csv(report: &DecayReport) -> Result<String> {
    csv_string(&["t", "norm_name", "value"], |w| {
        for s in &report.series {
            for (t, v) in report.times.iter().zip(&s.values) {
                w.write_record([fmt_f64(*t), s.name.clone(), fmt_f64(*v)])?;
            }
        }
        Ok(())
    })
}

/// Series of a decay norm table, keyed by name, each as `(t, value)` in file
/// order.
pub fn parse_decay_norms_csv(text: &str) -> Result<BTreeMap<String, (Vec<f64>, Vec<f64>)>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 3 {
            return Err(Error::InvalidInput(format!("decay norm row has {} fields, expected 3", rec.len())));
        }
        let e = out.entry(rec[1].to_string()).or_default();
        e.0.push(parse_f64(&rec[0])?);
        e.1.push(parse_f64(&rec[2])?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotDump {
    pub periods: usize,
    pub points_per_period: usize,
    pub t: f64,
    /// Per component, as in the simulation.
    pub field: Vec<Vec<f64>>,
}

pub fn write_snapshot<W: Write>(w: &mut W, s: &SnapshotDump) -> Result<()> {
    let np = s.periods * s.points_per_period;
    if s.field.iter().any(|c| c.len() != np) {
        return Err(Error::DimensionMismatch { expected: np, got: s.field.first().map_or(0, Vec::len) });
    }
    w.write_all(&(s.periods as u64).to_le_bytes())?;
    w.write_all(&(s.points_per_period as u64).to_le_bytes())?;
    w.write_all(&(s.field.len() as u64).to_le_bytes())?;
    w.write_all(&s.t.to_le_bytes())?;
    for p in 0..np {
        for c in &s.field {
            w.write_all(&c[p].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads one snapshot; `Ok(None)` at a clean end of stream.
pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Option<SnapshotDump>> {
    let mut b = [0u8; 8];
    match r.read_exact(&mut b) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let periods = u64::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let ppp = u64::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let n = u64::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let t = f64::from_le_bytes(b);
    let np = periods
        .checked_mul(ppp)
        .filter(|np| np.checked_mul(n).is_some_and(|m| m <= 1 << 32))
        .ok_or_else(|| Error::InvalidInput("snapshot header sizes are implausible".into()))?;
    let mut field = vec![vec![0.0; np]; n];
    for p in 0..np {
        for c in field.iter_mut() {
            r.read_exact(&mut b)?;
            c[p] = f64::from_le_bytes(b);
        }
    }
    Ok(Some(SnapshotDump { periods, points_per_period: ppp, t, field }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::lambda_omega_wavetrain;
    use proptest::prelude::*;

    #[test]
    fn profile_json_round_trip_is_exact() {
        let p = lambda_omega_wavetrain(0.5, 1.0, 0.3, 32).unwrap();
        let text = to_json(&ProfileDoc::from_profile(&p)).unwrap();
        let doc: ProfileDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(doc, ProfileDoc::from_profile(&p));
        let back = doc.to_profile().unwrap();
        assert_eq!(back.u_samples, p.u_samples);
        assert_eq!(back.c, p.c);
        assert_eq!(to_json(&ProfileDoc::from_profile(&back)).unwrap(), text);
        for key in ["\"system\"", "\"params\"", "\"X\"", "\"c\"", "\"grid_N\"", "\"u_samples\"", "\"residual\""] {
            assert!(text.contains(key), "{key}");
        }
    }

    #[test]
    fn profile_csv_shape() {
        let p = lambda_omega_wavetrain(0.0, 1.0, 0.3, 16).unwrap();
        let text = profile_csv(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,u0,u1,du0,du1");
        assert_eq!(lines.len(), 17);
        assert_eq!(lines[1].split(',').count(), 5);
    }

    #[test]
    fn kernel_table_round_trip() {
        let rows = vec![
            KernelNormRow { t: 20.0, piece: KernelPiece::E, norm_l2: 0.1, norm_linf: 1.0 / 3.0 },
            KernelNormRow { t: 25.5, piece: KernelPiece::SII, norm_l2: 1e-300, norm_linf: 2.5e-17 },
        ];
        let back = parse_kernel_norms_csv(&kernel_norms_csv(&rows).unwrap()).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!((a.t, a.norm_l2, a.norm_linf, a.piece), (b.t, b.norm_l2, b.norm_linf, b.piece));
        }
        assert!(parse_kernel_norms_csv("t,norm_L2,norm_Linf,piece\n1,2,3,bogus\n").is_err());
    }

    #[test]
    fn truncated_snapshot_is_an_error() {
        let s = SnapshotDump { periods: 2, points_per_period: 4, t: 1.5, field: vec![vec![1.0; 8], vec![2.0; 8]] };
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 32 + 16 * 8);
        buf.truncate(buf.len() - 3);
        assert!(read_snapshot(&mut buf.as_slice()).is_err());
        assert!(read_snapshot(&mut [].as_slice()).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn float_format_round_trips(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
            let s = fmt_f64(v);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
            let j: f64 = serde_json::from_str(&to_json(&v).unwrap()).unwrap();
            prop_assert_eq!(j.to_bits(), v.to_bits());
        }

        #[test]
        fn snapshot_round_trips(
            periods in 1usize..4,
            ppp in 1usize..6,
            n in 1usize..3,
            t in -1e3f64..1e3,
            seed in any::<u64>(),
        ) {
            let np = periods * ppp;
            let field: Vec<Vec<f64>> = (0..n)
                .map(|c| (0..np).map(|p| ((seed as f64) * 1e-19 + (c * np + p) as f64).sin()).collect())
                .collect();
            let s = SnapshotDump { periods, points_per_period: ppp, t, field };
            let mut buf = Vec::new();
            write_snapshot(&mut buf, &s).unwrap();
            write_snapshot(&mut buf, &s).unwrap();
            let mut rd = buf.as_slice();
            prop_assert_eq!(read_snapshot(&mut rd).unwrap().unwrap(), s.clone());
            prop_assert_eq!(read_snapshot(&mut rd).unwrap().unwrap(), s);
            prop_assert!(read_snapshot(&mut rd).unwrap().is_none());
        }
    }
}
