//! `wavetrain`: batch front end for the profile, spectrum, kernel and decay
//! pipeline. Exit codes: 0 ok, 1 other failure, 2 nonconvergence, 3 spectral
//! instability, 4 decay-check failure, 64 configuration error, 66 missing
//! input.

mod config;
mod exit;
mod stages;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wavetrain::Exec;

use config::Config;
use exit::{CliError, CONFIG, MISSING_INPUT};
use stages::Ctx;

#[derive(Parser, Debug)]
#[command(name = "wavetrain", version, about = "Wave-train profiles, Bloch spectra, linear kernels and decay runs")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML configuration with dotted keys (see docs/config.md).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for artifacts; upstream artifacts are read from here too.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Multiplies every resolution (profile grid, simulation points per
    /// period, xi nodes, kernel source points).
    #[arg(long, global = true, default_value_t = 1.0)]
    resolution_scale: f64,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Verb {
    /// Solve for the profile: profile.json, profile.csv.
    Profile,
    /// Continue the profile in (c, X): family.json.
    Family,
    /// Bloch eigenvalue sweep: spectrum.csv.
    Spectrum,
    /// Diffusive stability checks: stability.json, spectrum.csv.
    Verify,
    /// Low-frequency kernel norms: kernel_norms.csv, kernel_fits.json.
    Kernel,
    /// Nonlinear decay run: decay_norms.csv, decay_report.json.
    Simulate,
    /// Fitted against predicted exponents: report.json.
    Report,
}

fn round_even(v: f64) -> i64 {
    2 * ((v / 2.0).round() as i64).max(4)
}

/// Applies `--resolution-scale` to the resolution keys.
fn scale_resolution(cfg: &mut Config, r: f64) -> Result<(), CliError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(CliError::new(CONFIG, format!("--resolution-scale must be positive, got {r}")));
    }
    if r == 1.0 {
        return Ok(());
    }
    for (key, default) in [("grid", 128), ("simulate.points_per_period", 32)] {
        let v = cfg.usize(key, default)? as f64;
        cfg.set(key, toml::Value::Integer(round_even(v * r)));
    }
    let xi = cfg.usize("spectrum.xi_count", 65)? as f64;
    cfg.set("spectrum.xi_count", toml::Value::Integer(round_even((xi - 1.0) * r) + 1));
    let y = cfg.usize("kernel.y_per_period", 8)? as f64;
    cfg.set("kernel.y_per_period", toml::Value::Integer(((y * r).round() as i64).max(1)));
    Ok(())
}

fn exec_for(threads: Option<usize>) -> Result<Exec, CliError> {
    match threads {
        None => Ok(Exec::default()),
        Some(0) => Err(CliError::new(CONFIG, "--threads must be at least 1")),
        Some(1) => Ok(Exec::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::new(CONFIG, format!("--threads: {e}")))?;
            Ok(Exec::Parallel)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::new(MISSING_INPUT, format!("config {}: {e}", path.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    scale_resolution(&mut cfg, cli.resolution_scale)?;
    let exec = exec_for(cli.threads)?;
    if !matches!(cli.verb, Verb::Report) {
        fs::create_dir_all(&cli.out)
            .map_err(|e| CliError::new(exit::FAILURE, format!("cannot create {}: {e}", cli.out.display())))?;
    }
    let ctx = Ctx { cfg, out: cli.out, exec };
    match cli.verb {
        Verb::Profile => stages::cmd_profile(&ctx),
        Verb::Family => stages::cmd_family(&ctx),
        Verb::Spectrum => stages::cmd_spectrum(&ctx),
        Verb::Verify => stages::cmd_verify(&ctx),
        Verb::Kernel => stages::cmd_kernel(&ctx),
        Verb::Simulate => stages::cmd_simulate(&ctx),
        Verb::Report => stages::cmd_report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
