//! `aple` command line: `locate`, `sweep`, `scaling` and `plot`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aple_core::aple::run_aple;
use aple_core::channel::{Scene, near_field_channel, snr_to_noise_var, synthesize_snapshot};
use aple_core::geometry::spherical_to_cartesian;
use clap::{Args, Parser, Subcommand};

use crate::config::{EstimatorKind, ExperimentConfig};
use crate::error::HarnessError;
use crate::experiment::{
    aggregate, loglog_slope, read_rows, run_experiment, run_scaling, sample_direction, scene_seed, trial_seed,
    write_rows, write_scaling,
};
use crate::plot::{nmse_plot, runtime_plot};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "aple", version, about = "Near-field user localization by subarray AoA fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Experiment or scene file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output file; overrides the config.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Comma-separated estimators (aple, mle, omp); overrides the config.
    #[arg(long, global = true, value_name = "LIST")]
    pub estimators: Option<String>,
    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long, global = true, value_name = "INT")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Locate the user of a single scene and print the estimate.
    Locate,
    /// Run a Monte Carlo sweep and write per-trial CSV rows.
    Sweep,
    /// Measure APLE runtime against array size.
    Scaling,
    /// Render a sweep or scaling CSV as an SVG line plot.
    Plot {
        /// CSV written by `sweep` or `scaling`.
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(list) = &common.estimators {
        cfg.estimators = EstimatorKind::parse_list(list)?;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn locate(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<i32, HarnessError> {
    let geometry = cfg.geometry()?;
    let plan = cfg.plan(&geometry)?;
    let p_u = match cfg.user_point() {
        Some(p) => p,
        None => {
            let r = cfg
                .ranges_m(&geometry, &plan)
                .first()
                .copied()
                .ok_or_else(|| HarnessError::Config("set either user or ranges".into()))?;
            let (az, el) = sample_direction(scene_seed(cfg.seed, 0), cfg.cone_deg);
            spherical_to_cartesian(r, az, el)
        }
    };
    let snr = cfg.snr_db.first().copied().unwrap_or(f64::INFINITY);
    let clean = Scene::new(p_u);
    let h = near_field_channel(&geometry, &clean)?;
    let noise_var = if snr.is_infinite() { 0.0 } else { snr_to_noise_var(&h, clean.pilot, snr) };
    let snap = synthesize_snapshot(&h, &clean.with_noise(noise_var, trial_seed(cfg.seed, 0, 0)), &plan)?;
    let aple_cfg = cfg.aple_config();
    aple_cfg.validate()?;
    let est = run_aple(&snap, &plan, &geometry, noise_var, &aple_cfg)?;
    let cov = est.belief.cov;
    writeln!(out, "p_hat = {}", fmt_vec(est.p_hat.as_slice()))?;
    writeln!(out, "cov_diag = {}", fmt_vec(&[cov[(0, 0)], cov[(1, 1)], cov[(2, 2)]]))?;
    writeln!(out, "converged = {}", est.converged)?;
    writeln!(out, "iterations = {}", est.iterations_run)?;
    writeln!(out, "p_true = {}", fmt_vec(p_u.as_slice()))?;
    writeln!(out, "error_m = {:.6e}", (est.p_hat - p_u).norm())?;
    Ok(EXIT_OK)
}

fn sweep(cfg: &ExperimentConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, HarnessError> {
    let rows = run_experiment(cfg)?;
    match &cfg.out {
        Some(path) => write_rows(create(path)?, &rows)?,
        None => write_rows(&mut *out, &rows)?,
    }
    for c in aggregate(&rows) {
        writeln!(
            err,
            "{:>5} N={:<4} M={:<3} r={:<8.3} snr={:<6} nmse={:>8.2} dB median={:>8.2} dB failures={}",
            c.estimator, c.n_x, c.m, c.r, c.snr_db, c.nmse_db, c.median_db, c.failures
        )?;
    }
    if let Some(path) = &cfg.plot {
        create(path)?.write_all(nmse_plot(&rows).as_bytes())?;
    }
    let failed = rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        writeln!(err, "{failed} estimator run(s) failed")?;
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn scaling(cfg: &ExperimentConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, HarnessError> {
    let pool = crate::experiment::build_pool(cfg.threads.max(1))?;
    let rows = pool.install(|| run_scaling(cfg))?;
    match &cfg.out {
        Some(path) => write_scaling(create(path)?, &rows)?,
        None => write_scaling(&mut *out, &rows)?,
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n_b as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_s).collect();
    if rows.len() >= 2 {
        writeln!(err, "log-log slope of runtime vs antennas: {:.3}", loglog_slope(&xs, &ys))?;
    }
    if let Some(path) = &cfg.plot {
        create(path)?.write_all(runtime_plot(&rows).as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn plot(input: &Path, out_path: Option<&Path>) -> Result<i32, HarnessError> {
    let text = std::fs::read_to_string(input)?;
    let header = text.lines().next().unwrap_or_default();
    let svg = if header.starts_with("estimator,") {
        nmse_plot(&read_rows(text.as_bytes())?)
    } else if header.starts_with("n_x,n_b") {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<Result<Vec<_>, _>>()?;
        runtime_plot(&rows)
    } else {
        return Err(HarnessError::Config(format!("{}: not a sweep or scaling CSV", input.display())));
    };
    let target = out_path.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("svg"));
    create(&target)?.write_all(svg.as_bytes())?;
    Ok(EXIT_OK)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Plot { input } => plot(input, cli.common.out.as_deref()),
        cmd => load_config(&cli.common).and_then(|cfg| match cmd {
            Command::Locate => locate(&cfg, out),
            Command::Sweep => sweep(&cfg, out, err),
            Command::Scaling => scaling(&cfg, out, err),
            Command::Plot { .. } => unreachable!("handled above"),
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
