use clap::{Parser, Subcommand};
use rsvio_cli::exit;
use rsvio_cli::manifest::RunManifest;
use rsvio_cli::run::{run_dataset, write_state_log, STATE_LOG_FILE, TRAJECTORY_FILE};
use rsvio_cli::selftest;
use rsvio_core::backend::config::{OdometryConfig, ShutterMode};
use rsvio_dataset::{load_dataset, read_trajectory, write_trajectory, ImageOptions};
use rsvio_eval::{ate, emit_plots, metric_consistency, path_length, RunMetadata};
use rsvio_sim::{SimSpec, Simulation};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "rsvio", version, about = "Rolling-shutter visual-inertial odometry")]
struct Cli {
    /// Worker count recorded in the run manifest. Accumulation is sequential
    /// in a fixed order, so results never depend on it.
    #[arg(long, global = true, env = "RSVIO_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a trajectory from a dataset directory.
    Run {
        dataset: PathBuf,
        /// Estimator configuration (TOML); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `rs` or `gs-assume`.
        #[arg(long)]
        mode: Option<ShutterMode>,
        #[arg(long)]
        out: PathBuf,
        /// Accept 8-bit images (scaled as 0..255).
        #[arg(long)]
        allow_8bit: bool,
    },
    /// Generate a synthetic dataset.
    Simulate {
        /// Simulation spec (TOML). Without it the 320x256 rig is used.
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the sequence length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Also export the global-shutter stream.
        #[arg(long)]
        gs: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Absolute trajectory error of an estimate against a reference.
    Eval {
        estimate: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Check the math, Jacobians, preintegration, marginalization and
    /// evaluation routines against independent oracles.
    Selftest,
}

struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| fail(exit::USAGE, format!("{}: {e}", path.display())))
}

fn cmd_run(
    m: &mut RunManifest,
    dataset: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    mode: Option<ShutterMode>,
    out: &Path,
    allow_8bit: bool,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => {
            OdometryConfig::from_toml(&read_text(p)?).map_err(|e| fail(exit::USAGE, format!("{}: {e}", p.display())))?
        }
        None => OdometryConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(md) = mode {
        cfg.mode = md;
    }
    m.config = serde_json::to_value(&cfg).map_err(|e| fail(exit::USAGE, e))?;
    m.seed = Some(cfg.seed);
    m.inputs.push(dataset.to_path_buf());
    m.inputs.extend(config.map(Path::to_path_buf));
    let index = load_dataset(dataset, ImageOptions { allow_8bit }).map_err(|e| fail(exit::DATA, e))?;
    let result = run_dataset(&index, &cfg).map_err(|e| fail(exit::DATA, e))?;
    std::fs::create_dir_all(out).map_err(|e| fail(exit::DATA, format!("{}: {e}", out.display())))?;
    let traj_path = out.join(TRAJECTORY_FILE);
    write_trajectory(&traj_path, &result.trajectory()).map_err(|e| fail(exit::DATA, e))?;
    let log_path = out.join(STATE_LOG_FILE);
    write_state_log(&log_path, &result.keyframes).map_err(|e| fail(exit::DATA, e))?;
    m.outputs = vec![traj_path, log_path];
    m.summary = serde_json::json!({
        "frames": result.stats.frames,
        "keyframes": result.stats.keyframes,
        "skipped_frames": result.stats.skipped,
        "prior_switches": result.stats.prior_switches,
        "final_scale": result.scale_gravity.map(|sg| sg.scale()),
    });
    if let Some(e) = result.failure {
        return Err(fail(exit::DIVERGED, e));
    }
    Ok(())
}

fn cmd_simulate(
    m: &mut RunManifest,
    spec: Option<&Path>,
    out: &Path,
    duration: Option<f64>,
    gs: bool,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut s = match spec {
        Some(p) => {
            SimSpec::from_toml(&read_text(p)?).map_err(|e| fail(exit::USAGE, format!("{}: {e}", p.display())))?
        }
        None => SimSpec::small(duration.unwrap_or(20.0)),
    };
    if let Some(d) = duration {
        if spec.is_some() {
            s.duration = d;
        }
    }
    s.gs_stream |= gs;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    m.config = serde_json::to_value(&s).map_err(|e| fail(exit::USAGE, e))?;
    m.seed = Some(s.seed);
    m.inputs.extend(spec.map(Path::to_path_buf));
    let sim = Simulation::new(s).map_err(|e| fail(exit::USAGE, e))?;
    m.outputs = sim.export(out).map_err(|e| fail(exit::DATA, e))?;
    Ok(())
}

fn cmd_eval(m: &mut RunManifest, est: &Path, gt: &Path, out: Option<&Path>, label: &str) -> Result<(), Failure> {
    m.inputs = vec![est.to_path_buf(), gt.to_path_buf()];
    let e = read_trajectory(est).map_err(|e| fail(exit::DATA, e))?;
    let g = read_trajectory(gt).map_err(|e| fail(exit::DATA, e))?;
    let meta = RunMetadata {
        label: label.to_string(),
        ..RunMetadata::default()
    };
    let report = ate(&e, &g, meta).map_err(|e| fail(exit::DATA, e))?;
    let length = path_length(&g);
    let consistency = metric_consistency(&e, &g).map_err(|e| fail(exit::DATA, e))?;
    println!(
        "e_ate = {} m ({} keyframes, {} unmatched)",
        report.e_ate,
        report.errors.len(),
        report.unmatched
    );
    println!("reference length = {length} m");
    println!("similarity scale = {}", consistency.scale);
    println!("gravity error = {} deg", consistency.gravity_angle.to_degrees());
    m.summary = serde_json::json!({
        "e_ate": report.e_ate,
        "matched": report.errors.len(),
        "unmatched": report.unmatched,
        "reference_length": length,
        "similarity_scale": consistency.scale,
        "gravity_error_rad": consistency.gravity_angle,
    });
    if let Some(out) = out {
        m.outputs = emit_plots(std::slice::from_ref(&report), None, out).map_err(|e| fail(exit::DATA, e))?;
    }
    Ok(())
}

fn cmd_selftest(m: &mut RunManifest) -> Result<(), Failure> {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    m.summary = serde_json::json!({ "checks": checks.len(), "failed": failed });
    if failed > 0 {
        return Err(fail(
            exit::SELFTEST,
            format!("{failed} of {} checks failed", checks.len()),
        ));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let start = Instant::now();
    let (name, manifest_dir) = match &cli.command {
        Command::Run { out, .. } => ("run", Some(out.clone())),
        Command::Simulate { out, .. } => ("simulate", Some(out.clone())),
        Command::Eval { out, .. } => ("eval", out.clone()),
        Command::Selftest => ("selftest", None),
    };
    let mut m = RunManifest::new(name);
    m.workers = cli.workers.max(1);
    let result = match &cli.command {
        Command::Run {
            dataset,
            config,
            seed,
            mode,
            out,
            allow_8bit,
        } => cmd_run(&mut m, dataset, config.as_deref(), *seed, *mode, out, *allow_8bit),
        Command::Simulate {
            spec,
            out,
            duration,
            gs,
            seed,
        } => cmd_simulate(&mut m, spec.as_deref(), out, *duration, *gs, *seed),
        Command::Eval {
            estimate,
            reference,
            out,
            label,
        } => cmd_eval(&mut m, estimate, reference, out.as_deref(), label),
        Command::Selftest => cmd_selftest(&mut m),
    };
    let code = match &result {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if m.summary.is_null() {
                m.summary = serde_json::json!({ "error": f.message });
            } else if let Some(obj) = m.summary.as_object_mut() {
                obj.insert("error".into(), f.message.clone().into());
            }
            f.code
        }
    };
    m.exit_status = code;
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = manifest_dir {
        if let Err(e) = m.write(&dir) {
            eprintln!("error: cannot write run manifest: {e}");
        }
    }
    std::process::exit(code);
}
