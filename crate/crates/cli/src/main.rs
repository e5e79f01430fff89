mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use gsmnet::checkpoint::Checkpoint;
use gsmnet::data::{Dataset, StrainKind};
use gsmnet::datagen::{generate, GenerateConfig, PathConfig};
use gsmnet::eval;
use gsmnet::potentials::Mode;
use gsmnet::solver::{predict_dataset, SolverConfig};
use gsmnet::training::{train, Method, TrainConfig};
use gsmnet::{Error, Result};

use config::{resolved_path, Config};

/// Neural generalized-standard-material models for small-strain
/// viscoelasticity.
#[derive(Parser)]
#[command(name = "gsmnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration entry (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample strain paths and label them with the reference material.
    Generate {
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Gaussian stress noise standard deviation (MPa).
        #[arg(long)]
        noise: Option<f64>,
        /// Zero the out-of-plane strain components.
        #[arg(long)]
        plane_strain: bool,
        /// Constant 0.05 s increments, 250 steps unless overridden.
        #[arg(long)]
        test_path: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate potentials on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// given_q, integration, aux_fnn or aux_rnn.
        #[arg(long)]
        method: Option<String>,
        /// invariant or coordinate.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving checkpoint.json and report.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Integrate a trained model along the strain paths of a file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a response with reference stresses.
    Evaluate {
        #[arg(long)]
        response: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Use noise-free reference stresses when the file has them.
        #[arg(long)]
        ground_truth: bool,
        /// Metrics JSON output.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Correlation-plot CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, flags: Vec<(&str, Option<String>)>, allowed: &[&str]) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, v);
        }
    }
    c.apply(&common.overrides)?;
    c.check_keys(allowed)?;
    Ok(c)
}

fn s<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|x| x.to_string())
}

fn flag(on: bool) -> Option<String> {
    on.then(|| "true".to_string())
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

const GENERATE_KEYS: &[&str] = &[
    "sequences",
    "steps",
    "seed",
    "noise",
    "plane_strain",
    "test_path",
    "dt_min",
    "dt_max",
    "knot_dt_min",
    "knot_dt_max",
    "knot_std",
    "cap",
    "tolerance",
    "out",
];

fn cmd_generate(c: &Config) -> Result<()> {
    let test = c.get_or("test_path", false)?;
    let base = if test {
        PathConfig::test_path()
    } else {
        PathConfig::default()
    };
    let dflt = GenerateConfig::default();
    let path = PathConfig {
        knot_dt: (
            c.get_or("knot_dt_min", base.knot_dt.0)?,
            c.get_or("knot_dt_max", base.knot_dt.1)?,
        ),
        knot_std: c.get_or("knot_std", base.knot_std)?,
        cap: c.get_or("cap", base.cap)?,
        dt: (
            c.get_or("dt_min", base.dt.0)?,
            c.get_or("dt_max", base.dt.1)?,
        ),
        steps: c.get_or("steps", base.steps)?,
        plane_strain: c.get_or("plane_strain", base.plane_strain)?,
    };
    let cfg = GenerateConfig {
        sequences: c.get_or("sequences", dflt.sequences)?,
        path,
        noise_std: c.get_or("noise", dflt.noise_std)?,
        seed: c.get_or("seed", dflt.seed)?,
        tolerance: c.get_or("tolerance", dflt.tolerance)?,
        ..dflt
    };
    let out = c.path("out").unwrap_or_else(|_| PathBuf::from("data.json"));
    let ds = generate(&cfg)?;
    ds.write(&out)?;
    let mut r = Config::default();
    r.set("sequences", cfg.sequences);
    r.set("steps", cfg.path.steps);
    r.set("seed", cfg.seed);
    r.set("noise", cfg.noise_std);
    r.set("plane_strain", cfg.path.plane_strain);
    r.set("test_path", test);
    r.set("dt_min", cfg.path.dt.0);
    r.set("dt_max", cfg.path.dt.1);
    r.set("knot_dt_min", cfg.path.knot_dt.0);
    r.set("knot_dt_max", cfg.path.knot_dt.1);
    r.set("knot_std", cfg.path.knot_std);
    r.set("cap", cfg.path.cap);
    r.set("tolerance", cfg.tolerance);
    r.set("out", out.display());
    r.write(&resolved_path(&out))?;
    let p = &ds.provenance;
    println!(
        "{}: {} sequence(s) x {} steps, stress {}, {} strain, noise std {} MPa, seed {} -> {}",
        p.name,
        ds.sequences.len(),
        cfg.path.steps,
        p.stress,
        match p.strain {
            StrainKind::Full => "full",
            StrainKind::Plane => "plane",
        },
        p.noise_std,
        ds.seed,
        out.display()
    );
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "data",
    "method",
    "mode",
    "hidden",
    "epochs",
    "lr",
    "decay",
    "decay_interval",
    "restarts",
    "seed",
    "pretrain_epochs",
    "solver_rel_tolerance",
    "solver_max_iterations",
    "out_dir",
];

fn cmd_train(c: &Config) -> Result<()> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        method: c.get_or("method", d.method)?,
        mode: c.get_or("mode", d.mode)?,
        hidden: c.get("hidden")?,
        epochs: c.get_or("epochs", d.epochs)?,
        lr: c.get_or("lr", d.lr)?,
        decay: c.get_or("decay", d.decay)?,
        decay_interval: c.get_or("decay_interval", d.decay_interval)?,
        restarts: c.get_or("restarts", d.restarts)?,
        seed: c.get_or("seed", d.seed)?,
        pretrain_epochs: c.get_or("pretrain_epochs", d.pretrain_epochs)?,
        solver_rel_tolerance: c.get_or("solver_rel_tolerance", d.solver_rel_tolerance)?,
        solver_max_iterations: c.get_or("solver_max_iterations", d.solver_max_iterations)?,
    };
    cfg.validate()?;
    let data = c.path("data")?;
    let out_dir = c.path("out_dir").unwrap_or_else(|_| PathBuf::from("."));
    let ds = Dataset::read(&data)?;
    std::fs::create_dir_all(&out_dir)?;
    info!("training {} on {}", cfg.method, ds.provenance.name);
    let out = train(&ds, &cfg)?;
    let rep = &out.report;
    let seed = rep.restarts[rep.best_restart].seed;
    let ckpt = out_dir.join("checkpoint.json");
    Checkpoint::from_model(&out.model, seed, Some(cfg.method.to_string())).write(&ckpt)?;
    gsmnet::io::write_json(&out_dir.join("report.json"), rep)?;
    let mut r = Config::default();
    r.set("data", data.display());
    r.set("method", cfg.method);
    r.set("mode", mode_name(cfg.mode));
    if let Some(h) = cfg.hidden {
        r.set("hidden", h);
    }
    r.set("epochs", cfg.epochs);
    r.set("lr", cfg.lr);
    r.set("decay", cfg.decay);
    r.set("decay_interval", cfg.decay_interval);
    r.set("restarts", cfg.restarts);
    r.set("seed", cfg.seed);
    r.set("pretrain_epochs", cfg.pretrain_epochs);
    r.set("solver_rel_tolerance", cfg.solver_rel_tolerance);
    r.set("solver_max_iterations", cfg.solver_max_iterations);
    r.set("out_dir", out_dir.display());
    r.write(&out_dir.join("train.resolved.conf"))?;
    println!(
        "{} ({} mode): best restart {} of {}, final loss {:.4e}, {:.4} s/epoch -> {}",
        cfg.method,
        mode_name(cfg.mode),
        rep.best_restart,
        rep.restarts.len(),
        rep.final_loss,
        rep.mean_epoch_seconds(),
        ckpt.display()
    );
    Ok(())
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Invariant => "invariant",
        Mode::Coordinate => "coordinate",
    }
}

const PREDICT_KEYS: &[&str] = &[
    "checkpoint",
    "path",
    "out",
    "solver_rel_tolerance",
    "solver_max_iterations",
];

fn cmd_predict(c: &Config) -> Result<()> {
    let ckpt_path = c.path("checkpoint")?;
    let paths_file = c.path("path")?;
    let out = c
        .path("out")
        .unwrap_or_else(|_| PathBuf::from("response.json"));
    let model = Checkpoint::read(&ckpt_path)?.model()?;
    let d = TrainConfig::default();
    let rel: f64 = c.get_or("solver_rel_tolerance", d.solver_rel_tolerance)?;
    let max_it: usize = c.get_or("solver_max_iterations", d.solver_max_iterations)?;
    let s_sig = model.norm.s_sig();
    let solver = SolverConfig {
        tolerance: rel * s_sig,
        max_iterations: max_it,
        ..SolverConfig::scaled(s_sig)
    };
    let paths = Dataset::read(&paths_file)?;
    let resp = predict_dataset(&model, &paths, &solver)?;
    resp.write(&out)?;
    let mut r = Config::default();
    r.set("checkpoint", ckpt_path.display());
    r.set("path", paths_file.display());
    r.set("out", out.display());
    r.set("solver_rel_tolerance", rel);
    r.set("solver_max_iterations", max_it);
    r.write(&resolved_path(&out))?;
    let states: usize = resp.sequences.iter().map(|s| s.len()).sum();
    let worst = resp
        .sequences
        .iter()
        .flat_map(|s| s.residual.iter().flatten())
        .fold(0.0f64, |m, &x| m.max(x));
    let iters: usize = resp
        .sequences
        .iter()
        .flat_map(|s| s.iterations.iter().flatten())
        .sum();
    println!(
        "{} sequence(s), {states} states, {iters} Newton iterations, max residual {worst:.3e} MPa -> {}",
        resp.sequences.len(),
        out.display()
    );
    Ok(())
}

const EVALUATE_KEYS: &[&str] = &["response", "reference", "ground_truth", "out", "csv"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn cmd_evaluate(c: &Config) -> Result<()> {
    let resp_path = c.path("response")?;
    let ref_path = c.path("reference")?;
    let truth = c.get_or("ground_truth", false)?;
    let out = c
        .path("out")
        .unwrap_or_else(|_| PathBuf::from("metrics.json"));
    let resp = Dataset::read(&resp_path)?;
    let reference = Dataset::read(&ref_path)?;
    let m = eval::evaluate(&resp, &reference, truth)?;
    gsmnet::io::write_json(&out, &m)?;
    let csv = c.path("csv").ok();
    if let Some(p) = &csv {
        gsmnet::io::write_atomic(p, &eval::correlation_csv(&resp, &reference, truth)?)?;
    }
    let mut r = Config::default();
    r.set("response", resp_path.display());
    r.set("reference", ref_path.display());
    r.set("ground_truth", truth);
    r.set("out", out.display());
    if let Some(p) = &csv {
        r.set("csv", p.display());
    }
    r.write(&resolved_path(&out))?;
    println!(
        "MAE {:.4} MPa, normalized {}, R² {}; out-of-plane MAE {:.4} MPa{}",
        m.mae,
        fmt_opt(m.normalized_mae),
        fmt_opt(m.r2),
        m.out_of_plane.mae,
        if m.ground_truth {
            " (noise-free reference)"
        } else {
            ""
        }
    );
    Ok(())
}

fn threads() -> Result<()> {
    let Ok(v) = std::env::var("GSMNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::validation(format!(
            "GSMNET_THREADS must be a positive integer, got '{v}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    threads()?;
    match cli.command {
        Command::Generate {
            sequences,
            steps,
            seed,
            noise,
            plane_strain,
            test_path,
            out,
            common,
        } => {
            let c = load(
                &common,
                vec![
                    ("sequences", s(sequences)),
                    ("steps", s(steps)),
                    ("seed", s(seed)),
                    ("noise", s(noise)),
                    ("plane_strain", flag(plane_strain)),
                    ("test_path", flag(test_path)),
                    ("out", path_str(&out)),
                ],
                GENERATE_KEYS,
            )?;
            cmd_generate(&c)
        }
        Command::Train {
            data,
            method,
            mode,
            epochs,
            restarts,
            seed,
            out_dir,
            common,
        } => {
            if let Some(m) = &method {
                m.parse::<Method>()?;
            }
            let c = load(
                &common,
                vec![
                    ("data", path_str(&data)),
                    ("method", method),
                    ("mode", mode),
                    ("epochs", s(epochs)),
                    ("restarts", s(restarts)),
                    ("seed", s(seed)),
                    ("out_dir", path_str(&out_dir)),
                ],
                TRAIN_KEYS,
            )?;
            cmd_train(&c)
        }
        Command::Predict {
            checkpoint,
            path,
            out,
            common,
        } => {
            let c = load(
                &common,
                vec![
                    ("checkpoint", path_str(&checkpoint)),
                    ("path", path_str(&path)),
                    ("out", path_str(&out)),
                ],
                PREDICT_KEYS,
            )?;
            cmd_predict(&c)
        }
        Command::Evaluate {
            response,
            reference,
            ground_truth,
            out,
            csv,
            common,
        } => {
            let c = load(
                &common,
                vec![
                    ("response", path_str(&response)),
                    ("reference", path_str(&reference)),
                    ("ground_truth", flag(ground_truth)),
                    ("out", path_str(&out)),
                    ("csv", path_str(&csv)),
                ],
                EVALUATE_KEYS,
            )?;
            cmd_evaluate(&c)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
