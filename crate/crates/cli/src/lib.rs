//! Command implementations for the `avae` binary.
//!
//! Every command returns an exit code: 0 success, 1 usage or configuration
//! error, 2 numerical abort, 3 gradient-check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use avae_core::checkpoint;
use avae_core::config::{Mode, TrainConfig};
use avae_core::eval::{manifold_sweep, recon_eval, EvalReport, EvalSettings, Reconstructor, SweepRow, XiPolicy};
use avae_core::gradcheck::{self, GradcheckReport};
use avae_core::report;
use avae_core::tape::FaultInjection;
use avae_core::toy::{generate_toy_batch, ToySample, ToySource};
use avae_core::train::{continue_run, CheckpointPlan, Models, StepRecord, TrainError, Trainer};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_GRADCHECK: u8 = 3;

/// Held-out samples used for the end-of-run report in `train` and `compare`.
pub const REPORT_SAMPLES: usize = 2_000;
/// Number of sampled ξ traces written to a sweep besides the ξ = 0 trace.
pub const SWEEP_XI_DRAWS: usize = 8;

// Stream layout for evaluation randomness, per seed.
const TEST_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const SWEEP_STREAM: u64 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "avae",
    version,
    about = "Adversarial variational auto-encoder on a 2-D toy distribution"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a config file; writes losses.csv, checkpoints and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes eval.csv and sweep.csv.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupts one derivative rule (testing aid).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train a VAE and an AVAE from one config and compare them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { ckpt, n, seed, out } => cmd_eval(&ckpt, n, seed, &out),
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(seed, inject_fault.as_deref()),
        Command::Compare { config, out } => cmd_compare(&config, &out),
    }
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    TrainConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The network that maps codes back to data space for a run's mode.
pub fn reconstructor<'m>(config: &TrainConfig, models: &'m Models) -> Reconstructor<'m> {
    match config.mode {
        Mode::Vae => Reconstructor::Decoder(&models.decoder),
        Mode::Avae => Reconstructor::Generator(&models.generator),
    }
}

/// Held-out test set for a seed, independent of every training stream.
pub fn test_set(seed: u64, n: usize) -> Vec<ToySample> {
    generate_toy_batch(n, &mut stream_rng(seed, TEST_STREAM))
}

pub fn evaluate(config: &TrainConfig, models: &Models, test: &[ToySample], seed: u64) -> Result<EvalReport> {
    let mut rng = stream_rng(seed, EVAL_STREAM);
    Ok(recon_eval(
        &models.encoder,
        reconstructor(config, models),
        test,
        &EvalSettings::default(),
        &mut rng,
    )?)
}

/// ξ = 0 trace (index 0) plus, for a generator with ξ inputs, sampled traces.
pub fn sweep(config: &TrainConfig, models: &Models, seed: u64) -> Result<Vec<SweepRow>> {
    let source = reconstructor(config, models);
    let mut rng = stream_rng(seed, SWEEP_STREAM);
    let mut rows = manifold_sweep(source, config.dim_z, XiPolicy::Zero, &mut rng)?;
    if config.mode == Mode::Avae && config.use_xi {
        rows.extend(manifold_sweep(
            source,
            config.dim_z,
            XiPolicy::Sampled { draws: SWEEP_XI_DRAWS },
            &mut rng,
        )?);
    }
    Ok(rows)
}

/// Plain-text `key = value` manifest.
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new() -> Self {
        let mut m = Self { lines: Vec::new() };
        m.set("build", format!("avae {}", env!("CARGO_PKG_VERSION")));
        m
    }

    fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    fn report(&mut self, prefix: &str, r: &EvalReport) {
        self.set(
            format!("{prefix}.mean_manifold_distance"),
            report::fmt_f64(r.mean_manifold_distance),
        );
        self.set(
            format!("{prefix}.mean_log_density"),
            report::fmt_f64(r.mean_log_density),
        );
        self.set(format!("{prefix}.recon_mse"), report::fmt_f64(r.recon_mse));
        self.set(format!("{prefix}.branch_coverage"), report::fmt_f64(r.branch_coverage));
        self.set(format!("{prefix}.sample_count"), r.sample_count);
    }

    fn outputs(&mut self, files: &[PathBuf]) {
        for (i, f) in files.iter().enumerate() {
            self.set(format!("output.{i}"), f.display());
        }
    }

    fn render(&self) -> String {
        self.lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Outcome of one training run written to disk.
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub models: Models,
    pub files: Vec<PathBuf>,
    pub log: Vec<StepRecord>,
}

/// Trains into `out`, writing `config.txt`, `losses.csv` and checkpoints.
/// On a numerical abort the log up to the failure is still written.
pub fn train_into(config: &TrainConfig, out: &Path) -> Result<RunArtifacts, Failure> {
    create_dir(out)?;
    let mut files = vec![write(&out.join("config.txt"), config.to_text())?];
    let plan = CheckpointPlan { dir: out.to_path_buf() };
    let mut log = Vec::new();
    let trainer = Trainer::new(config.clone()).map_err(|e| fail(EXIT_NUMERICAL)(e.into()))?;
    let result = continue_run(trainer, &mut ToySource, Some(&plan), |r| log.push(*r));
    let losses = out.join("losses.csv");
    write(&losses, report::losses_csv(&log))?;
    files.push(losses);
    match result {
        Ok(run) => {
            files.extend(run.checkpoints);
            Ok(RunArtifacts {
                config: config.clone(),
                models: run.trainer.models,
                files,
                log,
            })
        }
        Err(e @ TrainError::Checkpoint(_)) => Err(fail(EXIT_CONFIG)(e.into())),
        Err(e) => Err(fail(EXIT_NUMERICAL)(anyhow::Error::from(e).context(format!(
            "training aborted; state before the failing step saved to {}",
            plan.last_good_path().display()
        )))),
    }
}

pub fn cmd_train(config_path: &Path, out: &Path) -> Result<(), Failure> {
    let config = load_config(config_path)?;
    let started = unix_time();
    let run = train_into(&config, out)?;
    let seed = config.seed;
    let report = evaluate(&config, &run.models, &test_set(seed, REPORT_SAMPLES), seed)?;
    let mut m = Manifest::new();
    m.set("command", "train");
    m.set("config_file", config_path.display());
    m.set("config_snapshot", out.join("config.txt").display());
    m.set("started_unix", format!("{started:.3}"));
    m.set("finished_unix", format!("{:.3}", unix_time()));
    m.set("iterations", run.log.len());
    m.outputs(&run.files);
    m.report("final", &report);
    write(&out.join("manifest.txt"), m.render())?;
    Ok(())
}

pub fn cmd_eval(ckpt: &Path, n: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    if n == 0 {
        return Err(anyhow::anyhow!("--n must be at least 1").into());
    }
    let trainer = checkpoint::load(ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    create_dir(out)?;
    let test = test_set(seed, n);
    let report = evaluate(&trainer.config, &trainer.models, &test, seed)?;
    write(&out.join("eval.csv"), report::eval_csv(&report))?;
    let rows = sweep(&trainer.config, &trainer.models, seed)?;
    write(&out.join("sweep.csv"), report::sweep_csv(&rows))?;
    println!(
        "distance {:.6}  log-density {:.4}  mse {:.4}  coverage {:.4}  n {}",
        report.mean_manifold_distance,
        report.mean_log_density,
        report.recon_mse,
        report.branch_coverage,
        report.sample_count
    );
    Ok(())
}

const FAULT_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "relu",
    "leaky_relu",
    "sigmoid",
    "exp",
    "log",
    "square",
    "sqrt",
    "erf",
    "softplus",
    "clamp_max",
    "scale",
    "offset",
    "sum",
    "mean",
    "concat_cols",
];

pub fn print_gradcheck(report: &GradcheckReport) {
    println!("gradcheck seed {} (dim_z {})", report.seed, report.dim_z);
    for e in &report.entries {
        let status = if e.max_rel_error < gradcheck::TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "{:<8} max_rel_error {:.3e}  worst {}  params {}  {status}",
            e.objective.name(),
            e.max_rel_error,
            e.worst,
            e.checked
        );
    }
}

pub fn cmd_gradcheck(seed: u64, inject_fault: Option<&str>) -> Result<(), Failure> {
    let fault = match inject_fault {
        None => None,
        Some(name) => {
            let op = FAULT_OPS
                .iter()
                .find(|&&o| o == name)
                .ok_or_else(|| anyhow::anyhow!("unknown primitive `{name}`"))?;
            Some(FaultInjection { op, factor: 1.5 })
        }
    };
    let report = gradcheck::run_gradcheck(seed, fault).map_err(|e| fail(EXIT_GRADCHECK)(e.into()))?;
    print_gradcheck(&report);
    if let Some(worst) = report.failures().next() {
        return Err(fail(EXIT_GRADCHECK)(anyhow::anyhow!(
            "gradient mismatch in {} at {} (relative error {:.3e})",
            worst.objective.name(),
            worst.worst,
            worst.max_rel_error
        )));
    }
    Ok(())
}

/// Both evaluation reports of a comparison.
pub struct Comparison {
    pub vae: EvalReport,
    pub avae: EvalReport,
}

/// Trains the plain VAE (the same config with `mode = vae`) and the AVAE
/// under `out/vae` and `out/avae`, then scores both on one test set.
pub fn compare_into(config: &TrainConfig, out: &Path) -> Result<(Comparison, Vec<PathBuf>), Failure> {
    let vae_cfg = TrainConfig {
        mode: Mode::Vae,
        ..config.clone()
    };
    let avae_cfg = TrainConfig {
        mode: Mode::Avae,
        ..config.clone()
    };
    let vae = train_into(&vae_cfg, &out.join("vae"))?;
    let avae = train_into(&avae_cfg, &out.join("avae"))?;
    let test = test_set(config.seed, REPORT_SAMPLES);
    let cmp = Comparison {
        vae: evaluate(&vae_cfg, &vae.models, &test, config.seed)?,
        avae: evaluate(&avae_cfg, &avae.models, &test, config.seed)?,
    };
    let mut files = vae.files;
    files.extend(avae.files);
    Ok((cmp, files))
}

pub fn cmd_compare(config_path: &Path, out: &Path) -> Result<(), Failure> {
    let config = load_config(config_path)?;
    let started = unix_time();
    create_dir(out)?;
    let (cmp, mut files) = compare_into(&config, out)?;
    files.push(write(
        &out.join("compare.csv"),
        report::compare_csv(&cmp.vae, &cmp.avae),
    )?);
    let margins = report::margins(&cmp.vae, &cmp.avae);
    let mut m = Manifest::new();
    m.set("command", "compare");
    m.set("config_file", config_path.display());
    m.set("started_unix", format!("{started:.3}"));
    m.set("finished_unix", format!("{:.3}", unix_time()));
    m.outputs(&files);
    m.report("vae", &cmp.vae);
    m.report("avae", &cmp.avae);
    m.set("density_ratio", report::fmt_f64(margins.density_ratio));
    m.set(
        "manifold_distance_margin",
        report::fmt_f64(margins.manifold_distance_margin),
    );
    write(&out.join("manifest.txt"), m.render())?;
    println!(
        "density ratio {:.4}  distance margin {:.6}",
        margins.density_ratio, margins.manifold_distance_margin
    );
    Ok(())
}
