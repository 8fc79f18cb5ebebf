//! The `dvs` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 servo run finished without converging.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{generate_dataset, load_dataset, write_dataset};
use crate::nn::{init_parameters, load_parameters, save_parameters};
use crate::servo::{
    difference_image, normalize_for_sad, run_servo, run_servo_with, Controller, Plant, ServoContext, ServoTrace,
};
use crate::train::{evaluate_mse, train, TrainError, TrainingSet};

pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.cnnp";
pub const LAST_GOOD_CHECKPOINT_FILE: &str = "model.last_good.cnnp";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const AGGREGATE_FILE: &str = "aggregate.txt";

#[derive(Debug, Parser)]
#[command(
    name = "dvs",
    version,
    about = "Deep direct visual servoing of a simulated continuum robot"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// Run configuration; every key not given takes its default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render, augment and label the spiral dataset.
    GenDataset(CommonArgs),
    /// Train the regressor on a generated dataset.
    Train(CommonArgs),
    /// Run one closed-loop servo experiment.
    Servo(CommonArgs),
    /// Run every start point for several seeds and summarise.
    Eval(CommonArgs),
    /// Write the target texture and the home view as PNGs.
    Texture(CommonArgs),
    /// Print every config key with its default.
    Keys,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
    #[error("servo did not converge within {0} iterations")]
    NotConverged(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::NotConverged(_) => 3,
        }
    }
}

fn runtime(context: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn prepare(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    write_file(&args.out.join(CONFIG_ECHO), cfg.to_text())?;
    Ok(cfg)
}

pub fn cmd_gen_dataset(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scene = cfg.scene()?;
    let dataset = generate_dataset(&scene, &cfg.dataset_config()).map_err(|e| runtime("dataset")(&e))?;
    let header: Vec<(String, String)> = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    write_dataset(&dataset, &header, out).map_err(|e| runtime("writing dataset")(&e))?;
    eprintln!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (dataset, _) = load_dataset(Path::new(&cfg.dataset_dir)).map_err(|e| runtime("loading dataset")(&e))?;
    if dataset.input_size != cfg.input_size {
        return Err(CliError::Runtime(format!(
            "dataset images are {0}x{0} but net.input_size is {1}",
            dataset.input_size, cfg.input_size
        )));
    }
    let spec = cfg.network_spec();
    let set = TrainingSet::from_dataset(&dataset);
    let init = init_parameters(&spec, cfg.seed).map_err(|e| runtime("init")(&e))?;
    let result = train(&spec, init, &set, &cfg.train_config(), |e| {
        eprintln!("epoch {:>4}  loss {:.6e}  {:.1} s", e.epoch, e.mean_loss, e.seconds);
        std::ops::ControlFlow::Continue(())
    });
    match result {
        Ok((params, log)) => {
            save_parameters(&params, &out.join(CHECKPOINT_FILE)).map_err(|e| runtime("saving checkpoint")(&e))?;
            write_file(&out.join(TRAINING_LOG_FILE), log.to_csv())?;
            let mse = evaluate_mse(&spec, &params, &set).map_err(|e| runtime("evaluation")(&e))?;
            println!("final train MSE {mse:.6e}");
            Ok(())
        }
        Err(TrainError::NonFiniteLoss {
            epoch,
            last_good_epoch,
            last_good,
        }) => {
            save_parameters(&last_good, &out.join(LAST_GOOD_CHECKPOINT_FILE))
                .map_err(|e| runtime("saving checkpoint")(&e))?;
            Err(CliError::Runtime(format!(
                "loss became non-finite in epoch {epoch}; last good epoch {last_good_epoch} saved to {LAST_GOOD_CHECKPOINT_FILE}"
            )))
        }
        Err(e) => Err(runtime("training")(&e)),
    }
}

struct Loaded {
    cfg: RunConfig,
    scene: crate::render::PlanarScene,
    spec: crate::nn::NetworkSpec,
    params: crate::nn::ParameterSet<f32>,
}

impl Loaded {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let spec = cfg.network_spec();
        let params = load_parameters(&spec, Path::new(&cfg.checkpoint))
            .map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", cfg.checkpoint)))?;
        Ok(Self {
            cfg: cfg.clone(),
            scene: cfg.scene()?,
            spec,
            params,
        })
    }

    fn context(&self) -> Result<ServoContext<'_>, CliError> {
        let plant = Plant {
            scene: &self.scene,
            geometry: self.cfg.geometry(),
            intrinsics: self.cfg.intrinsics(),
        };
        let controller = Controller {
            spec: &self.spec,
            params: &self.params,
        };
        ServoContext::new(
            plant,
            controller,
            self.cfg.servo_config(),
            self.cfg.perturbation_config(),
        )
        .map_err(|e| runtime("servo setup")(&e))
    }
}

pub fn cmd_servo(cfg: &RunConfig, out: &Path) -> Result<ServoTrace, CliError> {
    let start = *cfg.start.0.first().ok_or_else(|| {
        CliError::Config(ConfigError::Invalid {
            key: "servo.start",
            message: "`servo` needs at least one start point".into(),
        })
    })?;
    let loaded = Loaded::new(cfg)?;
    let ctx = loaded.context()?;
    let frames = out.join("frames");
    if cfg.frame_every > 0 {
        fs::create_dir_all(&frames).map_err(|e| runtime("frames")(&e))?;
    }
    let mut frame_error = None;
    let trace = run_servo_with(&ctx, start, cfg.seed, 0, |record, frame| {
        if cfg.frame_every == 0 || record.iteration % cfg.frame_every != 0 || frame_error.is_some() {
            return;
        }
        let view = frames.join(format!("view_{:04}.png", record.iteration));
        let saved = frame.save_png(&view).map_err(|e| e.to_string()).and_then(|_| {
            let diff = normalize_for_sad(frame)
                .and_then(|n| difference_image(&n, &ctx.target))
                .map_err(|e| e.to_string())?;
            diff.save_png(&frames.join(format!("diff_{:04}.png", record.iteration)))
                .map_err(|e| e.to_string())
        });
        if let Err(e) = saved {
            frame_error = Some(e);
        }
    })
    .map_err(|e| runtime("servo")(&e))?;
    write_file(&out.join(TRACE_FILE), trace.to_csv())?;
    if let Some(e) = frame_error {
        return Err(CliError::Runtime(format!("writing frames: {e}")));
    }
    println!(
        "start {}:{}  converged {}  iterations {}  final q {:.4}:{:.4}",
        start.q1,
        start.q2,
        trace.converged,
        trace.records.len(),
        trace.final_q.q1,
        trace.final_q.q2
    );
    if trace.converged {
        Ok(trace)
    } else {
        Err(CliError::NotConverged(trace.records.len()))
    }
}

pub const SUMMARY_COLUMNS: &str =
    "start_q1_mm,start_q2_mm,run,converged,iterations,final_q1_mm,final_q2_mm,final_norm_inf_mm,initial_sad,final_sad";

/// Per-run summary CSV and the aggregate line of an evaluation sweep.
pub fn summarise(traces: &[(u64, ServoTrace)]) -> (String, String) {
    let mut csv = format!("{SUMMARY_COLUMNS}\n");
    for (run, t) in traces {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            t.start.q1,
            t.start.q2,
            run,
            t.converged,
            t.records.len(),
            t.final_q.q1,
            t.final_q.q2,
            t.final_q.max_abs(),
            t.initial_sad().unwrap_or(f64::NAN),
            t.final_sad().unwrap_or(f64::NAN)
        );
    }
    let converged: Vec<usize> = traces
        .iter()
        .filter(|(_, t)| t.converged)
        .map(|(_, t)| t.records.len())
        .collect();
    let rate = if traces.is_empty() {
        0.0
    } else {
        converged.len() as f64 / traces.len() as f64
    };
    let median = median(converged);
    let aggregate = format!(
        "runs={} converged={} success_rate={rate} median_iterations={}",
        traces.len(),
        traces.iter().filter(|(_, t)| t.converged).count(),
        median.map_or("none".to_string(), |m| m.to_string())
    );
    (csv, aggregate)
}

fn median(mut v: Vec<usize>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    })
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<(u64, ServoTrace)>, CliError> {
    let jobs: Vec<_> = cfg
        .start
        .0
        .iter()
        .flat_map(|&q| (0..cfg.eval_runs).map(move |run| (q, run)))
        .collect();
    let traces = if jobs.is_empty() {
        Vec::new()
    } else {
        let loaded = Loaded::new(cfg)?;
        let ctx = loaded.context()?;
        jobs.par_iter()
            .map(|&(q, run)| run_servo(&ctx, q, cfg.seed, run).map(|t| (run, t)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| runtime("servo")(&e))?
    };
    let (csv, aggregate) = summarise(&traces);
    write_file(&out.join(SUMMARY_FILE), csv)?;
    write_file(&out.join(AGGREGATE_FILE), format!("{aggregate}\n"))?;
    println!("{aggregate}");
    Ok(traces)
}

pub fn cmd_texture(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scene = cfg.scene()?;
    let save =
        |img: &crate::image::ImageBuffer, name: &str| img.save_png(&out.join(name)).map_err(|e| runtime(name)(&e));
    save(&scene.texture, "texture.png")?;
    let plant = Plant {
        scene: &scene,
        geometry: cfg.geometry(),
        intrinsics: cfg.intrinsics(),
    };
    let home = plant
        .view(crate::kinematics::TendonDisplacement::ZERO)
        .map_err(|e| runtime("render")(&e))?;
    save(&home, "home_view.png")
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dvs: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Keys => {
            print!("{}", RunConfig::documentation());
            Ok(())
        }
        Command::GenDataset(a) => cmd_gen_dataset(&prepare(a)?, &a.out),
        Command::Train(a) => cmd_train(&prepare(a)?, &a.out),
        Command::Servo(a) => cmd_servo(&prepare(a)?, &a.out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&prepare(a)?, &a.out).map(|_| ()),
        Command::Texture(a) => cmd_texture(&prepare(a)?, &a.out),
    }
}
