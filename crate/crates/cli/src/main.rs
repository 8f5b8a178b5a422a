use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use pcinterp::checkpoint;
use pcinterp::eval::{copy_frame0_baseline, evaluate, EmdMode, MetricsReport};
use pcinterp::io::{read_cloud, write_cloud};
use pcinterp::kernels::{resample, Resampled};
use pcinterp::model::FastPci;
use pcinterp::params::ParamStore;
use pcinterp::selfcheck::{self, Precision, SelfCheckOptions};
use pcinterp::synth::{read_sequence, write_sequence, Sequence};
use pcinterp::tensor::Real;
use pcinterp::train::{train, write_run_files, RunConfig};
use pcinterp::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pcinterp", version, about = "Point cloud frame interpolation")]
struct Cli {
    /// JSON run configuration (model, train, loss, data sections)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and data.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Parameter precision for training and inference; also sets selfcheck tolerances
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Repeat for more log output
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset as train/ and test/ sequence directories
    Synth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Overrides data.n_train
        #[arg(long)]
        n_train: Option<usize>,
        /// Overrides data.n_test
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train a model and write model.fpci, loss_curve.csv, config.json and manifest.json
    Train {
        /// Run directory
        #[arg(long)]
        out: PathBuf,
        /// Dataset written by `synth` (default: generate from the config)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides train.epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides train.max_steps
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Interpolate the frame at time t between two clouds
    Interp {
        /// Model checkpoint (.fpci)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame at time 0 (.xyz or .bin)
        #[arg(long)]
        pc0: PathBuf,
        /// Frame at time 1 (.xyz or .bin)
        #[arg(long)]
        pc1: PathBuf,
        /// Interpolation time, strictly between 0 and 1
        #[arg(long, allow_negative_numbers = true)]
        t: f64,
        /// Output cloud (.xyz or .bin)
        #[arg(long)]
        out: PathBuf,
        /// Seed of the fusion anchor sampling
        #[arg(long, default_value_t = 0)]
        fusion_seed: u64,
    },
    /// Score a checkpoint on held-out sequences and write the metrics CSV
    Eval {
        /// Model checkpoint (.fpci)
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Dataset written by `synth` (default: the config's test split)
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV destination (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave the EMD column empty
        #[arg(long)]
        no_emd: bool,
        /// Score the copy-frame-0 baseline instead of a model
        #[arg(long)]
        baseline: bool,
    },
    /// Run the built-in verification suite
    Selfcheck {
        /// Corrupt the checkpoint CRC before the load check
        #[arg(long)]
        corrupt_checkpoint: bool,
    },
    /// Report parameter counts per module
    Params {
        /// Name components to group by
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
}

enum Failure {
    /// A verification step reported failure.
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(format!("--threads {n}: {e}")))?;
    }
    let precision = match cli.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    let explicit = cli.config.is_some();
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    match cli.cmd {
        Command::Synth { out, n_train, n_test } => {
            cfg.data.n_train = n_train.unwrap_or(cfg.data.n_train);
            cfg.data.n_test = n_test.unwrap_or(cfg.data.n_test);
            synth(&cfg, &out)
        }
        Command::Train {
            out,
            data,
            epochs,
            max_steps,
        } => {
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.max_steps = max_steps.or(cfg.train.max_steps);
            match precision {
                Precision::F32 => train_cmd::<f32>(&cfg, data.as_deref(), &out),
                Precision::F64 => train_cmd::<f64>(&cfg, data.as_deref(), &out),
            }
        }
        Command::Interp {
            checkpoint,
            pc0,
            pc1,
            t,
            out,
            fusion_seed,
        } => {
            let cfg = checkpoint_config(cfg, explicit, &checkpoint)?;
            match precision {
                Precision::F32 => interp::<f32>(&cfg, &checkpoint, &pc0, &pc1, t, &out, fusion_seed),
                Precision::F64 => interp::<f64>(&cfg, &checkpoint, &pc0, &pc1, t, &out, fusion_seed),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            no_emd,
            baseline,
        } => {
            let cfg = match &checkpoint {
                Some(c) => checkpoint_config(cfg, explicit, c)?,
                None => cfg,
            };
            let test = match &data {
                Some(dir) => read_split(dir, "test")?,
                None => cfg.data.dataset()?.test_iter().collect::<pcinterp::Result<_>>()?,
            };
            let emd = if no_emd { EmdMode::Off } else { EmdMode::Auto };
            let report = match (baseline, &checkpoint) {
                (true, _) | (false, None) => copy_frame0_baseline(&test, emd)?,
                (false, Some(c)) => match precision {
                    Precision::F32 => eval_checkpoint::<f32>(&cfg, c, &test, emd)?,
                    Precision::F64 => eval_checkpoint::<f64>(&cfg, c, &test, emd)?,
                },
            };
            match out {
                Some(p) => report.write_csv(p)?,
                None => print!("{}", report.to_csv()),
            }
            Ok(())
        }
        Command::Selfcheck { corrupt_checkpoint } => {
            let report = selfcheck::run(&SelfCheckOptions {
                precision,
                corrupt_checkpoint,
            });
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Check("selfcheck failed".into()))
            }
        }
        Command::Params { depth } => {
            let mut store = ParamStore::<f32>::new();
            FastPci::new(&mut store, &cfg.model, 0)?;
            for (name, n) in store.count_by_prefix(depth) {
                println!("{name:<40} {n:>10}");
            }
            println!("{:<40} {:>10}", "total", store.num_scalars());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(pcinterp::error::io_err(path))?;
    RunConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Failure::Run(Error::Config(format!("{}: {msg}", path.display()))),
        e => Failure::Run(e),
    })
}

/// Without `--config`, a `config.json` next to the checkpoint describes its model.
fn checkpoint_config(cfg: RunConfig, explicit: bool, ckpt: &Path) -> CliResult<RunConfig> {
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join("config.json");
    if explicit || !beside.exists() {
        return Ok(cfg);
    }
    let mut found = load_config(Some(&beside))?;
    found.train.seed = cfg.train.seed;
    found.data.seed = cfg.data.seed;
    Ok(found)
}

#[derive(Serialize)]
struct DatasetManifest {
    seed: u64,
    train: Vec<u64>,
    test: Vec<u64>,
}

fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let ds = cfg.data.dataset()?;
    for (split, seeds) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, &seed) in seeds.iter().enumerate() {
            let spec = ds.template.sample(seed)?;
            let seq = pcinterp::synth::generate(&spec)?;
            write_sequence(out.join(split).join(format!("seq_{i:04}")), &spec, &seq)?;
        }
    }
    let manifest = DatasetManifest {
        seed: cfg.data.seed,
        train: ds.train.clone(),
        test: ds.test.clone(),
    };
    write_json(&out.join("dataset.json"), &manifest)?;
    info!("wrote {} train and {} test sequences to {}", ds.train.len(), ds.test.len(), out.display());
    Ok(())
}

/// Sequences in `dir/<split>/*`, in name order.
fn read_split(dir: &Path, split: &str) -> CliResult<Vec<Sequence>> {
    let root = dir.join(split);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(pcinterp::error::io_err(&root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Argument(format!("{} contains no sequences", root.display())).into());
    }
    Ok(dirs.iter().map(|d| read_sequence(d).map(|(_, s)| s)).collect::<pcinterp::Result<_>>()?)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(pcinterp::error::io_err(path))?;
    Ok(())
}

#[derive(Serialize)]
struct RunManifest {
    steps: usize,
    final_loss: Option<f64>,
    /// Held-out average CD of the trained model.
    test_cd: f64,
    /// Held-out average CD of copying frame 0.
    baseline_cd: f64,
}

fn train_cmd<T: Real>(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> CliResult<()> {
    let (train_set, test_set) = match data {
        Some(dir) => (read_split(dir, "train")?, read_split(dir, "test")?),
        None => {
            let ds = cfg.data.dataset()?;
            (
                ds.train_iter().collect::<pcinterp::Result<Vec<_>>>()?,
                ds.test_iter().collect::<pcinterp::Result<Vec<_>>>()?,
            )
        }
    };
    fs::create_dir_all(out).map_err(pcinterp::error::io_err(out))?;
    let every = cfg.train.checkpoint_every;
    let mut hook = |epoch: usize, store: &ParamStore<T>| {
        if every.is_some_and(|k| k > 0 && (epoch + 1).is_multiple_of(k)) {
            checkpoint::save(out.join(format!("epoch_{:04}.fpci", epoch + 1)), store)?;
        }
        Ok(())
    };
    let run = train::<T>(cfg, &train_set, Some(&mut hook))?;
    checkpoint::save(out.join("model.fpci"), &run.store)?;
    write_run_files(out, cfg, &run.curve)?;
    let test = evaluate(&run.model, &run.store, &test_set, EmdMode::Off)?;
    let base = copy_frame0_baseline(&test_set, EmdMode::Off)?;
    let manifest = RunManifest {
        steps: run.steps,
        final_loss: run.curve.last().map(|r| r.total),
        test_cd: test.average().cd,
        baseline_cd: base.average().cd,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "{} steps; held-out CD {:.6} (copy-frame-0 {:.6})",
        run.steps, manifest.test_cd, manifest.baseline_cd
    );
    Ok(())
}

fn load_model<T: Real>(cfg: &RunConfig, ckpt: &Path) -> CliResult<(FastPci, ParamStore<T>)> {
    let saved = checkpoint::load(ckpt)?;
    let mut store = ParamStore::<T>::new();
    let model = FastPci::new(&mut store, &cfg.model, 0)?;
    store
        .load_from(&saved)
        .map_err(|e| Error::Checkpoint(format!("{} does not match the model config: {e}", ckpt.display())))?;
    Ok((model, store))
}

fn interp<T: Real>(cfg: &RunConfig, ckpt: &Path, pc0: &Path, pc1: &Path, t: f64, out: &Path, fusion_seed: u64) -> CliResult<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Argument(format!("t = {t} is outside (0, 1)")).into());
    }
    let (model, store) = load_model::<T>(cfg, ckpt)?;
    let l = cfg.model.points;
    let mut frames = Vec::new();
    for path in [pc0, pc1] {
        let (pc, how) = resample(&read_cloud(path)?, l)?;
        match how {
            Resampled::Unchanged => {}
            Resampled::Subsampled => info!("{}: reduced to {l} points by FPS", path.display()),
            Resampled::Duplicated => warn!("{}: fewer than {l} points, padded by duplication", path.display()),
        }
        frames.push(pc);
    }
    let result = model.interpolate(&store, &frames[0], &frames[1], t, fusion_seed)?;
    write_cloud(out, &result.final_cloud)?;
    Ok(())
}

fn eval_checkpoint<T: Real>(cfg: &RunConfig, ckpt: &Path, test: &[Sequence], emd: EmdMode) -> CliResult<MetricsReport> {
    let (model, store) = load_model::<T>(cfg, ckpt)?;
    Ok(evaluate(&model, &store, test, emd)?)
}
