//! `ris`: dataset generation, training, evaluation, inference and the two
//! self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ris_core::checkpoint::{self, Checkpoint};
use ris_core::data::{self, SceneConfig};
use ris_core::gradcheck::{self, GradCheckConfig};
use ris_core::matchloss::{self, LossConfig};
use ris_core::metrics;
use ris_core::model::ModelConfig;
use ris_core::trainer::{self, LossLog, TrainConfig, Trainer};
use ris_core::{DType, Error, Real, Tensor};

/// Run configuration file. Every section is optional; flags override it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    dataset: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetConfig {
    scene: SceneConfig,
    train: usize,
    test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            train: 500,
            test: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ris", version, about = "Recurrent instance segmentation")]
struct Cli {
    /// Print progress while working.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train and test datasets under OUT/train and OUT/test.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curriculum training; writes loss.csv, stage checkpoints and final.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Largest unroll cap of the curriculum.
        #[arg(long)]
        stage_cap: Option<usize>,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
    },
    /// Metrics JSON and text table for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step masks, scores and a color composite for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the loss and the whole network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hungarian matching against exhaustive search on random matrices.
    Matchcheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(1..=8))]
        max_size: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    /// A self-check ran and did not pass.
    Verification(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generate(config: Option<&Path>, seed: Option<u64>, out: &Path, verbose: bool) -> CliResult {
    let mut cfg = load_config(config)?.dataset;
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    let train = data::generate_range(&cfg.scene, 0, cfg.train)?;
    data::save_dataset(&train, &out.join("train"))?;
    if cfg.test > 0 {
        let test = data::generate_range(&cfg.scene, cfg.train, cfg.test)?;
        data::save_dataset(&test, &out.join("test"))?;
    }
    if verbose {
        eprintln!(
            "wrote {} train and {} test samples to {}",
            cfg.train,
            cfg.test,
            out.display()
        );
    }
    Ok(())
}

fn train_typed<T: Real>(
    mut trainer: Trainer<T>,
    dataset: &Path,
    out: &Path,
    verbose: bool,
) -> CliResult {
    let samples = data::load_dataset(dataset)?;
    mkdir(out)?;
    let mut log = LossLog::create(&out.join("loss.csv"))?;
    let mut log_error = None;
    let report = trainer.run_curriculum(&samples, Some(out), |row| {
        if verbose && row.step % 100 == 0 {
            eprintln!(
                "step {} stage {} loss {:.4} lr {:e}",
                row.step, row.stage, row.loss, row.lr
            );
        }
        if log_error.is_none() {
            log_error = log.append(row).err();
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    log.finish()?;
    trainer.checkpoint().save(&out.join("final.ckpt"))?;
    write_file(
        &out.join("train_report.json"),
        &serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )?;
    if verbose {
        eprintln!(
            "finished {} steps in {} stages, final loss {:?}",
            report.steps,
            report.stages.len(),
            report.final_loss()
        );
    }
    Ok(())
}

struct TrainArgs<'a> {
    config: Option<&'a Path>,
    seed: Option<u64>,
    dataset: &'a Path,
    out: &'a Path,
    checkpoint: Option<&'a Path>,
    stage_cap: Option<usize>,
    precision: Option<Precision>,
}

fn resume<T: Real>(path: &Path, a: &TrainArgs<'_>) -> Result<Trainer<T>, Error> {
    let mut t = Trainer::from_checkpoint(Checkpoint::<T>::load(path)?)?;
    if let Some(s) = a.seed {
        t.config.seed = s;
    }
    if a.stage_cap.is_some() {
        t.config.stage_cap = a.stage_cap;
    }
    Ok(t)
}

fn train(a: TrainArgs<'_>, verbose: bool) -> CliResult {
    if let Some(path) = a.checkpoint {
        return match checkpoint::peek_dtype(path)? {
            DType::F32 => train_typed(resume::<f32>(path, &a)?, a.dataset, a.out, verbose),
            DType::F64 => train_typed(resume::<f64>(path, &a)?, a.dataset, a.out, verbose),
        };
    }
    let cfg = load_config(a.config)?;
    let mut tc = cfg.train;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if a.stage_cap.is_some() {
        tc.stage_cap = a.stage_cap;
    }
    if let Some(p) = a.precision {
        tc.precision = p.into();
    }
    match tc.precision {
        DType::F32 => train_typed(
            Trainer::<f32>::new(cfg.model, tc)?,
            a.dataset,
            a.out,
            verbose,
        ),
        DType::F64 => train_typed(
            Trainer::<f64>::new(cfg.model, tc)?,
            a.dataset,
            a.out,
            verbose,
        ),
    }
}

fn eval_typed<T: Real>(ckpt: &Path, dataset: &Path, out: Option<&Path>) -> CliResult {
    let c = Checkpoint::<T>::load(ckpt)?;
    let samples = data::load_dataset(dataset)?;
    let report = trainer::evaluate(
        &c.params,
        &c.meta.model,
        &samples,
        c.meta.train.max_inference_steps,
    )?;
    let json = report.to_json()?;
    let table = report.table();
    match out {
        Some(dir) => {
            mkdir(dir)?;
            write_file(&dir.join("metrics.json"), &json)?;
            write_file(&dir.join("metrics.txt"), &table)?;
        }
        None => println!("{json}"),
    }
    print!("{table}");
    Ok(())
}

fn eval(ckpt: &Path, dataset: &Path, out: Option<&Path>) -> CliResult {
    match checkpoint::peek_dtype(ckpt)? {
        DType::F32 => eval_typed::<f32>(ckpt, dataset, out),
        DType::F64 => eval_typed::<f64>(ckpt, dataset, out),
    }
}

/// Color of instance `id` (1-based) in emission order; background is black.
fn palette(id: usize) -> [f64; 3] {
    const COLORS: [[f64; 3]; 8] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.70, 0.20],
        [0.15, 0.35, 0.95],
        [0.95, 0.80, 0.10],
        [0.80, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.55, 0.55],
    ];
    COLORS[(id - 1) % COLORS.len()]
}

fn infer_typed<T: Real>(ckpt: &Path, image_path: &Path, out: &Path, verbose: bool) -> CliResult {
    let c = Checkpoint::<T>::load(ckpt)?;
    let image = data::read_image(image_path)?;
    if image.shape()[0] != c.meta.model.in_channels {
        return Err(Error::Contract(format!(
            "image has {} channels, model expects {}",
            image.shape()[0],
            c.meta.model.in_channels
        ))
        .into());
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let inf = trainer::infer(
        &c.params,
        &c.meta.model,
        &image.cast::<T>(),
        c.meta.train.max_inference_steps,
    )?;
    mkdir(out)?;
    let mut scores = String::new();
    for (t, (m, s)) in inf.masks.iter().zip(&inf.scores).enumerate() {
        scores.push_str(&format!("{}\n", s.as_f64()));
        if s.as_f64() >= metrics::DECISION {
            data::write_image(&out.join(format!("mask_{t}.pgm")), &m.cast::<f64>())?;
        }
    }
    write_file(&out.join("scores.txt"), &scores)?;
    let labeling = metrics::decode(&inf.sequence(), h, w)?;
    let mut composite = vec![0.0; 3 * h * w];
    for (i, &l) in labeling.labels.iter().enumerate() {
        if l > 0 {
            let rgb = palette(l as usize);
            for ch in 0..3 {
                composite[ch * h * w + i] = rgb[ch];
            }
        }
    }
    data::write_image(
        &out.join("composite.ppm"),
        &Tensor::from_vec(&[3, h, w], composite)?,
    )?;
    if verbose {
        eprintln!(
            "{} instances, scores {:?}",
            labeling.count,
            inf.scores.iter().map(|s| s.as_f64()).collect::<Vec<_>>()
        );
    }
    println!("{}", labeling.count);
    Ok(())
}

fn infer(ckpt: &Path, image: &Path, out: &Path, verbose: bool) -> CliResult {
    match checkpoint::peek_dtype(ckpt)? {
        DType::F32 => infer_typed::<f32>(ckpt, image, out, verbose),
        DType::F64 => infer_typed::<f64>(ckpt, image, out, verbose),
    }
}

fn gradcheck_cmd(seed: u64, out: Option<&Path>) -> CliResult {
    let (pred, labels) = gradcheck::random_loss_problem(seed, 8, 3, 5)?;
    let loss = gradcheck::check_loss(
        &pred,
        &labels,
        &LossConfig::default(),
        &GradCheckConfig::default(),
    )?;
    let p = gradcheck::tiny_problem(seed, 9, 4, 0.3)?;
    let net = gradcheck::check_model(
        &p.params,
        &p.model,
        &p.image,
        &p.labels,
        2,
        &LossConfig::default(),
        &GradCheckConfig::network(),
    )?;
    for (name, r) in [("loss", &loss), ("network", &net)] {
        println!(
            "{name}: {} gradients, worst relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}) {}",
            r.checked,
            r.worst_relative,
            r.worst_at,
            r.worst_analytic,
            r.worst_numeric,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        mkdir(dir)?;
        let json = serde_json::json!({ "loss": loss, "network": net });
        write_file(&dir.join("gradcheck.json"), &json.to_string())?;
    }
    if loss.passed() && net.passed() {
        Ok(())
    } else {
        Err(Failure::Verification("gradient check failed".into()))
    }
}

fn matchcheck(trials: usize, max_size: usize, seed: u64) -> CliResult {
    let c = matchloss::conformance(trials, max_size, seed)?;
    println!(
        "{}/{} exact (worst difference {:e})",
        c.exact, c.trials, c.worst_difference
    );
    if c.exact == c.trials {
        Ok(())
    } else {
        Err(Failure::Verification(
            "hungarian disagrees with brute force".into(),
        ))
    }
}

fn run(cli: Cli) -> CliResult {
    let v = cli.verbose;
    match cli.command {
        Command::Generate { config, seed, out } => generate(config.as_deref(), seed, &out, v),
        Command::Train {
            config,
            seed,
            dataset,
            out,
            checkpoint,
            stage_cap,
            precision,
        } => train(
            TrainArgs {
                config: config.as_deref(),
                seed,
                dataset: &dataset,
                out: &out,
                checkpoint: checkpoint.as_deref(),
                stage_cap,
                precision,
            },
            v,
        ),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => eval(&checkpoint, &dataset, out.as_deref()),
        Command::Infer {
            checkpoint,
            image,
            out,
        } => infer(&checkpoint, &image, &out, v),
        Command::Gradcheck { seed, out } => gradcheck_cmd(seed, out.as_deref()),
        Command::Matchcheck {
            trials,
            max_size,
            seed,
        } => matchcheck(trials, max_size as usize, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
