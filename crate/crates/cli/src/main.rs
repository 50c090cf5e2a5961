use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sscn::dataio::{data_fingerprint, load_idx, read_dataset, write_dataset, generate_union_of_subspaces, write_tensors, DataMatrix, TensorFile};
use sscn::experiment::{run_experiment, write_json, write_labels_csv, write_soft_csv, DataSource, ExperimentConfig, TrainedModel};
use sscn::metrics::evaluate;
use sscn::verify::{run_verify, VerifyConfig};

#[derive(Parser)]
#[command(name = "sscn", version, about = "Self-expressive subspace clustering with an out-of-sample classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; repeat for several runs.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic union-of-subspaces dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the staged pipeline for every seed and write a run report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset container to train on instead of the config's source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Pre-trained auto-encoder checkpoint; skips pre-training.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Classify points with a trained checkpoint, streaming in batches.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
    },
    /// Score predicted labels against ground truth.
    Evaluate {
        /// labels.csv written by `train` or `cluster`.
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property checks and print a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Perturb the analytic optimum; the checks must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

#[derive(Args, Clone)]
struct Input {
    /// Dataset container.
    #[arg(long, required_unless_present = "images")]
    data: Option<PathBuf>,
    /// IDX image file (with --labels-idx).
    #[arg(long, requires = "labels_idx")]
    images: Option<PathBuf>,
    #[arg(long)]
    labels_idx: Option<PathBuf>,
}

impl Input {
    fn load(&self) -> Result<DataMatrix> {
        match (&self.data, &self.images, &self.labels_idx) {
            (Some(p), _, _) => Ok(read_dataset(p).with_context(|| format!("reading {}", p.display()))?.0),
            (None, Some(i), Some(l)) => Ok(load_idx(i, l)?),
            _ => bail!("give --data or --images with --labels-idx"),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !common.seeds.is_empty() {
        c.seeds = common.seeds.clone();
    }
    if let Some(out) = &common.out {
        c.out_dir = out.clone();
    }
    Ok(c)
}

fn generate(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let DataSource::Synthetic(mut spec) = config.data else {
        bail!("generate needs a synthetic data source in the config");
    };
    if let Some(&s) = common.seeds.first() {
        spec.seed = s;
    }
    let (data, bases) = generate_union_of_subspaces(&spec)?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)?;
    let fingerprint = data_fingerprint(data.x());
    let meta = serde_json::json!({ "spec": spec, "seed": spec.seed, "fingerprint": fingerprint });
    write_dataset(&dir.join("dataset.bin"), &data, &meta)?;
    write_json(&dir.join("dataset.json"), &meta)?;
    let mut b = TensorFile::default();
    for (i, basis) in bases.into_iter().enumerate() {
        b.push(format!("basis.{i}"), basis);
    }
    write_tensors(&dir.join("bases.bin"), &b)?;
    println!("{} points, d_X = {}, fingerprint {fingerprint}", data.len(), data.dim());
    println!("wrote {}", dir.join("dataset.bin").display());
    Ok(())
}

fn train(common: &Common, data: Option<PathBuf>, batch_size: Option<usize>, resume: Option<PathBuf>) -> Result<bool> {
    let mut config = load_config(common)?;
    if let Some(path) = data {
        config.data = DataSource::File { path };
    }
    if let Some(b) = batch_size {
        config.sscn.batch_size = Some(b);
    }
    if resume.is_some() {
        config.resume_from = resume;
    }
    let report = run_experiment(&config)?;
    for s in &report.seeds {
        match (&s.metrics, &s.error) {
            (Some(m), _) => println!(
                "seed {:>4}: ACC {:.4}  ARI {:.4}  NMI {:.4}  ({:.1}s)",
                s.seed, m.acc, m.ari, m.nmi, s.timings.total_s
            ),
            (None, Some(e)) => println!("seed {:>4}: FAILED: {e}", s.seed),
            (None, None) => println!("seed {:>4}: done (no ground truth)", s.seed),
        }
        if let Some(o) = &s.out_of_sample {
            println!("           out-of-sample ACC {:.4} on {} points", o.acc, o.n);
        }
    }
    let a = &report.aggregate;
    if let (Some(acc), Some(ari), Some(nmi)) = (a.acc, a.ari, a.nmi) {
        println!(
            "ACC {:.4} ± {:.4}  ARI {:.4} ± {:.4}  NMI {:.4} ± {:.4}  over {} seeds",
            acc.mean, acc.std, ari.mean, ari.std, nmi.mean, nmi.std, acc.n
        );
    }
    if a.failed > 0 {
        println!("{} of {} seeds failed", a.failed, report.seeds.len());
    }
    if config.save_artifacts {
        println!("report: {}", config.out_dir.join("run_report.json").display());
    }
    Ok(a.succeeded > 0)
}

fn cluster(checkpoint: &Path, input: &Input, out: &Path, batch: usize) -> Result<()> {
    let model = TrainedModel::load(checkpoint)?;
    let data = input.load()?;
    let assignment = model.classify(data.x(), batch)?;
    std::fs::create_dir_all(out)?;
    write_labels_csv(&out.join("labels.csv"), &assignment.labels)?;
    write_soft_csv(&out.join("soft.csv"), &assignment)?;
    println!("{} points -> cluster sizes {:?}", data.len(), assignment.cluster_sizes());
    if let Some(truth) = data.labels() {
        let m = evaluate(&assignment.labels, truth, None)?;
        println!("ACC {:.4}  ARI {:.4}  NMI {:.4}", m.acc, m.ari, m.nmi);
        write_json(&out.join("metrics.json"), &m)?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cell = line.split(',').nth(1).with_context(|| format!("{}:{}: missing label", path.display(), i + 1))?;
        out.push(cell.trim().parse().with_context(|| format!("{}:{}: bad label", path.display(), i + 1))?);
    }
    Ok(out)
}

fn evaluate_cmd(labels: &Path, input: &Input, out: Option<&Path>) -> Result<()> {
    let pred = read_labels(labels)?;
    let data = input.load()?;
    let Some(truth) = data.labels() else {
        bail!("the dataset has no ground-truth labels");
    };
    let m = evaluate(&pred, truth, None)?;
    let json = serde_json::to_string_pretty(&m)?;
    println!("{json}");
    if let Some(p) = out {
        std::fs::write(p, json)?;
    }
    Ok(())
}

fn verify(common: &Common, inject_fault: bool) -> Result<bool> {
    let cfg = VerifyConfig {
        seed: common.seeds.first().copied().unwrap_or(0),
        inject_fault,
        ..Default::default()
    };
    let report = run_verify(&cfg);
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("verify.json"), &json)?;
    }
    if !report.passed {
        eprintln!("failed checks: {}", report.failed.join(", "));
    }
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common } => generate(&common).map(|_| true),
        Command::Train {
            common,
            data,
            batch_size,
            resume,
        } => train(&common, data, batch_size, resume),
        Command::Cluster {
            checkpoint,
            input,
            out,
            batch_size,
        } => cluster(&checkpoint, &input, &out, batch_size).map(|_| true),
        Command::Evaluate { labels, input, out } => evaluate_cmd(&labels, &input, out.as_deref()).map(|_| true),
        Command::Verify { common, inject_fault } => verify(&common, inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
