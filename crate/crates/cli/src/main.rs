use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lmdis::data::{validate_root, Annotations, Dataset, DatasetSpec};
use lmdis::evaluation::{ablate, evaluate, Normalizer, Term};
use lmdis::training::{RunSummary, TrainConfig, Trainer};
use lmdis_serve::{AppState, ServeConfig};

#[derive(Parser)]
#[command(name = "lmdis", version, about = "Unsupervised landmark discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many iterations instead of the configured count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Switch off loss terms; the run goes to `<output_dir>_no<term>`.
        #[arg(long, value_delimiter = ',')]
        disable: Vec<TermArg>,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Fit the landmark regressor and report NME.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root, or a TOML file holding a dataset spec or a training config.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum)]
        normalizer: NormalizerArg,
        /// Directory for `eval.json` and `eval.csv`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Held-out share when the annotations name no test entries.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Account for left/right flips of the discovered landmarks.
        #[arg(long)]
        flip_aware: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Check a dataset folder: manifest, decodability, sizes, annotations, flows.
    Validate { root: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizerArg {
    /// Eye-center distance, from the annotations' normalizer pair.
    Biocular,
    /// Wheel-center distance, from the annotations' normalizer pair.
    Biwheel,
    /// The padded image edge.
    ImageSize,
}

#[derive(Clone, Copy, ValueEnum)]
enum TermArg {
    Recon,
    Conc,
    Sep,
    Eqv,
}

impl TermArg {
    fn term(self) -> Term {
        match self {
            TermArg::Recon => Term::Recon,
            TermArg::Conc => Term::Conc,
            TermArg::Sep => Term::Sep,
            TermArg::Eqv => Term::Eqv,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TermArg::Recon => "recon",
            TermArg::Conc => "conc",
            TermArg::Sep => "sep",
            TermArg::Eqv => "eqv",
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, iterations, disable } => train(&config, resume.as_deref(), iterations, &disable),
        Command::Data { command: DataCommand::Validate { root } } => {
            let report = validate_root(&root)?;
            print!("{report}");
            if !report.ok() {
                bail!("{} failed validation", root.display());
            }
            Ok(())
        }
        Command::Eval { ckpt, dataset, annotations, normalizer, out, test_fraction, flip_aware, seed } => {
            eval(&ckpt, &dataset, &annotations, normalizer, &out, test_fraction, flip_aware, seed)
        }
        Command::Serve { ckpt, port, host, cors_origin } => {
            let state = Arc::new(AppState::new(ServeConfig { cors_origin, ..Default::default() }));
            state.load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
            tokio::runtime::Runtime::new()?.block_on(lmdis_serve::serve(state, addr))?;
            Ok(())
        }
    }
}

fn train(config: &Path, resume: Option<&Path>, iterations: Option<u64>, disable: &[TermArg]) -> Result<()> {
    let mut cfg = TrainConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if !disable.is_empty() {
        let terms: Vec<Term> = disable.iter().map(|t| t.term()).collect();
        let suffix: String = disable.iter().map(|t| format!("_no{}", t.name())).collect();
        let mut dir = cfg.output_dir.clone().into_os_string();
        dir.push(suffix);
        cfg = ablate(&cfg, &terms);
        cfg.output_dir = dir.into();
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let dataset = Dataset::open(cfg.dataset.clone())?;
    log::info!("{} training images", dataset.len());
    let until = cfg.iterations;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, p).with_context(|| format!("resuming from {}", p.display()))?,
        None => Trainer::new(cfg)?,
    };
    let start = Instant::now();
    trainer.run(&dataset, until, Some(&out))?;
    let model = trainer.finish(&dataset, &out)?;
    // seconds cover this invocation only when resuming
    RunSummary { iterations: until, train_seconds: start.elapsed().as_secs_f64() }.write(&out)?;
    println!("{}", model.display());
    Ok(())
}

/// Dataset spec from a root directory (sized for the model) or a TOML file.
fn dataset_spec(path: &Path, model: &lmdis::model::ModelConfig) -> Result<DatasetSpec> {
    if path.is_dir() {
        return Ok(DatasetSpec {
            root: path.to_path_buf(),
            image_size: model.image_size,
            padded_size: model.image_size,
            channels: model.image_channels,
            ..Default::default()
        });
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec = if text.contains("[dataset]") {
        TrainConfig::load(path)?.dataset
    } else {
        toml::from_str::<DatasetSpec>(&text)?
    };
    if spec.root.is_relative() {
        if let Some(dir) = path.parent() {
            spec.root = dir.join(&spec.root);
        }
    }
    Ok(spec)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ckpt: &Path,
    dataset: &Path,
    annotations: &Path,
    normalizer: NormalizerArg,
    out: &Path,
    test_fraction: f64,
    flip_aware: bool,
    seed: u64,
) -> Result<()> {
    let ck = lmdis::checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let spec = dataset_spec(dataset, &ck.model.config)?;
    let ds = Dataset::open(spec)?;
    let ann = Annotations::load(annotations).with_context(|| format!("reading {}", annotations.display()))?;
    let norm = match normalizer {
        NormalizerArg::Biocular | NormalizerArg::Biwheel => match ann.normalizer_pair {
            Some([a, b]) => Normalizer::Pair(a, b),
            None => bail!("annotations define no normalizer_pair"),
        },
        // coordinates are divided by the padded edge
        NormalizerArg::ImageSize => Normalizer::Constant(1.0),
    };
    let report = evaluate(&ck.model, &ds, &ann, norm, test_fraction, flip_aware, seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    w.write_record(["image", "nme_percent"])?;
    for (name, v) in &report.per_image {
        w.write_record([name.as_str(), &format!("{v:.4}")])?;
    }
    w.flush()?;
    println!(
        "test NME {:.3}% over {} images (train {:.3}%, {} images)",
        report.test_nme.percent, report.test_nme.images, report.train_nme.percent, report.train_nme.images
    );
    Ok(())
}
