use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use tightbox::error::{Error, Result};
use tightbox::evalkit::{self, Method};
use tightbox::formats::{read_json, write_json, Dataset};
use tightbox::selftest;
use tightbox::trainer::{self, Checkpoint};
use tightbox::ExperimentConfig;
use tightbox_core::synth::{generate, DatasetSpec, Sample, Split};
use tightbox_core::{AngleSet, BagScheme, CategoryBags, ModelKind};

#[derive(Parser)]
#[command(name = "tightbox", version, about = "Weakly supervised segmentation from tight bounding boxes")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn select(self, ds: &Dataset) -> Vec<&Sample> {
        match self {
            SplitArg::Train => ds.split(Split::Train),
            SplitArg::Val => ds.split(Split::Val),
            SplitArg::All => ds.samples.iter().collect(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Dataset spec JSON; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config.json, checkpoint.json and runlog.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained run and write report.csv.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score several methods; one report.csv row per method.
    Compare {
        #[arg(long)]
        data: PathBuf,
        /// Base config; model and optimizer settings apply to every method.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON list of {"label", "config"}; defaults to the built-in method set.
        #[arg(long)]
        methods: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write bag overlays, one PGM per angle per sample.
    DumpBags {
        #[arg(long)]
        data: PathBuf,
        /// Angle set as theta1:theta2:step, in degrees.
        #[arg(long, allow_hyphen_values = true, default_value = "0:0:1")]
        angles: String,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and smooth-maximum self checks.
    Selftest {
        /// Random instances per gradient case.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Random vectors for the smooth-maximum properties.
        #[arg(long, default_value_t = 10_000)]
        vectors: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    #[serde(flatten)]
    body: T,
}

fn echo<T: Serialize>(out: &Path, command: &str, body: T) -> Result<()> {
    write_json(&out.join("config_echo.json"), &Echo { command, body })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.optim.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: DatasetSpec = match spec {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ds = Dataset::from_samples(Some(spec.clone()), generate(&spec)?)?;
    create_dir(out)?;
    ds.write(out)?;
    #[derive(Serialize)]
    struct Body {
        spec: DatasetSpec,
    }
    echo(out, "gen-data", Body { spec })?;
    info!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainEcho {
    data: PathBuf,
    config: ExperimentConfig,
    samples: Vec<String>,
}

fn train(data: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = Dataset::read(data)?;
    // direct-logit maps are per sample, so every sample gets one
    let samples = match cfg.model {
        ModelKind::DirectLogit => ds.samples.iter().collect(),
        ModelKind::TinyConv => ds.split(Split::Train),
    };
    create_dir(out)?;
    echo(out, "train", TrainEcho { data: data.to_path_buf(), config: cfg.clone(), samples: samples.iter().map(|s| s.id.clone()).collect() })?;
    let outcome = trainer::train(&samples, &cfg)?;
    write_json(&out.join("config.json"), &cfg)?;
    outcome.checkpoint.save(&out.join("checkpoint.json"))?;
    outcome.log.save(&out.join("runlog.csv"))?;
    if let Some(last) = outcome.log.records.last() {
        info!("{}: final loss {:.6e} after {} iterations", cfg.describe(), last.total, last.iteration + 1);
    }
    Ok(())
}

fn eval(run: &Path, data: &Path, split: SplitArg, threshold: Option<f64>, out: Option<&Path>) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(&run.join("config.json"))?;
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    let checkpoint = Checkpoint::load(&run.join("checkpoint.json"))?;
    let ds = Dataset::read(data)?;
    let samples = split.select(&ds);
    let report = evalkit::evaluate(&checkpoint, &samples, cfg.threshold, &cfg.describe(), &evalkit::fingerprint(&cfg))?;
    let out = out.unwrap_or(run);
    create_dir(out)?;
    #[derive(Serialize)]
    struct Body<'a> {
        run: &'a Path,
        data: &'a Path,
        split: SplitArg,
        config: &'a ExperimentConfig,
    }
    echo(out, "eval", Body { run, data, split, config: &cfg })?;
    evalkit::write_report(&out.join("report.csv"), std::slice::from_ref(&report))?;
    let per_sample = out.join("per_sample.csv");
    std::fs::write(&per_sample, report.per_sample_csv()).map_err(|e| Error::io(&per_sample, e))?;
    println!("{}: mean Dice {:.4} (std {:.4}, n={})", report.method, report.mean_dice, report.std_dice, report.n_samples());
    Ok(())
}

fn compare(data: &Path, config: Option<&Path>, methods: Option<&Path>, split: SplitArg, seed: Option<u64>, out: &Path) -> Result<()> {
    let base = load_config(config, seed)?;
    let mut methods: Vec<Method> = match methods {
        Some(p) => read_json(p)?,
        None => evalkit::default_methods(&base),
    };
    for m in &mut methods {
        if let Some(s) = seed {
            m.config.optim.seed = s;
        }
        m.config.validate()?;
    }
    let eval_split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::All => return Err(Error::Config("compare scores one split: train or val".into())),
    };
    let ds = Dataset::read(data)?;
    create_dir(out)?;
    #[derive(Serialize)]
    struct Body<'a> {
        data: &'a Path,
        split: SplitArg,
        methods: &'a [Method],
    }
    echo(out, "compare", Body { data, split, methods: &methods })?;
    let reports = evalkit::compare(&methods, &ds, eval_split)?;
    evalkit::write_report(&out.join("report.csv"), &reports)?;
    for r in &reports {
        println!("{:<40} {:.4} ({:.4})", r.method, r.mean_dice, r.std_dice);
    }
    Ok(())
}

fn angle_tag(a: f64) -> String {
    if a == a.trunc() { format!("{}", a as i64) } else { format!("{a}") }
}

fn dump_bags(data: &Path, angles: &str, split: SplitArg, out: &Path) -> Result<()> {
    let set = AngleSet::parse(angles)?;
    let ds = Dataset::read(data)?;
    create_dir(out)?;
    #[derive(Serialize)]
    struct Body<'a> {
        data: &'a Path,
        angles: AngleSet,
        split: SplitArg,
    }
    echo(out, "dump-bags", Body { data, angles: set, split })?;
    let mut written = 0;
    for s in split.select(&ds) {
        for a in set.angles() {
            let scheme = BagScheme::Generalized { angles: AngleSet::new(a, a, 1.0)? };
            let mut bags = Vec::new();
            for c in 1..=s.categories() {
                let cb = CategoryBags::build(&s.boxes, c, s.image.height, s.image.width, &scheme)?;
                bags.extend(cb.negatives);
                bags.extend(cb.positives);
            }
            evalkit::dump_bags(s, &bags, &out.join(format!("{}_theta_{}.pgm", s.id, angle_tag(a))))?;
            written += 1;
        }
    }
    info!("wrote {written} overlays to {}", out.display());
    Ok(())
}

fn run_selftest(instances: usize, vectors: usize, seed: u64, out: Option<&Path>) -> Result<bool> {
    let mut lines = Vec::new();
    let mut ok = true;
    for c in selftest::gradient_suite(instances, seed)?.into_iter().chain(selftest::smooth_max_suite(vectors, seed)?) {
        ok &= c.passed;
        println!("{c}");
        lines.push(c.to_string());
    }
    if let Some(out) = out {
        create_dir(out)?;
        #[derive(Serialize)]
        struct Body {
            instances: usize,
            vectors: usize,
            seed: u64,
        }
        echo(out, "selftest", Body { instances, vectors, seed })?;
        let path = out.join("selftest.txt");
        std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(ok)
}

fn dispatch(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Invalid(e.to_string()))?;
    }
    match cli.command {
        Command::GenData { spec, seed, out } => gen_data(spec.as_deref(), seed, &out)?,
        Command::Train { data, config, seed, out } => train(&data, config.as_deref(), seed, &out)?,
        Command::Eval { run, data, split, threshold, seed: _, out } => eval(&run, &data, split, threshold, out.as_deref())?,
        Command::Compare { data, config, methods, split, seed, out } => {
            compare(&data, config.as_deref(), methods.as_deref(), split, seed, &out)?
        }
        Command::DumpBags { data, angles, split, seed: _, out } => dump_bags(&data, &angles, split, &out)?,
        Command::Selftest { instances, vectors, seed, out } => return run_selftest(instances, vectors, seed.unwrap_or(0), out.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: self checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
