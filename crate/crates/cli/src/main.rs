//! `rkdea`: generate synthetic graph pairs, train teacher and student
//! aligners, evaluate checkpoints and run the built-in gradient checks.

mod manifest;
mod settings;

use std::fs::{self, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rkdea::checkpoint::Checkpoint;
use rkdea::eval::{evaluate, CandidatePool, Direction};
use rkdea::kgdata::{generate_synthetic, load_dataset, write_dataset, SplitSpec, SyntheticConfig};
use rkdea::selfcheck::{run_selfcheck, SelfCheckOptions};
use rkdea::trainer::{embed, train_student, train_teacher, EpochRecord, Phase, Precision, Preset};
use rkdea::{Error, Result};

use manifest::{dataset_digest, file_digest, manifest_path_for, RunManifest, TOOL_VERSION};
use settings::{ConfigFile, Overrides};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "rkdea", version, about = "Entity alignment with relational knowledge distillation")]
struct Cli {
    /// Worker threads for the parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic aligned graph pair.
    Gen(GenArgs),
    /// Train a teacher or a student.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on the test alignments.
    Eval(EvalArgs),
    /// Run gradient and invariant checks on tiny built-in problems.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 10)]
    relations: usize,
    #[arg(long, default_value_t = 600)]
    triples: usize,
    #[arg(long, default_value_t = 1.0)]
    seed_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    edge_dropout: f64,
    #[arg(long, default_value_t = 0.05)]
    feature_noise: f64,
    #[arg(long, default_value_t = 300)]
    feature_dim: usize,
    /// Twin entities sharing an original's neighbors under other relation labels.
    #[arg(long, default_value_t = 0)]
    confusable: usize,
    #[arg(long, default_value_t = 0)]
    rng: u64,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SplitArgs {
    /// Training share of `ref_ent_ids` when the dataset has no `sup_ent_ids`.
    #[arg(long, default_value_t = 0.3)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl SplitArgs {
    fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            rng_seed: self.split_seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    phase: Phase,
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint; required for the student phase.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long, default_value = "model.rkda")]
    ckpt: PathBuf,
    /// `key = value` settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    /// Epochs between negative refreshes.
    #[arg(long)]
    refresh: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Student trained on the alignment loss alone.
    #[arg(long)]
    no_distill: bool,
    /// Constant mixing weight instead of the adaptive temperature.
    #[arg(long)]
    fixed_beta: Option<f64>,
    #[arg(long)]
    kd_batch: Option<usize>,
    #[arg(long)]
    rng: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Keep the input features fixed.
    #[arg(long)]
    freeze_features: bool,
    #[arg(long)]
    normalize_entities: bool,
    /// Start the student from the teacher's encoder weights.
    #[arg(long)]
    init_from_teacher: bool,
    /// Log test Hits@1 every this many epochs.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Telemetry file (default: `RKDA_LOG`, else stdout).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

impl TrainArgs {
    fn overrides(&self) -> Overrides {
        let set = |flag: bool| flag.then_some(true);
        Overrides {
            preset: self.preset,
            epochs: self.epochs,
            lr: self.lr,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            k1: self.k1,
            k2: self.k2,
            refresh: self.refresh,
            dim: self.dim,
            layers: self.layers,
            distill: self.no_distill.then_some(false),
            fixed_beta: self.fixed_beta,
            kd_batch: self.kd_batch,
            rng: self.rng,
            precision: self.precision,
            train_features: self.freeze_features.then_some(false),
            normalize_entities: set(self.normalize_entities),
            init_from_teacher: set(self.init_from_teacher),
            eval_every: self.eval_every,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10])]
    k: Vec<usize>,
    /// kg1->kg2, kg2->kg1 or both.
    #[arg(long, default_value = "kg1->kg2")]
    direction: String,
    /// Candidates: test-set counterparts or every entity of the other graph.
    #[arg(long, default_value = "test")]
    pool: String,
    /// Append one row per direction to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Comma-separated subset of checks.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Deliberately break every check (negative control).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } | Error::NonFinite(_) | Error::DegenerateEmbedding(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Selfcheck(args) => cmd_selfcheck(&args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_gen(args: &GenArgs) -> Result<u8> {
    let cfg = SyntheticConfig {
        n_entities: args.entities,
        n_relations: args.relations,
        n_triples: args.triples,
        seed_fraction: args.seed_fraction,
        train_fraction: args.train_fraction,
        edge_dropout: args.edge_dropout,
        feature_noise: args.feature_noise,
        feature_dim: args.feature_dim,
        confusable_pairs: args.confusable,
        rng_seed: args.rng,
    };
    // Generate before touching the filesystem so bad flags leave no trace.
    let bundle = generate_synthetic(&cfg)?;
    if args.out.exists() && !args.force && fs::read_dir(&args.out)?.next().is_some() {
        return Err(Error::Config(format!(
            "{} is not empty (use --force to overwrite)",
            args.out.display()
        )));
    }
    fs::create_dir_all(&args.out)?;
    RunManifest {
        command: "gen",
        tool_version: TOOL_VERSION,
        rng_seed: args.rng,
        config: json!({
            "entities": cfg.n_entities,
            "relations": cfg.n_relations,
            "triples": cfg.n_triples,
            "seed_fraction": cfg.seed_fraction,
            "train_fraction": cfg.train_fraction,
            "edge_dropout": cfg.edge_dropout,
            "feature_noise": cfg.feature_noise,
            "feature_dim": cfg.feature_dim,
            "confusable": cfg.confusable_pairs,
        }),
        dataset_digest: None,
        teacher_digest: None,
    }
    .write(&args.out.join("manifest.json"))?;
    write_dataset(&bundle, &args.out)?;
    Ok(0)
}

fn telemetry_sink(flag: Option<&Path>) -> Result<Box<dyn Write>> {
    let path = flag.map(Path::to_path_buf).or_else(|| std::env::var_os("RKDA_LOG").map(PathBuf::from));
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn cmd_train(args: &TrainArgs) -> Result<u8> {
    let mut overrides = args.overrides();
    if let Some(path) = &args.config {
        overrides = overrides.over(Overrides::from_file(&ConfigFile::load(path)?)?);
    }
    let cfg = overrides.resolve(args.phase)?;
    let teacher = match (args.phase, &args.teacher) {
        (Phase::Student, None) => return Err(Error::Config("the student phase needs --teacher".into())),
        (Phase::Student, Some(p)) => Some((Checkpoint::load(p)?, file_digest(p)?)),
        (Phase::Teacher, Some(_)) => return Err(Error::Config("--teacher applies to the student phase only".into())),
        (Phase::Teacher, None) => None,
    };
    let bundle = load_dataset(&args.data, args.split.split_spec())?;

    let mut config = serde_json::to_value(&cfg).expect("config serializes");
    config["split"] = json!({"train_fraction": args.split.train_fraction, "split_seed": args.split.split_seed});
    RunManifest {
        command: "train",
        tool_version: TOOL_VERSION,
        rng_seed: cfg.rng_seed,
        config,
        dataset_digest: Some(dataset_digest(&args.data)?),
        teacher_digest: teacher.as_ref().map(|(_, d)| d.clone()),
    }
    .write(&manifest_path_for(&args.ckpt))?;

    let mut sink = telemetry_sink(args.log.as_deref())?;
    let mut write_err = None;
    let mut on_epoch = |rec: &EpochRecord| {
        if write_err.is_none() {
            if let Err(e) = writeln!(sink, "{}", rec.to_json()) {
                write_err = Some(e);
            }
        }
    };
    let result = match &teacher {
        None => train_teacher(&bundle, &cfg, &mut on_epoch),
        Some((t, _)) => train_student(&bundle, t, &cfg, &mut on_epoch),
    };
    if let Some(e) = write_err {
        return Err(e.into());
    }
    sink.flush()?;
    match result {
        Ok(ckpt) => {
            ckpt.save(&args.ckpt)?;
            Ok(0)
        }
        Err(Error::Diverged { epoch, reason, last_good }) => {
            last_good.save(&args.ckpt)?;
            eprintln!(
                "error: training diverged at epoch {epoch}: {reason}; last finite parameters saved to {}",
                args.ckpt.display()
            );
            Ok(3)
        }
        Err(e) => Err(e),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let directions = match args.direction.as_str() {
        "both" => vec![Direction::Kg1ToKg2, Direction::Kg2ToKg1],
        d => vec![d.parse()?],
    };
    let pool = match args.pool.as_str() {
        "test" => CandidatePool::TestSet,
        "all" => CandidatePool::AllEntities,
        p => return Err(Error::Config(format!("unknown pool `{p}` (expected test or all)"))),
    };
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let bundle = load_dataset(&args.data, args.split.split_spec())?;
    let emb = embed(&ckpt, &bundle)?;
    let index = bundle.index();
    let mut rows = Vec::new();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for dir in directions {
        let m = evaluate(&emb, &bundle.test_seeds, &index, dir, pool, &args.k)?;
        writeln!(out, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        rows.push(m);
    }
    if let Some(path) = &args.csv {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", rows[0].csv_header())?;
        }
        for m in &rows {
            writeln!(f, "{}", m.csv_row())?;
        }
    }
    Ok(0)
}

fn cmd_selfcheck(args: &SelfcheckArgs) -> Result<u8> {
    let results = run_selfcheck(&SelfCheckOptions {
        only: args.only.clone(),
        inject_fault: args.inject_fault,
    })?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {:<10} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("{} checks passed", results.len());
        Ok(0)
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Ok(1)
    }
}
