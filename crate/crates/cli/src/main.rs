//! `listrank` command-line entry point.
//!
//! Exit codes: 0 success, 1 output I/O, 2 configuration, 3 data,
//! 4 checkpoint, 5 numeric divergence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use listrank::checkpoint::Checkpoint;
use listrank::config::{RunConfig, SEED_ENV};
use listrank::data::{
    build_examples, catalog_from, generate_synthetic, load_interactions, load_items, split_user_sequences, write_interactions, write_items,
    Catalog, Example, ExampleOptions, ExampleSets, LoadOptions, SyntheticConfig,
};
use listrank::model::{ModelParams, Ranker};
use listrank::parallel::Executor;
use listrank::template::{render_target, TieBreak};
use listrank::train::{evaluate_bootstrap, train, EvalOptions};

const RATINGS_FILE: &str = "ratings.dat";
const ITEMS_FILE: &str = "movies.dat";

#[derive(Parser)]
#[command(name = "listrank", version, about = "Listwise learning-to-rank with a toy label-generating ranker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interaction corpus and item catalog.
    GenData(GenDataArgs),
    /// Train a ranker and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Print an evaluation report for a checkpoint.
    Eval(EvalArgs),
    /// Print the ranking of one example as a label string.
    Rank(RankArgs),
    /// Compare NDCG and per-example decode time across bootstrap sizes.
    BenchBootstrap(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 40)]
    actions: usize,
    /// Falls back to RANK_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding ratings.dat and movies.dat.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config assignment, repeatable: --set epochs=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Field delimiter of the data files.
    #[arg(long, default_value = "::")]
    delimiter: String,
    /// Which held-out block to use: test or valid.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10,25")]
    cutoffs: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Shuffles per example for the position-bias estimate (0 disables).
    #[arg(long, default_value_t = 4)]
    bias_trials: usize,
    #[arg(long, default_value_t = 100)]
    bias_examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Index of the example within the split.
    #[arg(long)]
    example: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10,25")]
    cutoffs: Vec<usize>,
    /// Examples timed per setting; at least 200 decodes are recommended.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const CHECKPOINT: u8 = 4;
const DIVERGED: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Rank(a) => run_rank(a),
        Command::BenchBootstrap(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let seed = match a.seed {
        Some(s) => s,
        None => match env_seed() {
            Some(s) => s.trim().parse().map_err(|_| fail(CONFIG, format!("{SEED_ENV}='{s}' is not an integer")))?,
            None => 0,
        },
    };
    let cfg = SyntheticConfig {
        n_users: a.users,
        n_items: a.items,
        actions_per_user: a.actions,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg, seed).map_err(|e| fail(CONFIG, e))?;
    fs::create_dir_all(&a.out).map_err(|e| fail(1, format!("cannot create {}: {e}", a.out.display())))?;
    write_interactions(&a.out.join(RATINGS_FILE), &corpus.interactions, "::").map_err(|e| fail(1, e))?;
    write_items(&a.out.join(ITEMS_FILE), &corpus.catalog, "::").map_err(|e| fail(1, e))?;
    let manifest = serde_json::json!({
        "generator": "latent-factor",
        "seed": seed,
        "users": cfg.n_users,
        "items": cfg.n_items,
        "actions_per_user": cfg.actions_per_user,
        "latent_dim": cfg.latent_dim,
        "noise_std": cfg.noise_std,
        "rating_scale": cfg.rating_scale,
        "files": [RATINGS_FILE, ITEMS_FILE],
    });
    write_file(&a.out.join("manifest.json"), &format!("{}\n", serde_json::to_string_pretty(&manifest).expect("json")))
}

fn load_corpus(dir: &Path, opts: &LoadOptions) -> Result<(Vec<listrank::data::Interaction>, Catalog), Failure> {
    let ratings = load_interactions(&dir.join(RATINGS_FILE), opts).map_err(|e| fail(DATA, e))?;
    let items = load_items(&dir.join(ITEMS_FILE), opts).map_err(|e| fail(DATA, e))?;
    for issue in ratings.issues.iter().chain(&items.issues) {
        eprintln!("warning: skipped line {}: {}", issue.line, issue.message);
    }
    Ok((ratings.records, catalog_from(items.records)))
}

fn examples(dir: &Path, opts: &LoadOptions, ex_opts: &ExampleOptions) -> Result<ExampleSets, Failure> {
    let (interactions, catalog) = load_corpus(dir, opts)?;
    let split = split_user_sequences(&interactions, ex_opts.m, ex_opts.history_len);
    let sets = build_examples(&split, &catalog, ex_opts).map_err(|e| fail(DATA, e))?;
    if sets.test.is_empty() {
        return Err(fail(DATA, format!("no user has the {} actions needed", 2 * ex_opts.m + ex_opts.history_len)));
    }
    Ok(sets)
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let file = match &a.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| fail(CONFIG, format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides = Vec::new();
    for s in &a.set {
        let (k, v) = s.split_once('=').ok_or_else(|| fail(CONFIG, format!("--set expects KEY=VALUE, got '{s}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(w) = a.workers {
        overrides.push(("workers".into(), w.to_string()));
    }
    if let Some(s) = a.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let cfg = RunConfig::resolve(file.as_deref(), &overrides, env_seed().as_deref()).map_err(|e| fail(CONFIG, e))?;
    let sets = examples(&a.data, &cfg.load_options(), &cfg.example_options())?;
    if sets.train.is_empty() {
        return Err(fail(DATA, "no training windows; lower m or history_len"));
    }

    fs::create_dir_all(&a.out).map_err(|e| fail(1, format!("cannot create {}: {e}", a.out.display())))?;
    let log_path = a.out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| fail(1, format!("cannot write {}: {e}", log_path.display())))?);
    let header = serde_json::json!({ "run_id": cfg.run_id, "config": cfg });
    let mut emit = |line: String| {
        println!("{line}");
        let _ = writeln!(log, "{line}");
    };
    emit(header.to_string());

    let t = &cfg.train;
    let init = ModelParams::init(t.seed, t.dims()).map_err(|e| fail(CONFIG, e))?;
    let outcome = train(t, &cfg.run_id, init, &sets.train, &sets.valid, &mut |r| {
        emit(serde_json::to_string(r).expect("record serializes"));
    })
    .map_err(|e| fail(if e.is_numeric() { DIVERGED } else { CONFIG }, e))?;
    log.flush().map_err(|e| fail(1, e))?;

    let save = |name: &str, params: &ModelParams| {
        Checkpoint::model(t.seed, params.clone())
            .save(&a.out.join(name))
            .map_err(|e| fail(CHECKPOINT, e))
    };
    save("best.ckpt", &outcome.best)?;
    save("last.ckpt", &outcome.last)?;
    if let Some(d) = outcome.divergence {
        return Err(fail(
            DIVERGED,
            format!("training diverged at epoch {} step {}: {}; best.ckpt holds the last good parameters", d.epoch, d.step, d.reason),
        ));
    }
    Ok(())
}

fn load_for_eval(a: &DataArgs) -> Result<(Checkpoint, Vec<Example>), Failure> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| fail(CHECKPOINT, e))?;
    let ex_opts = ExampleOptions {
        m: ck.m,
        history_len: ck.history_len,
        window_stride: 1,
        tie_break: match &ck.kind {
            listrank::checkpoint::CheckpointKind::Oracle(tb) => *tb,
            _ => TieBreak::Title,
        },
    };
    let load = LoadOptions {
        delimiter: a.delimiter.clone(),
        ..LoadOptions::default()
    };
    let sets = examples(&a.data, &load, &ex_opts)?;
    let chosen = match a.split.as_str() {
        "test" => sets.test,
        "valid" => sets.valid,
        other => return Err(fail(CONFIG, format!("unknown split '{other}' (test or valid)"))),
    };
    Ok((ck, chosen))
}

fn check_cutoffs(cutoffs: &[usize]) -> Result<(), Failure> {
    if cutoffs.is_empty() || cutoffs[0] == 0 || cutoffs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(fail(CONFIG, "cutoffs must be positive and strictly ascending"));
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    check_cutoffs(&a.cutoffs)?;
    if a.bias_trials == 1 {
        return Err(fail(CONFIG, "--bias-trials must be 0 or >= 2"));
    }
    let (ck, examples) = load_for_eval(&a.data)?;
    let opts = EvalOptions {
        cutoffs: a.cutoffs,
        bias_trials: a.bias_trials,
        bias_examples: a.bias_examples,
        seed: a.seed,
    };
    let report = evaluate_bootstrap(&ck, &examples, &opts, 1, &Executor::new(a.workers)).map_err(|e| fail(DATA, e))?;
    let mut record = serde_json::json!({
        "n_examples": report.n_examples,
        "position_bias": report.position_bias,
        "mean_inference_seconds": report.mean_inference_seconds,
    });
    for (k, v) in &report.ndcg_at {
        record[format!("ndcg@{k}")] = serde_json::json!(v);
    }
    println!("{record}");
    Ok(())
}

fn run_rank(a: RankArgs) -> Result<(), Failure> {
    let (ck, examples) = load_for_eval(&a.data)?;
    let ex = examples
        .get(a.example)
        .ok_or_else(|| fail(DATA, format!("example {} out of range (split has {})", a.example, examples.len())))?;
    let ranking = ck.rank(&ex.history, &ex.slate).map_err(|e| fail(DATA, e))?;
    println!("{}", render_target(&ranking));
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<(), Failure> {
    check_cutoffs(&a.cutoffs)?;
    if a.p.is_empty() || a.p.contains(&0) {
        return Err(fail(CONFIG, "--p values must be >= 1"));
    }
    let (ck, mut examples) = load_for_eval(&a.data)?;
    if let Some(limit) = a.limit {
        examples.truncate(limit.max(1));
    }
    let opts = EvalOptions {
        cutoffs: a.cutoffs,
        bias_trials: 0,
        bias_examples: 0,
        seed: a.seed,
    };
    let exec = Executor::sequential();
    // warm-up pass so the first setting does not pay for cold caches
    let warm = &examples[..examples.len().min(20)];
    evaluate_bootstrap(&ck, warm, &opts, 1, &exec).map_err(|e| fail(DATA, e))?;
    for &p in &a.p {
        let report = evaluate_bootstrap(&ck, &examples, &opts, p, &exec).map_err(|e| fail(DATA, e))?;
        let mut record = serde_json::json!({ "p": p, "n_examples": report.n_examples, "tpd_seconds": report.mean_inference_seconds });
        for (k, v) in &report.ndcg_at {
            record[format!("ndcg@{k}")] = serde_json::json!(v);
        }
        println!("{record}");
    }
    Ok(())
}
