use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use anyhow::{bail, Context, Result};
use aste_core::checkpoint;
use aste_core::config::{Ablation, BackboneKind, RunConfig};
use aste_core::corpus::{
    self, attach_dependencies, compute_stats, read_conll, read_sidecar, read_v2_file, role_collisions,
    write_sidecar, CorpusStats, DepRecord, RawExample, Sentence, SPLITS,
};
use aste_core::evaluation::{render_table, score};
use aste_core::training::train;
use aste_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("no `<split>_triplets.txt` files found in {0}")]
    NoDataFound(PathBuf),
}

#[derive(Parser)]
#[command(name = "aste", version, about = "Aspect sentiment triplet extraction")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate the raw splits, attach dependency parses and print corpus statistics.
    Preprocess(PreprocessArgs),
    /// Train a model and keep the best dev checkpoint.
    Train(RunArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Extract triplets from raw sentences.
    Predict(PredictArgs),
    /// Train and score every ablation configuration in turn.
    Ablate(RunArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory with `<split>_triplets.txt` files.
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory with `<split>.conllu`, `<split>.conll` or `<split>.jsonl` parser output.
    #[arg(long)]
    parser_output: Option<PathBuf>,
    /// Where the processed splits go; defaults to the data directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with `<split>_triplets.txt` and `<split>.deps.jsonl`.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    backbone: Option<BackboneKind>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Dependency parses, one JSON record per input line.
    #[arg(long, conflicts_with = "parser_cmd")]
    sidecar: Option<PathBuf>,
    /// Shell command that reads sentences on stdin and prints one JSON
    /// dependency record per line.
    #[arg(long)]
    parser_cmd: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Preprocess(a) => preprocess(&a),
        Cmd::Train(a) => run_train(&a),
        Cmd::Eval(a) => run_eval(&a),
        Cmd::Predict(a) => run_predict(&a),
        Cmd::Ablate(a) => run_ablate(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let splits: Vec<&str> = SPLITS
        .iter()
        .copied()
        .filter(|s| corpus::v2_path(&args.data_dir, s).exists())
        .collect();
    if splits.is_empty() {
        return Err(CliError::NoDataFound(args.data_dir.clone()).into());
    }
    let out_dir = args.out_dir.as_deref().unwrap_or(&args.data_dir);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut rows = Vec::new();
    for split in splits {
        let v2 = corpus::v2_path(&args.data_dir, split);
        let examples = read_v2_file(&v2)?;
        if let Some(parses) = &args.parser_output {
            let records = read_parses(parses, split)?;
            attach_all(&examples, &records, &parser_file(parses, split)?)?;
            let out_v2 = corpus::v2_path(out_dir, split);
            if out_v2 != v2 {
                fs::copy(&v2, &out_v2).with_context(|| format!("copying to {}", out_v2.display()))?;
            }
            write_sidecar(&corpus::sidecar_path(out_dir, split), &records)?;
        }
        rows.push((split, compute_stats(&examples)));
    }
    print!("{}", stats_table(&rows));
    let json: serde_json::Map<String, serde_json::Value> = rows
        .iter()
        .map(|(s, c)| (s.to_string(), serde_json::to_value(c).unwrap()))
        .collect();
    let path = out_dir.join("stats.json");
    fs::write(&path, serde_json::to_string_pretty(&json)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parser_file(dir: &Path, split: &str) -> Result<PathBuf> {
    ["conllu", "conll", "jsonl"]
        .iter()
        .map(|ext| dir.join(format!("{split}.{ext}")))
        .find(|p| p.exists())
        .with_context(|| format!("no parser output for `{split}` in {}", dir.display()))
}

fn read_parses(dir: &Path, split: &str) -> Result<Vec<DepRecord>> {
    let path = parser_file(dir, split)?;
    let records = if path.extension().is_some_and(|e| e == "jsonl") {
        read_sidecar(&path)?
    } else {
        read_conll(&path)?
    };
    Ok(records)
}

fn attach_all(examples: &[RawExample], records: &[DepRecord], source: &Path) -> Result<Vec<Sentence>> {
    if examples.len() != records.len() {
        bail!(
            "{} has {} parses for {} sentences",
            source.display(),
            records.len(),
            examples.len()
        );
    }
    let mut out = Vec::with_capacity(examples.len());
    for (i, (ex, rec)) in examples.iter().zip(records).enumerate() {
        let s = attach_dependencies(ex, rec).with_context(|| format!("{}: sentence {}", source.display(), i + 1))?;
        let collisions = role_collisions(&s);
        if collisions > 0 {
            log::warn!(
                "{}: sentence {} has {collisions} span(s) acting as both aspect and opinion",
                source.display(),
                i + 1
            );
        }
        out.push(s);
    }
    Ok(out)
}

fn stats_table(rows: &[(&str, CorpusStats)]) -> String {
    let mut s = format!("{:<6} {:>6} {:>6} {:>6} {:>6} {:>6}\n", "split", "#NEU", "#POS", "#NEG", "#S", "#T");
    for (split, c) in rows {
        s += &format!(
            "{:<6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            split, c.neu, c.pos, c.neg, c.sentences, c.triplets
        );
    }
    s
}

/// Config file (or a preset) with command-line overrides applied, then validated.
fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None if args.backbone == Some(BackboneKind::Pretrained) => RunConfig::default(),
        None => RunConfig::toy(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    if let Some(b) = args.backbone {
        cfg.encoder.backbone = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<Sentence>> {
    corpus::load_split_dir(dir, split).with_context(|| format!("loading split `{split}` from {}", dir.display()))
}

fn load_optional(dir: &Path, split: &str) -> Result<Vec<Sentence>> {
    if corpus::v2_path(dir, split).exists() {
        load_split(dir, split)
    } else {
        Ok(Vec::new())
    }
}

fn run_train(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let train_set = load_split(&args.data_dir, "train")?;
    let dev = load_optional(&args.data_dir, "dev")?;
    let summary = train(&cfg, &train_set, &dev, &args.out_dir, &Device::Cpu)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    if !args.checkpoint.exists() {
        bail!("checkpoint {} not found", args.checkpoint.display());
    }
    let ex = checkpoint::load(&args.checkpoint, &Device::Cpu)?;
    let sentences = load_split(&args.data_dir, &args.split)?;
    let preds = ex.predict(&sentences, ex.config.batch_size)?;
    let gold: Vec<_> = sentences.iter().map(|s| s.gold_triplets.clone()).collect();
    let report = score(&preds, &gold)?;
    let out_dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).to_owned(),
    };
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.json"), ex.config.to_json_pretty())?;
    let path = out_dir.join(format!("eval_{}.json", args.split));
    fs::write(&path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", render_table(&[(args.split.clone(), &report)]));
    Ok(())
}

#[derive(Serialize)]
struct PredictedTriplet {
    aspect: [usize; 2],
    opinion: [usize; 2],
    polarity: String,
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let ex = checkpoint::load(&args.checkpoint, &Device::Cpu)?;
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let records = match (&args.sidecar, &args.parser_cmd) {
        (Some(path), _) => read_sidecar(path)?,
        (None, Some(cmd)) => run_parser(cmd, &lines)?,
        (None, None) => bail!("predict needs --sidecar or --parser-cmd"),
    };
    if records.len() != lines.len() {
        bail!("{} parses for {} sentences", records.len(), lines.len());
    }
    let mut sentences = Vec::with_capacity(lines.len());
    for (i, (line, rec)) in lines.iter().zip(&records).enumerate() {
        let raw = RawExample {
            text: line.to_string(),
            words: line.split_whitespace().map(str::to_owned).collect(),
            triplets: vec![],
        };
        sentences.push(attach_dependencies(&raw, rec).with_context(|| format!("sentence {}", i + 1))?);
    }
    let preds = ex.predict(&sentences, ex.config.batch_size)?;
    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    for (i, triplets) in preds.iter().enumerate() {
        let ts: Vec<PredictedTriplet> = triplets
            .iter()
            .map(|t| PredictedTriplet {
                aspect: [t.aspect.start, t.aspect.end],
                opinion: [t.opinion.start, t.opinion.end],
                polarity: t.polarity.tag().to_owned(),
            })
            .collect();
        writeln!(out, "{}", json!({ "sentence_id": i, "triplets": ts }))?;
    }
    out.flush()?;
    Ok(())
}

fn run_parser(cmd: &str, lines: &[&str]) -> Result<Vec<DepRecord>> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .with_context(|| format!("starting parser `{cmd}`"))?;
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        for l in lines {
            writeln!(stdin, "{l}")?;
        }
    }
    let output = child.wait_with_output()?;
    if !output.status.success() {
        bail!("parser `{cmd}` exited with {}", output.status);
    }
    String::from_utf8(output.stdout)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("parser output line {}", i + 1)))
        .collect()
}

fn run_ablate(args: &RunArgs) -> Result<()> {
    let base = resolve_config(args)?;
    let train_set = load_split(&args.data_dir, "train")?;
    let dev = load_optional(&args.data_dir, "dev")?;
    let test = load_optional(&args.data_dir, "test")?;
    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("ablation_base_config.json"), base.to_json_pretty())?;
    let rows_path = args.out_dir.join("ablation.jsonl");
    let mut rows = fs::File::create(&rows_path)?;
    let mut failures = 0;
    for ablation in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.ablation = ablation;
        cfg.run_name = format!("{}_{}", base.run_name, ablation.name());
        let row = match ablation_run(&cfg, &train_set, &dev, &test, &args.out_dir) {
            Ok(r) => r,
            Err(e) => {
                failures += 1;
                log::error!("ablation {ablation} failed: {e:#}");
                json!({ "ablation": ablation.name(), "row": ablation.row_label(), "status": "failed", "error": format!("{e:#}") })
            }
        };
        println!("{row}");
        writeln!(rows, "{row}")?;
    }
    if failures > 0 {
        bail!("{failures} of {} ablation runs failed", Ablation::ALL.len());
    }
    Ok(())
}

fn ablation_run(
    cfg: &RunConfig,
    train_set: &[Sentence],
    dev: &[Sentence],
    test: &[Sentence],
    out_dir: &Path,
) -> Result<serde_json::Value> {
    let summary = train(cfg, train_set, dev, out_dir, &Device::Cpu)?;
    let ex = checkpoint::load(&summary.run_dir.join("best.ckpt"), &Device::Cpu)?;
    let (eval_name, eval_set) = if test.is_empty() { ("train", train_set) } else { ("test", test) };
    let preds = ex.predict(eval_set, cfg.batch_size)?;
    let gold: Vec<_> = eval_set.iter().map(|s| s.gold_triplets.clone()).collect();
    let report = score(&preds, &gold)?;
    Ok(json!({
        "ablation": cfg.ablation.name(),
        "row": cfg.ablation.row_label(),
        "status": "ok",
        "steps": summary.steps,
        "best_dev_f1": summary.best_dev_f1,
        "eval_split": eval_name,
        "precision": report.precision(),
        "recall": report.recall(),
        "f1": report.f1(),
    }))
}
