use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use dgr_core::analysis::{self, Axis};
use dgr_core::config::{format_kv, DataFormat, KvMap, RunConfig};
use dgr_core::corpus::{
    build_vocab, generate_synthetic, load_split, save_jsonl, Casing, DatasetSplit, SyntheticConfig,
};
use dgr_core::embed::load_pretrained_vectors;
use dgr_core::gradsuite::{self, GRADCHECK_TOLERANCE};
use dgr_core::model::Model;
use dgr_core::ranker::{read_predictions, write_predictions, PredictionRecord};
use dgr_core::rulekit::{coverage_of, disambiguate, RuleDecision};
use dgr_core::trainer::{encode_split, evaluate_accuracy, train};
use dgr_core::{DgrError, Result};

#[derive(Parser)]
#[command(
    name = "dgr",
    version,
    about = "Dependent gated reader for cloze-style reading comprehension"
)]
struct Cli {
    /// Log filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a reader and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a labelled split.
    Eval(DataArgs),
    /// Write per-sample predictions as JSON lines.
    Predict(PredictArgs),
    /// Finite-difference gradient check over every preset.
    Gradcheck(GradcheckArgs),
    /// Post-hoc analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Apply the capitalised-neighbour rule to a split.
    Disambiguate(DisambiguateArgs),
    /// Generate the seeded synthetic corpus.
    GenSynth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Key = value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// dgr, no-a, no-c, no-ab, no-ac or ga-reader.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    qe_comm: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Model directory written by `train` (e.g. run/best).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "auto")]
    format: String,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to `<out_dir>/predictions.jsonl`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Accuracy bucketed by document or query length.
    Length(LengthArgs),
    /// Candidate-over-query attention maps per layer.
    Attention(AttentionArgs),
    /// One-sided exact McNemar test between two prediction files.
    Mcnemar(McnemarArgs),
}

#[derive(Args)]
struct LengthArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "document")]
    axis: String,
    /// Comma-separated bucket centers.
    #[arg(long, value_delimiter = ',', required = true)]
    centers: Vec<usize>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AttentionArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of leading samples to export.
    #[arg(long, default_value_t = 5)]
    limit: usize,
    /// Also render an SVG heat map per sample.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct McnemarArgs {
    /// Predictions of the system expected to be better.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DisambiguateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "auto")]
    format: String,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 40)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    candidates: usize,
    #[arg(long, default_value = "15,25", value_parser = parse_range)]
    doc_len: (usize, usize),
    #[arg(long, default_value = "5,9", value_parser = parse_range)]
    query_len: (usize, usize),
    #[arg(long, default_value = "synthetic.jsonl")]
    output: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DgrError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| DgrError::io(path, e))
}

/// Records the resolved settings of a command next to its outputs.
fn snapshot(dir: &Path, cmd: &str, pairs: &[(&str, String)]) -> Result<()> {
    let map: KvMap = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    write_file(&dir.join(format!("{cmd}.config")), &format_kv(&map))
}

fn existing(flag: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(DgrError::config(flag, format!("{} does not exist", path.display())))
    }
}

fn format_of(s: &str) -> Result<DataFormat> {
    s.parse().map_err(|e: String| DgrError::config("--format", e))
}

fn print_line(v: &serde_json::Value) {
    println!("{v}");
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut o = KvMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.insert(k.to_string(), v);
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    put("train", path(&a.train));
    put("dev", path(&a.dev));
    put("test", path(&a.test));
    put("format", a.format.clone());
    put("vectors", path(&a.vectors));
    put("preset", a.preset.clone());
    put("hops", a.hops.map(|v| v.to_string()));
    put("hidden", a.hidden.map(|v| v.to_string()));
    put("qe_comm", a.qe_comm.map(|v| v.to_string()));
    put("epochs", a.epochs.map(|v| v.to_string()));
    put("batch_size", a.batch_size.map(|v| v.to_string()));
    put("learning_rate", a.learning_rate.map(|v| v.to_string()));
    put("dropout", a.dropout.map(|v| v.to_string()));
    put("seed", a.seed.map(|v| v.to_string()));
    put("out_dir", path(&a.out_dir));
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| DgrError::config("--set", format!("expected KEY=VALUE, got {kv:?}")))?;
        o.insert(k.trim().to_string(), v.trim().to_string());
    }
    let cfg = RunConfig::resolve(a.config.as_deref(), o)?;
    cfg.model.validate()?;
    cfg.hp.validate()?;
    let train_path = cfg
        .train
        .clone()
        .ok_or_else(|| DgrError::config("train", "a training split is required"))?;
    let dev_path = cfg
        .dev
        .clone()
        .ok_or_else(|| DgrError::config("dev", "a dev split is required"))?;
    existing("train", &train_path)?;
    existing("dev", &dev_path)?;
    write_file(&cfg.out_dir.join("config.snapshot"), &cfg.snapshot())?;

    let train_split = load_split(&train_path, cfg.format, "train", Casing::Lower)?;
    let dev_split = load_split(&dev_path, cfg.format, "dev", Casing::Lower)?;
    let vocab = build_vocab(&[&train_split], cfg.min_count)?;
    let words = match &cfg.vectors {
        Some(p) => {
            existing("vectors", p)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.init_seed);
            let pv = load_pretrained_vectors(p, &vocab, cfg.model.embed.word_dim, &mut rng)?;
            log::info!("pretrained coverage {:.4}", pv.coverage);
            Some(pv.matrix)
        }
        None => None,
    };
    let mut model = Model::new(cfg.model, vocab, words)?;
    let report = train(&mut model, &train_split, &dev_split, &cfg.hp, Some(&cfg.out_dir))?;
    let mut summary = json!({
        "epochs": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "best_dev_acc": report.best_dev_acc,
        "checkpoint": report.best_dir.as_ref().map(|p| p.display().to_string()),
    });
    if let Some(t) = &cfg.test {
        existing("test", t)?;
        let test = load_split(t, cfg.format, "test", Casing::Lower)?;
        summary["test_acc"] = json!(evaluate_accuracy(&model, &encode_split(&model, &test)?)?);
    }
    print_line(&summary);
    Ok(())
}

fn load_for(a: &DataArgs, cmd: &str) -> Result<(Model, DatasetSplit)> {
    existing("--checkpoint", &a.checkpoint)?;
    existing("--data", &a.data)?;
    snapshot(
        &a.out_dir,
        cmd,
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("format", a.format.clone()),
        ],
    )?;
    let model = Model::load(&a.checkpoint)?;
    let split = load_split(&a.data, format_of(&a.format)?, "data", Casing::Lower)?;
    Ok((model, split))
}

fn cmd_eval(a: DataArgs) -> Result<()> {
    let (model, split) = load_for(&a, "eval")?;
    let acc = evaluate_accuracy(&model, &encode_split(&model, &split)?)?;
    print_line(&json!({"samples": split.len(), "accuracy": acc}));
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (model, split) = load_for(&a.data, "predict")?;
    let enc = encode_split(&model, &split)?;
    let records: Vec<PredictionRecord> = enc
        .par_iter()
        .map(|s| model.prediction_record(s))
        .collect::<Result<_>>()?;
    let out = a.output.unwrap_or_else(|| a.data.out_dir.join("predictions.jsonl"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DgrError::io(dir, e))?;
    }
    write_predictions(&records, &out)?;
    print_line(&json!({"samples": records.len(), "output": out.display().to_string()}));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    snapshot(
        &a.out_dir,
        "gradcheck",
        &[
            ("seed", a.seed.to_string()),
            ("tolerance", GRADCHECK_TOLERANCE.to_string()),
        ],
    )?;
    let entries = gradsuite::run_suite(a.seed)?;
    let mut text = String::new();
    for e in &entries {
        let line = serde_json::to_string(e)?;
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let ok = entries.iter().all(|e| e.passed);
    let summary = json!({"max_rel_error": worst, "tolerance": GRADCHECK_TOLERANCE, "passed": ok});
    println!("{summary}");
    text.push_str(&format!("{summary}\n"));
    write_file(&a.out_dir.join("gradcheck.jsonl"), &text)?;
    if ok {
        Ok(())
    } else {
        Err(DgrError::Numerical(format!(
            "gradient check failed: max relative error {worst:.3e}"
        )))
    }
}

fn cmd_length(a: LengthArgs) -> Result<()> {
    existing("--predictions", &a.predictions)?;
    let axis: Axis = a.axis.parse()?;
    let centers: Vec<String> = a.centers.iter().map(|c| c.to_string()).collect();
    snapshot(
        &a.out_dir,
        "analyze-length",
        &[
            ("predictions", a.predictions.display().to_string()),
            ("axis", a.axis.clone()),
            ("centers", centers.join(",")),
        ],
    )?;
    let report = analysis::bucket_by_length(&read_predictions(&a.predictions)?, axis, &a.centers)?;
    let csv = report.to_csv();
    write_file(&a.out_dir.join(format!("length_{}.csv", a.axis)), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_attention(a: AttentionArgs) -> Result<()> {
    let (model, split) = load_for(&a.data, "analyze-attention")?;
    let dir = a.data.out_dir.join("attention");
    let picked: Vec<_> = split.samples.iter().take(a.limit).collect();
    let exports: Vec<_> = picked
        .par_iter()
        .map(|s| {
            let ins = model.inspect(&model.encode(s)?)?;
            analysis::export_attention(&ins.trace, s, &s.occurrences(), &ins.placeholder_scores)
        })
        .collect::<Result<_>>()?;
    for (i, ex) in exports.iter().enumerate() {
        let stem = format!("{i:04}");
        write_file(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(ex)?)?;
        if a.svg {
            write_file(&dir.join(format!("{stem}.svg")), &analysis::render_svg(ex))?;
        }
    }
    print_line(&json!({"exported": exports.len(), "dir": dir.display().to_string()}));
    Ok(())
}

fn cmd_mcnemar(a: McnemarArgs) -> Result<()> {
    existing("--a", &a.a)?;
    existing("--b", &a.b)?;
    snapshot(
        &a.out_dir,
        "analyze-mcnemar",
        &[("a", a.a.display().to_string()), ("b", a.b.display().to_string())],
    )?;
    let r = analysis::mcnemar_from_predictions(&read_predictions(&a.a)?, &read_predictions(&a.b)?)?;
    let line = serde_json::to_string(&r)?;
    write_file(&a.out_dir.join("mcnemar.json"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn cmd_disambiguate(a: DisambiguateArgs) -> Result<()> {
    existing("--data", &a.data)?;
    snapshot(
        &a.out_dir,
        "disambiguate",
        &[("data", a.data.display().to_string()), ("format", a.format.clone())],
    )?;
    let split = load_split(&a.data, format_of(&a.format)?, "data", Casing::Preserve)?;
    let decisions: Vec<RuleDecision> = split.samples.par_iter().map(disambiguate).collect();
    let cov = coverage_of(&decisions, &split);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut text = String::new();
    for d in &decisions {
        text.push_str(&serde_json::to_string(d)?);
        text.push('\n');
    }
    let summary = json!({"summary": {
        "samples": cov.samples,
        "correct_disambiguation": cov.correct_fraction,
        "wrong_disambiguation": cov.wrong_fraction,
        "total_disambiguation": cov.disambiguated,
    }});
    text.push_str(&format!("{summary}\n"));
    write_file(&a.out_dir.join("decisions.jsonl"), &text)?;
    out.write_all(text.as_bytes()).map_err(|e| DgrError::io("stdout", e))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        vocab_size: a.vocab_size,
        doc_len: a.doc_len,
        query_len: a.query_len,
        candidates: a.candidates,
        samples: a.samples,
        seed: a.seed,
    };
    let split = generate_synthetic(&cfg, "synth")?;
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DgrError::io(dir, e))?;
    }
    save_jsonl(&split, &a.output)?;
    let range = |r: (usize, usize)| format!("{},{}", r.0, r.1);
    let dir = a.output.parent().unwrap_or(Path::new("."));
    snapshot(
        dir,
        "gen-synth",
        &[
            ("seed", a.seed.to_string()),
            ("samples", a.samples.to_string()),
            ("vocab_size", a.vocab_size.to_string()),
            ("candidates", a.candidates.to_string()),
            ("doc_len", range(a.doc_len)),
            ("query_len", range(a.query_len)),
            ("output", a.output.display().to_string()),
        ],
    )?;
    print_line(&json!({"samples": split.len(), "output": a.output.display().to_string()}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Analyze(AnalyzeCmd::Length(a)) => cmd_length(a),
        Cmd::Analyze(AnalyzeCmd::Attention(a)) => cmd_attention(a),
        Cmd::Analyze(AnalyzeCmd::Mcnemar(a)) => cmd_mcnemar(a),
        Cmd::Disambiguate(a) => cmd_disambiguate(a),
        Cmd::GenSynth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
