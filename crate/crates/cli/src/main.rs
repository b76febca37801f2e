use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use hiermds::analysis::{analyze, compare, AttentionTrace};
use hiermds::data::{gen_synthetic, load_jsonl, make_source_batch, MultiDocExample, SyntheticSpec};
use hiermds::decode::{greedy_generate, GenerationConfig};
use hiermds::experiment::{delta_table, run_row, ExperimentSpec, ABLATION_GRID};
use hiermds::kv::KvMap;
use hiermds::rouge;
use hiermds::train::{load_checkpoint, Trainer};
use hiermds::vocab::{Vocabulary, EOS};
use hiermds::Error;

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "HIERMDS_OUT_DIR";

#[derive(Parser)]
#[command(name = "hiermds", version, about = "Hierarchical multi-document summarization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic fact-merging dataset as JSONL.
    GenData(GenDataArgs),
    /// Train a model from an experiment file.
    Train(TrainArgs),
    /// Greedy-decode summaries with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score hypotheses against references with ROUGE-1/2/L.
    Evaluate(EvaluateArgs),
    /// Self-document mass and CDS over attention traces.
    Analyze(AnalyzeArgs),
    /// Train the six component-ablation rows and compare them.
    Ablate(AblateArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Documents per example, `N` or `MIN-MAX`.
    #[arg(long, default_value = "2-3")]
    n_docs: String,
    /// Facts per document, `N` or `MIN-MAX`.
    #[arg(long, default_value = "1-2")]
    facts: String,
    #[arg(long, default_value_t = 10)]
    n_keys: usize,
    #[arg(long, default_value_t = 40)]
    n_values: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override a config entry, `KEY=VALUE` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Jsonl,
    Text,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL examples (`documents`, `summary`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write one attention trace per example into this directory.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Vocabulary file; defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: OutputFormat,
    #[arg(long)]
    max_length: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_length: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Hypotheses: JSONL with a `summary` field, or plain text lines.
    #[arg(long)]
    hyp: PathBuf,
    /// References, same formats as `--hyp`.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace_dir: PathBuf,
    /// Traces of a reference model; adds a ratio table.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ratio table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    base_config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn parse_range(s: &str, what: &str) -> Result<(usize, usize)> {
    let parse = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|_| config_error(format!("bad {what} `{s}`")))
    };
    match s.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    create_parent(path)?;
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: a.seed,
        count: a.count,
        n_docs: parse_range(&a.n_docs, "--n-docs")?,
        facts_per_doc: parse_range(&a.facts, "--facts")?,
        n_keys: a.n_keys,
        n_values: a.n_values,
    };
    let mut w = create(&a.out)?;
    for ex in gen_synthetic(spec)? {
        writeln!(w, "{}", ex.to_json_line())?;
    }
    w.flush()?;
    eprintln!("wrote {} examples to {}", a.count, a.out.display());
    Ok(())
}

/// Reads an experiment file and applies `KEY=VALUE` overrides.
fn load_spec(path: &Path, overrides: &[String], out_dir: Option<&Path>) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut kv = KvMap::parse(&text)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got `{o}`")))?;
        kv.set(k.trim(), v.trim());
    }
    match out_dir {
        Some(d) => kv.set("out_dir", d.display()),
        None if !kv.contains("out_dir") => {
            if let Ok(d) = std::env::var(OUT_DIR_ENV) {
                kv.set("out_dir", d);
            }
        }
        None => {}
    }
    Ok(ExperimentSpec::from_kv(&kv)?)
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    create_parent(path)?;
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_run_files(spec: &ExperimentSpec, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.conf"), spec.to_kv().to_text())?;
    vocab.save(&dir.join("vocab.txt"))?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut spec = load_spec(&a.config, &overrides, a.out_dir.as_deref())?;
    let data = spec.prepare()?;
    spec.model = data.model.clone();
    let out = spec.out_dir.clone();
    if spec.train.checkpoint_path.is_none() {
        spec.train.checkpoint_path = Some(out.join("checkpoint.bin"));
    }
    write_run_files(&spec, &data.vocab, &out)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&data.model))?;
            eprintln!("resuming from step {}", ck.optimizer.step);
            Trainer::from_checkpoint(ck, spec.train.clone())?
        }
        None => Trainer::new(
            hiermds::Seq2Seq::init(data.model.clone(), spec.train.seed)?,
            spec.train.clone(),
        )?,
    };
    let mut log = open_log(&out.join("metrics.jsonl"), a.resume.is_some())?;
    let report = trainer.run(&data.train, &data.eval, &spec.gen, Some(&mut log))?;
    log.flush()?;
    if let (Some(first), Some(last)) = (report.steps.first(), report.steps.last()) {
        eprintln!(
            "steps {}..{}: loss {:.4} -> {:.4}",
            first.step, last.step, first.loss, last.loss
        );
    }
    if let Some(e) = report.evals.last() {
        eprintln!(
            "eval: loss {:.4}, token accuracy {:.4}, exact match {:.4}, ROUGE-1/2/L F1 {:.4}/{:.4}/{:.4}",
            e.eval_loss,
            e.token_accuracy,
            e.exact_match,
            e.rouge.rouge1.f1,
            e.rouge.rouge2.f1,
            e.rouge.rouge_l.f1
        );
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt, None)?;
    let model = ck.model;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| {
        a.ckpt
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt")
    });
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != model.config().vocab_size {
        return Err(config_error(format!(
            "vocabulary {} has {} entries but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let gen = GenerationConfig {
        max_length: a.max_length.unwrap_or(model.config().tgt_trunc),
        min_length: a.min_length,
        stop_token: EOS,
    };
    gen.validate(model.config().tgt_trunc)?;
    let raw = load_jsonl(&a.input)?;
    let examples: Vec<MultiDocExample> = raw.iter().map(|r| MultiDocExample::encode(r, &vocab)).collect();
    if let Some(dir) = &a.trace {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = create(&a.out)?;
    let bc = model.config().batch_config();
    let mut id = 0usize;
    for chunk in examples.chunks(a.batch_size.max(1)) {
        let docs: Vec<&[Vec<usize>]> = chunk.iter().map(|e| e.documents.as_slice()).collect();
        let src = make_source_batch(&docs, &bc)?;
        let out = greedy_generate(&model, &src, &gen, a.trace.is_some())?;
        for (i, seq) in out.sequences.iter().enumerate() {
            let text = vocab.decode_summary(seq);
            match a.format {
                OutputFormat::Jsonl => writeln!(w, "{}", json!({"id": id, "summary": text}))?,
                OutputFormat::Text => writeln!(w, "{text}")?,
            }
            if let (Some(dir), Some(traces)) = (&a.trace, &out.traces) {
                traces[i].save(&dir.join(format!("{id:05}.trace")))?;
            }
            id += 1;
        }
    }
    w.flush()?;
    eprintln!("wrote {id} summaries to {}", a.out.display());
    Ok(())
}

/// One summary per line: a JSON object's `summary` field or the raw text.
fn read_summaries(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|line| {
            serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("summary").and_then(|s| s.as_str()).map(str::to_string))
                .unwrap_or_else(|| line.to_string())
        })
        .collect())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let hyps = read_summaries(&a.hyp)?;
    let refs = read_summaries(&a.reference)?;
    if hyps.is_empty() {
        return Err(Error::Validation(format!("{} has no hypotheses", a.hyp.display())).into());
    }
    if hyps.len() != refs.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        ))
        .into());
    }
    let scores: Vec<rouge::RougeScore> = hyps
        .iter()
        .zip(&refs)
        .map(|(h, r)| rouge::score_text(h, r))
        .collect();
    let corpus = rouge::corpus_mean(&scores);
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(
        &mut w,
        &json!({"count": scores.len(), "corpus": corpus, "per_example": scores}),
    )?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4}  (F1, {} pairs)",
        corpus.rouge1.f1,
        corpus.rouge2.f1,
        corpus.rouge_l.f1,
        scores.len()
    );
    Ok(())
}

fn load_traces(dir: &Path) -> Result<Vec<AttentionTrace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Validation(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "trace"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no .trace files in {}", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| AttentionTrace::load(p).map_err(Into::into))
        .collect()
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<()> {
    let report = analyze(&load_traces(&a.trace_dir)?)?;
    let mut doc = json!({"trace_dir": a.trace_dir.display().to_string(), "report": report});
    println!("self-document mass {:.6}", report.self_doc.corpus);
    match report.cds.corpus_mean {
        Some(c) => println!("CDS {c:.6}"),
        None => println!("CDS undefined (single-document inputs)"),
    }
    if let Some(base) = &a.baseline {
        let other = analyze(&load_traces(base)?)?;
        let ratio = compare(&report, &other);
        println!("ratio vs baseline: self-document {:.6}", ratio.self_doc);
        if let Some(path) = &a.csv {
            let mut w = create(path)?;
            writeln!(w, "metric,value,baseline,ratio")?;
            writeln!(
                w,
                "self_doc_mass,{},{},{}",
                report.self_doc.corpus, other.self_doc.corpus, ratio.self_doc
            )?;
            if let (Some(x), Some(y), Some(r)) = (report.cds.corpus_mean, other.cds.corpus_mean, ratio.cds) {
                writeln!(w, "cds,{x},{y},{r}")?;
            }
            w.flush()?;
        }
        doc["baseline"] = json!(other);
        doc["ratio"] = json!(ratio);
    }
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut spec = load_spec(&a.base_config, &a.overrides, Some(&a.out_dir))?;
    let data = spec.prepare()?;
    spec.model = data.model.clone();
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut grid = create(&a.out_dir.join("grid.tsv"))?;
    writeln!(grid, "row\tname\tuse_sod\thier_enc\thier_dec\tpos_restart")?;
    for r in &ABLATION_GRID {
        r.apply(&data.model)?;
        writeln!(
            grid,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.row,
            r.name,
            u8::from(r.use_sod),
            u8::from(r.hier_enc),
            u8::from(r.hier_dec),
            u8::from(r.pos_restart)
        )?;
    }
    grid.flush()?;
    let mut results = Vec::new();
    for r in &ABLATION_GRID {
        let dir = a.out_dir.join(format!("row{}", r.row));
        let mut row_spec = spec.clone();
        row_spec.model = r.apply(&data.model)?;
        row_spec.out_dir = dir.clone();
        row_spec.train.checkpoint_path = Some(dir.join("checkpoint.bin"));
        write_run_files(&row_spec, &data.vocab, &dir)?;
        let mut log = open_log(&dir.join("metrics.jsonl"), false)?;
        eprintln!("row {} ({})", r.row, r.name);
        let (_, result) = run_row(&row_spec, &data, r, Some(&mut log))?;
        log.flush()?;
        results.push(result);
    }
    let table = delta_table(&results)?;
    fs::write(a.out_dir.join("ablation.tsv"), &table)?;
    let mut w = create(&a.out_dir.join("ablation.json"))?;
    serde_json::to_writer_pretty(&mut w, &results)?;
    writeln!(w)?;
    w.flush()?;
    print!("{table}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Validation(_) | Error::Parse { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
