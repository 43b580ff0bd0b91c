mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use rede_core::corpus::{load_corpus, read_run_file, write_run_file, Query, RankedList, RecordFormat};
use rede_core::dense::DenseIndex;
use rede_core::eval::{evaluate_run, export_distill_dataset, measure_latency, run_batch, Gain};
use rede_core::judge::judge_candidates;
use rede_core::pipeline::{DefaultPolicy, InitialRetriever, Method};
use rede_core::sparse::{Bm25Params, SparseIndex};

use config::{read_queries, Engine, EncoderSpec, RunConfig};

#[derive(Parser)]
#[command(name = "rede", version, about = "Zero-shot dense retrieval with LLM relevance feedback")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index from a corpus file.
    IndexSparse {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        k1: f64,
        #[arg(long, default_value_t = 0.4)]
        b: f64,
    },
    /// Validate precomputed embeddings, or compute them with --encode.
    IngestDense(IngestArgs),
    /// Retrieve for every query and write a TREC run file.
    Search(SearchArgs),
    /// Score a run file against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        exponential_gain: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure per-query latency, one query at a time.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "rede")]
        method: Method,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write refined query vectors as a JSONL training set.
    ExportDistill {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge the initial candidates of each query and print the judgments.
    Judge {
        #[command(flatten)]
        run: RunArgs,
        /// Judge only these documents instead of the initial candidates.
        #[arg(long = "doc")]
        docs: Vec<String>,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, required_unless_present = "encode")]
    vectors: Option<PathBuf>,
    #[arg(long, required_unless_present = "encode")]
    manifest: Option<PathBuf>,
    /// Encode a corpus with the hashing encoder (or the config's encoder).
    #[arg(long, requires = "corpus", requires = "out_dir")]
    encode: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Take the encoder from this run config instead of --dim.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's queries path.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    k_initial: Option<usize>,
    #[arg(long)]
    max_kstar: Option<usize>,
    #[arg(long, value_parser = parse_policy)]
    default_policy: Option<DefaultPolicy>,
    #[arg(long, value_parser = parse_initial)]
    initial_retriever: Option<InitialRetriever>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    /// Overrides the gateway endpoint of an HTTP gateway.
    #[arg(long, env = "REDE_GATEWAY_URL")]
    gateway_url: Option<String>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    /// Also write one JSON trace per query to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Queries processed concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Run tag, the last column of the run file. Defaults to the method.
    #[arg(long)]
    tag: Option<String>,
}

fn parse_policy(s: &str) -> Result<DefaultPolicy, String> {
    s.parse().map_err(|e: rede_core::Error| e.to_string())
}

fn parse_initial(s: &str) -> Result<InitialRetriever, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("expected sparse, dense or hybrid, got {s:?}"))
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, Engine, Vec<Query>)> {
        let mut config = RunConfig::load(&self.config)?;
        let p = &mut config.pipeline;
        if let Some(k) = self.k_initial {
            p.k_initial = k;
        }
        if let Some(m) = self.max_kstar {
            p.max_kstar = Some(m);
        }
        if let Some(d) = self.default_policy {
            p.default_policy = d;
        }
        if let Some(r) = self.initial_retriever {
            p.initial_retriever = r;
        }
        if let Some(d) = self.depth {
            p.output_depth = d;
        }
        if let Some(a) = self.alpha {
            config.fusion.alpha = a;
        }
        let queries_path = config.queries_path(self.queries.as_deref())?;
        let engine = Engine::build(&config, self.gateway_url.as_deref())?;
        let queries = read_queries(&queries_path)?;
        Ok((config, engine, queries))
    }
}

fn write_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, body + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

fn index_sparse(corpus: &Path, out: &Path, params: Bm25Params) -> Result<()> {
    let corpus = load_corpus(corpus, RecordFormat::from_path(corpus))?;
    let index = SparseIndex::build(&corpus, params)?;
    index.save(out)?;
    eprintln!(
        "indexed {} documents (avg length {:.1}) into {}",
        index.doc_count(),
        index.avg_doc_length(),
        out.display()
    );
    Ok(())
}

fn ingest_dense(args: &IngestArgs) -> Result<()> {
    if !args.encode {
        let (Some(v), Some(m)) = (&args.vectors, &args.manifest) else {
            bail!("--vectors and --manifest are required without --encode");
        };
        let index = DenseIndex::ingest(v, m)?;
        eprintln!("{} vectors of dim {} validated", index.len(), index.dim());
        return Ok(());
    }
    let (Some(corpus_path), Some(out_dir)) = (&args.corpus, &args.out_dir) else {
        bail!("--encode needs --corpus and --out-dir");
    };
    let spec = match &args.config {
        Some(c) => RunConfig::load(c)?.encoder,
        None => EncoderSpec::Hashing { dim: args.dim },
    };
    let encoder = spec.build()?;
    let corpus = load_corpus(corpus_path, RecordFormat::from_path(corpus_path))?;
    let mut ids = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    let docs: Vec<_> = corpus.iter().collect();
    for chunk in docs.chunks(64) {
        let texts: Vec<String> = chunk.iter().map(|d| d.contents().to_owned()).collect();
        rows.extend(encoder.encode(&texts)?);
        ids.extend(chunk.iter().map(|d| d.doc_id.clone()));
    }
    let (vectors, manifest) = DenseIndex::from_rows(ids, rows)?.write(out_dir)?;
    eprintln!("wrote {} and {}", vectors.display(), manifest.display());
    Ok(())
}

fn search(args: &SearchArgs) -> Result<()> {
    let (_, engine, queries) = args.run.load()?;
    let results = run_batch(&engine.retriever(), args.method, &queries, &engine.search, args.parallel.max(1))?;
    let tag = args.tag.clone().unwrap_or_else(|| args.method.to_string());
    let runs: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    write_run_file(&args.out, &runs, &tag)?;
    if let Some(path) = &args.trace {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        for (_, trace) in &results {
            serde_json::to_writer(&mut w, trace)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    if let Some(g) = &engine.gateway {
        let c = g.counts();
        tracing::info!(judge = c.judge, generation = c.generation, "completion calls");
    }
    eprintln!("wrote {} queries to {}", runs.len(), args.out.display());
    Ok(())
}

fn judge(run: &RunArgs, docs: &[String]) -> Result<()> {
    let (_, engine, queries) = run.load()?;
    let r = engine.retriever();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for q in &queries {
        let candidates = if docs.is_empty() {
            r.candidates(q, &engine.search)?
        } else {
            RankedList::from_scores(
                q.query_id.clone(),
                docs.iter().enumerate().map(|(i, d)| (d.clone(), -(i as f64))).collect(),
                docs.len(),
            )
        };
        let outcome = judge_candidates(&engine.judge, &engine.corpus, q, &candidates)?;
        for j in &outcome.judgments {
            serde_json::to_writer(&mut out, j)?;
            writeln!(out)?;
        }
        for s in &outcome.skipped {
            eprintln!("{}: skipped {} ({})", q.query_id, s.doc_id, s.reason);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IndexSparse { corpus, out, k1, b } => index_sparse(&corpus, &out, Bm25Params { k1, b }),
        Command::IngestDense(args) => ingest_dense(&args),
        Command::Search(args) => search(&args),
        Command::Eval { run, qrels, k, exponential_gain, out } => {
            let runs = read_run_file(&run)?;
            let qrels = config::load_qrels_file(&qrels)?;
            let gain = if exponential_gain { Gain::Exponential } else { Gain::Linear };
            let report = evaluate_run(&runs, &qrels, k, gain)?;
            write_json(out.as_deref(), &report)
        }
        Command::Bench { run, method, warmup, out } => {
            let (_, engine, queries) = run.load()?;
            let r = engine.retriever();
            let report = measure_latency(|q| r.search(method, q, &engine.search).map(|(_, t)| t), &queries, warmup)?;
            write_json(out.as_deref(), &report)
        }
        Command::ExportDistill { run, out } => {
            let (_, engine, queries) = run.load()?;
            let n = export_distill_dataset(&engine.retriever(), &engine.search, &queries, &out)?;
            eprintln!("wrote {n} of {} queries to {}", queries.len(), out.display());
            Ok(())
        }
        Command::Judge { run, docs } => judge(&run, &docs),
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
