use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dagrag::bench::{self, report, BenchReport, DatasetFormat, Ensemble, EvalConfig, LoadOptions, TraceRecord};
use dagrag::corpus::{self, ChunkStore, RawDocument};
use dagrag::curate::{self, CurationRecord, ScoreField};
use dagrag::embed::EmbeddingVector;
use dagrag::retrieve::Retriever;
use dagrag::tokenize::ByteQuarterTokenizer;
use dagrag::vindex::{Index, IndexEntry};
use dagrag::{Config, Error};

#[derive(Parser)]
#[command(name = "dagrag", version, about = "Gated, DAG-decomposed retrieval-augmented QA")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, env = "DAGRAG_CONFIG")]
    config: Option<PathBuf>,
    /// Chunk store, overriding the config.
    #[arg(long, global = true)]
    chunks: Option<PathBuf>,
    /// Index file, overriding the config.
    #[arg(long, global = true)]
    index: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk JSONL documents into the chunk store.
    Ingest(IngestArgs),
    /// Build, query or inspect the vector index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Answer one question and emit its trace.
    Ask(AskArgs),
    /// Evaluate on a benchmark file.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Prepare instruction-tuning data.
    #[command(subcommand)]
    Curate(CurateCommand),
    /// Rebuild reports from trace files.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// JSONL documents with `source`, `title` and `text`; several files are
    /// read as one stream.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Write the manifest JSON here.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed every chunk and build the HNSW index.
    Build,
    /// Nearest chunks for a query, one `id<TAB>score` line each.
    Search {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Brute-force scan instead of graph search.
        #[arg(long, conflicts_with = "rerank")]
        exact: bool,
        /// Coarse search followed by reranking.
        #[arg(long)]
        rerank: bool,
    },
    /// Header fields of the saved index.
    Stats,
}

#[derive(Args, Clone)]
struct Toggles {
    #[arg(long)]
    no_gate: bool,
    #[arg(long)]
    no_dag: bool,
    #[arg(long)]
    no_rag: bool,
    #[arg(long)]
    retrieve_n: Option<usize>,
}

impl Toggles {
    fn apply(&self, cfg: &mut Config) {
        let p = &mut cfg.pipeline;
        p.enable_gate &= !self.no_gate;
        p.enable_dag &= !self.no_dag;
        p.enable_rag &= !self.no_rag;
        if let Some(n) = self.retrieve_n {
            p.retrieve_n = n;
        }
    }
}

#[derive(Args)]
struct AskArgs {
    question: String,
    #[command(flatten)]
    toggles: Toggles,
    /// Write the trace here and print only the answer.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Native,
    Medqa,
    Medmcqa,
    Mmlu,
    Pubmedqa,
    Bioasq,
}

impl From<Format> for DatasetFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Native => DatasetFormat::Native,
            Format::Medqa => DatasetFormat::MedQa,
            Format::Medmcqa => DatasetFormat::MedMcqa,
            Format::Mmlu => DatasetFormat::Mmlu,
            Format::Pubmedqa => DatasetFormat::PubMedQa,
            Format::Bioasq => DatasetFormat::BioAsq,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    format: Format,
    /// Dataset name in reports; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    /// Drop bundled context passages.
    #[arg(long)]
    questions_only: bool,
    #[arg(long)]
    shuffle_trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    shuffle_seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    exclude_errored: bool,
    /// Trace JSONL output.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Report JSON output.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    toggles: Toggles,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// One evaluation with the configured modules.
    Run {
        #[command(flatten)]
        args: BenchArgs,
        #[arg(long, default_value = "run")]
        variant: String,
    },
    /// Accuracy as a function of the retrieved-document count.
    Sweep {
        #[command(flatten)]
        args: BenchArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
    },
    /// Runs the five module combinations from `base` to all modules on.
    Ablate {
        #[command(flatten)]
        args: BenchArgs,
        /// Subset of variant names to run.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    Quality,
    Reward,
}

#[derive(Subcommand)]
enum CurateCommand {
    /// Keep records scoring at least the threshold.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = curate::QUALITY_THRESHOLD)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "quality")]
        field: Field,
        /// Also drop repeated instructions.
        #[arg(long)]
        dedupe: bool,
    },
    /// Diverse subset by greedy k-center selection.
    Kcenter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
    },
    /// Training records with hard-negative distractors from the index.
    Ragrecords {
        /// JSONL of `question`, `golden_docs`, `answer`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        n_distractors: usize,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "traces", required = true)]
    traces: Vec<PathBuf>,
    #[arg(long)]
    exclude_errored: bool,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    Io(PathBuf, io::Error),
    Input(String),
}

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Lib(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, message) = match &e {
                CliError::Lib(e) => (e.name(), e.to_string()),
                CliError::Io(path, err) => ("Io".to_string(), format!("{}: {err}", path.display())),
                CliError::Input(m) => ("InvalidInput".to_string(), m.clone()),
            };
            eprintln!("error[{name}]: {message}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(c) = &cli.chunks {
        cfg.chunks = Some(c.clone());
    }
    if let Some(i) = &cli.index {
        match &mut cfg.index {
            Some(spec) => spec.path = i.clone(),
            None => {
                cfg.index = Some(serde_json::from_value(serde_json::json!({ "path": i })).expect("path-only index spec"));
            }
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest(args) => ingest(&mut cfg, args),
        Command::Index(cmd) => index(&cfg, cmd),
        Command::Ask(args) => ask(&mut cfg, args),
        Command::Bench(cmd) => bench_cmd(&mut cfg, cmd),
        Command::Curate(cmd) => curate_cmd(&cfg, cmd),
        Command::Report(args) => report_cmd(args),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn ingest(cfg: &mut Config, args: IngestArgs) -> Result<()> {
    if let Some(m) = args.max_tokens {
        cfg.chunk_policy.max_tokens = m;
    }
    let mut docs: Vec<RawDocument> = Vec::new();
    for input in &args.inputs {
        docs.extend(jsonl::<RawDocument>(input)?);
    }
    let mut store = ChunkStore::open(cfg.chunks_path()?)?;
    let mut manifest = corpus::ingest(docs, &cfg.chunk_policy, &ByteQuarterTokenizer, &mut store)?;
    if let Some(enc) = &cfg.encoder {
        manifest = manifest.with_embedding_size(enc.dims as u64 * 8);
    }
    if let Some(path) = &args.manifest {
        let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        json.push(b'\n');
        write_file(path, &json)?;
    }
    print!("{}", manifest.render_table());
    Ok(())
}

fn index(cfg: &Config, cmd: IndexCommand) -> Result<()> {
    match cmd {
        IndexCommand::Build => {
            let chunks = corpus::read_chunks(cfg.chunks_path()?)?;
            let encoder = cfg.dual_encoder()?;
            let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
            let vectors = encoder.encode_passages(&texts)?;
            let entries = chunks
                .iter()
                .zip(vectors)
                .map(|(c, v)| IndexEntry::new(c.id.clone(), v))
                .collect();
            let spec = cfg.index_spec()?;
            let index = Index::build(entries, spec.params(encoder.passage_dims()))?;
            index.save(&spec.path)?;
            println!(
                "indexed {} chunks, dims {}, top layer {} -> {}",
                index.len(),
                index.dims(),
                index.max_level(),
                spec.path.display()
            );
            Ok(())
        }
        IndexCommand::Search { query, k, exact, rerank } => {
            let hits = if rerank {
                cfg.retriever()?
                    .retrieve(&query, k)
                    .map_err(Error::from)?
                    .into_iter()
                    .map(|p| p.doc)
                    .collect()
            } else {
                let index = Index::load(&cfg.index_spec()?.path)?;
                let q = cfg.dual_encoder()?.encode_query(&query)?;
                if exact {
                    index.search_exact(&q, k)?
                } else {
                    index.search(&q, k)?
                }
            };
            let mut out = io::stdout().lock();
            for h in hits {
                writeln!(out, "{}\t{:.6}", h.chunk_id, h.score).map_err(|e| CliError::Io("<stdout>".into(), e))?;
            }
            Ok(())
        }
        IndexCommand::Stats => {
            let index = Index::load(&cfg.index_spec()?.path)?;
            let p = index.params();
            println!("vectors\t{}", index.len());
            println!("dims\t{}", index.dims());
            println!("top_layer\t{}", index.max_level());
            println!("entry_point\t{}", index.entry_point().unwrap_or("-"));
            println!("max_neighbors\t{}", p.max_neighbors);
            println!("ef_construction\t{}", p.ef_construction);
            println!("ef_search\t{}", p.ef_search);
            println!("level_probability\t{}", p.level_probability);
            println!("seed\t{}", p.seed);
            Ok(())
        }
    }
}

fn ask(cfg: &mut Config, args: AskArgs) -> Result<()> {
    args.toggles.apply(cfg);
    let pipeline = cfg.pipeline(cfg.pipeline.enable_rag)?;
    let result = pipeline.answer(&args.question)?;
    let mut json = serde_json::to_vec_pretty(&result).expect("trace serializes");
    json.push(b'\n');
    match &args.trace {
        Some(path) => {
            write_file(path, &json)?;
            println!("{}", result.final_answer);
        }
        None => io::stdout()
            .write_all(&json)
            .map_err(|e| CliError::Io("<stdout>".into(), e))?,
    }
    Ok(())
}

struct Prepared {
    name: String,
    items: Vec<bench::BenchItem>,
    eval: EvalConfig,
}

fn prepare(cfg: &mut Config, args: &BenchArgs) -> Result<Prepared> {
    args.toggles.apply(cfg);
    let items = bench::load_dataset(
        &args.dataset,
        args.format.into(),
        LoadOptions {
            questions_only: args.questions_only,
        },
    )?;
    let mut eval = cfg.eval.clone();
    if let Some(t) = args.shuffle_trials {
        eval.ensemble = Some(Ensemble {
            shuffle_trials: t,
            seed: args.shuffle_seed,
        });
    }
    if let Some(w) = args.workers {
        eval.workers = w;
    }
    eval.exclude_errored |= args.exclude_errored;
    let name = args.name.clone().unwrap_or_else(|| {
        args.dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    Ok(Prepared { name, items, eval })
}

fn emit(args: &BenchArgs, reports: &[BenchReport], traces: &[TraceRecord], sweep: bool) -> Result<()> {
    if let Some(path) = &args.traces {
        bench::write_traces(path, traces)?;
    }
    if let Some(path) = &args.json {
        let mut json = serde_json::to_vec_pretty(reports).expect("reports serialize");
        json.push(b'\n');
        write_file(path, &json)?;
    }
    print!("{}", report::render_summary(reports));
    println!();
    if sweep {
        print!("{}", report::render_sweep(reports));
    } else {
        print!("{}", report::render_accuracy_table(reports));
    }
    println!();
    print!("{}", report::render_gate_table(reports));
    Ok(())
}

fn bench_cmd(cfg: &mut Config, cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Run { args, variant } => {
            let prep = prepare(cfg, &args)?;
            let pipeline = cfg.pipeline(cfg.pipeline.enable_rag)?;
            let (r, traces) = bench::evaluate(&pipeline, &prep.name, &variant, &prep.items, &prep.eval)?;
            emit(&args, &[r], &traces, false)
        }
        BenchCommand::Sweep { args, n } => {
            let prep = prepare(cfg, &args)?;
            let pipeline = cfg.pipeline(cfg.pipeline.enable_rag)?;
            let (reports, traces) = bench::sweep_docs(&pipeline, &prep.name, "sweep", &prep.items, &n, &prep.eval)?;
            emit(&args, &reports, &traces, true)
        }
        BenchCommand::Ablate { args, only } => {
            let prep = prepare(cfg, &args)?;
            let mut variants = bench::ablation_variants(&cfg.pipeline);
            if !only.is_empty() {
                if let Some(bad) = only.iter().find(|o| !variants.iter().any(|v| &v.name == *o)) {
                    let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
                    return Err(CliError::Input(format!("unknown variant `{bad}`; choose from {names:?}")));
                }
                variants.retain(|v| only.contains(&v.name));
            }
            let rag_needed = variants.iter().any(|v| v.config.enable_rag);
            cfg.pipeline.enable_rag = rag_needed;
            let pipeline = cfg.pipeline(rag_needed)?;
            let (reports, traces) = bench::ablate(&pipeline, &prep.name, &prep.items, &variants, &prep.eval)?;
            emit(&args, &reports, &traces, false)
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RagRequest {
    question: String,
    golden_docs: Vec<String>,
    answer: String,
}

fn curate_cmd(cfg: &Config, cmd: CurateCommand) -> Result<()> {
    match cmd {
        CurateCommand::Filter {
            input,
            output,
            threshold,
            field,
            dedupe,
        } => {
            let records: Vec<CurationRecord> = curate::read_jsonl(&input)?;
            curate::validate_records(&records)?;
            let total = records.len();
            let field = match field {
                Field::Quality => ScoreField::Quality,
                Field::Reward => ScoreField::Reward,
            };
            let mut kept = curate::filter_by_field(records, field, threshold);
            if dedupe {
                kept = curate::dedupe(kept);
            }
            curate::write_jsonl(&output, &kept)?;
            println!("kept {} of {total}", kept.len());
            Ok(())
        }
        CurateCommand::Kcenter {
            input,
            output,
            m,
            seed_index,
        } => {
            let records: Vec<CurationRecord> = curate::read_jsonl(&input)?;
            curate::validate_records(&records)?;
            let encoder = if records.iter().any(|r| r.embedding.is_none()) {
                Some(cfg.dual_encoder()?)
            } else {
                None
            };
            let points = records
                .iter()
                .map(|r| match (&r.embedding, &encoder) {
                    (Some(e), _) => Ok(e.clone()),
                    (None, Some(enc)) => enc.encode_passage(&r.instruction),
                    (None, None) => unreachable!("encoder built when any embedding is missing"),
                })
                .collect::<std::result::Result<Vec<EmbeddingVector>, _>>()?;
            let picks = curate::k_center_greedy(&points, m, seed_index)?;
            let radius = curate::covering_radius(&points, &picks);
            let selected: Vec<CurationRecord> = picks.iter().map(|&i| records[i].clone()).collect();
            curate::write_jsonl(&output, &selected)?;
            println!("selected {} of {}, covering radius {radius:.6}", selected.len(), records.len());
            Ok(())
        }
        CurateCommand::Ragrecords {
            input,
            output,
            n_distractors,
        } => {
            let requests: Vec<RagRequest> = jsonl(&input)?;
            let pool = Index::load(&cfg.index_spec()?.path)?;
            let encoder = cfg.dual_encoder()?;
            let records = requests
                .iter()
                .map(|r| curate::build_rag_record(&r.question, &r.golden_docs, &r.answer, &pool, &encoder, n_distractors))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            curate::write_jsonl(&output, &records)?;
            println!("wrote {} records", records.len());
            Ok(())
        }
    }
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let mut traces = Vec::new();
    for path in &args.traces {
        traces.extend(bench::read_traces(path)?);
    }
    let reports = bench::summarize(&traces, args.exclude_errored);
    if let Some(path) = &args.json {
        let mut json = serde_json::to_vec_pretty(&reports).expect("reports serialize");
        json.push(b'\n');
        write_file(path, &json)?;
    }
    print!("{}", report::render_summary(&reports));
    println!();
    print!("{}", report::render_accuracy_table(&reports));
    println!();
    print!("{}", report::render_gate_table(&reports));
    let mut ns: Vec<usize> = reports.iter().map(|r| r.retrieve_n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() > 1 {
        println!();
        print!("{}", report::render_sweep(&reports));
    }
    Ok(())
}
