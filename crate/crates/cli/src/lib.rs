//! The `annserve` command line. Each subcommand is a thin composition of
//! library operations from `annserve-core` and `annserve-server`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use annserve_core::api::{Mode, SearchRequest};
use annserve_core::bench::{oracle, render_table, sweep_graph, sweep_ivfpq, write_csv, BenchRow};
use annserve_core::corpus::{ingest, read_jsonl, ChunkStore, ChunkingConfig};
use annserve_core::embed::{encoder_from_descriptor, EncoderDescriptor, EncoderRole};
use annserve_core::engine::Engine;
use annserve_core::graph::{build_vamana, GraphView, MmapGraph, VamanaParams};
use annserve_core::ivfpq::{default_n_lists, IvfPqIndex, IvfPqParams};
use annserve_core::pipeline::{build_graph_file, build_ivfpq_file, embed_store, EmbedOptions, DEFAULT_BATCH};
use annserve_core::synth::{clustered, perturbed_queries};
use annserve_core::vectors::{MmapVectors, VectorSet, VectorSource};
use annserve_server::{ServeConfig, ServeError, Server};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "annserve", version, about = "Chunk, embed, index and serve a text corpus for vector search")]
pub struct Cli {
    /// Service config (TOML, or JSON by extension). Supplies artifact paths
    /// and the encoder where a command needs them.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for index builds and synthetic bench data.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for embedding, builds and oracle scans.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSON-lines corpus into a chunk store.
    Ingest(IngestArgs),
    /// Encode every chunk into a vector file (resumable).
    Embed(EmbedArgs),
    /// Build a graph (default) or IVFPQ index from a vector file.
    Build(BuildArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Run one search in-process and print the response JSON.
    Query(QueryArgs),
    /// Recall/latency sweep against a brute-force oracle.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSON-lines file of {doc_id, text, source} records.
    #[arg(long)]
    pub input: PathBuf,
    /// Output chunk store directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub window: usize,
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
    /// Fail on the first malformed record instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Output vector file; a `.manifest.json` beside it tracks progress.
    #[arg(long)]
    pub out: PathBuf,
    /// Reference encoder dimension, used without --config or --endpoint.
    #[arg(long, default_value_t = 768)]
    pub dim: usize,
    /// Remote encoder endpoint; --dim gives its output dimension.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub batch_size: usize,
    /// Stop after this many batches, leaving the job resumable.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Graph,
    Ivfpq,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long, value_enum, default_value_t = Backend::Graph)]
    pub backend: Backend,
    #[arg(long)]
    pub vectors: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Graph: maximum out-degree.
    #[arg(long = "R", alias = "r", default_value_t = 64)]
    pub r: usize,
    /// Graph: build-time search list size.
    #[arg(long = "L-build", alias = "l-build", default_value_t = 128)]
    pub l_build: usize,
    /// Graph: robust-prune slack.
    #[arg(long, default_value_t = 1.2)]
    pub alpha: f32,
    /// IVFPQ: coarse lists; defaults to 4*sqrt(N) as a power of two.
    #[arg(long)]
    pub n_lists: Option<usize>,
    /// IVFPQ: subquantizers.
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    /// IVFPQ: store raw vectors instead of PQ codes (lossless test mode).
    #[arg(long)]
    pub flat: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides `listen` from the config.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Graph,
    Ivfpq,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub text: String,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub exact: bool,
    #[arg(long)]
    pub diverse: bool,
    /// Candidate pool size for exact/diverse.
    #[arg(long = "K")]
    pub big_k: Option<usize>,
    #[arg(long)]
    pub n_probe: Option<usize>,
    #[arg(long = "L")]
    pub l: Option<usize>,
    #[arg(long = "W")]
    pub w: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f32>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Vector file to benchmark; without it, synthetic clustered data is
    /// generated and both indexes are built in memory.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Graph index over --vectors.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// IVFPQ index over --vectors.
    #[arg(long)]
    pub ivfpq: Option<PathBuf>,
    /// Query vector file; defaults to seeded perturbations of data rows.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_queries: usize,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    #[arg(long = "L", value_delimiter = ',', default_values_t = [16, 32, 64, 128])]
    pub ls: Vec<usize>,
    #[arg(long = "W", default_value_t = 4)]
    pub w: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 16, 64, 256])]
    pub n_probe: Vec<usize>,
    /// Synthetic mode: number of vectors.
    #[arg(long, default_value_t = 10_000)]
    pub synthetic_n: usize,
    /// Synthetic mode: dimension.
    #[arg(long, default_value_t = 64)]
    pub synthetic_dim: usize,
    /// Write rows here as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] annserve_core::Error),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// 2 for usage and validation problems, 1 for everything else.
    pub fn exit_code(&self) -> ExitCode {
        use annserve_core::Error as E;
        let validation = |e: &E| {
            matches!(
                e,
                E::Config(_)
                    | E::MalformedRecord { .. }
                    | E::EmptyCorpus
                    | E::Dimension { .. }
                    | E::InvalidRequest(_)
                    | E::ModeUnavailable(_)
                    | E::ZeroVector { .. }
                    | E::DuplicateId(_)
                    | E::BuildResource { .. }
            )
        };
        let usage = match self {
            CliError::Usage(_) => true,
            CliError::Core(e) => validation(e),
            CliError::Serve(ServeError::Config { .. } | ServeError::Invalid(_)) => true,
            CliError::Serve(ServeError::Engine(e)) => validation(e),
            _ => false,
        };
        ExitCode::from(if usage { 2 } else { 1 })
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>, command: &str) -> Result<ServeConfig> {
    let path = path.ok_or_else(|| CliError::Usage(format!("`{command}` needs --config")))?;
    let config = ServeConfig::load(path)?;
    config.validate()?;
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Embed(a) => cmd_embed(&a, config),
        Command::Build(a) => cmd_build(&a, cli.seed),
        Command::Serve(a) => cmd_serve(&a, config, cli.threads),
        Command::Query(a) => cmd_query(a, config),
        Command::Bench(a) => cmd_bench(&a, cli.seed),
    }
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let chunking = ChunkingConfig {
        window_tokens: a.window,
        overlap_tokens: a.overlap,
        strict: a.strict,
    };
    let store = ingest(read_jsonl(&a.input)?, &chunking, &a.out)?;
    let meta = store.meta();
    eprintln!("ingested {} chunks into {}", store.len(), a.out.display());
    tracing::debug!(?meta, "store metadata");
    Ok(())
}

fn cmd_embed(a: &EmbedArgs, config: Option<&Path>) -> Result<()> {
    let descriptor = match (&a.endpoint, config) {
        (Some(url), _) => EncoderDescriptor::remote("remote", a.dim, url, EncoderRole::Retrieval),
        (None, Some(_)) => load_config(config, "embed")?.engine.encoder,
        (None, None) => EncoderDescriptor::reference(a.dim, EncoderRole::Retrieval),
    };
    let encoder = encoder_from_descriptor(&descriptor)?;
    let store = ChunkStore::open(&a.store)?;
    let options = EmbedOptions {
        batch_size: a.batch_size,
        stop_after: a.stop_after,
    };
    let report = embed_store(&store, encoder.as_ref(), &a.out, &options)?;
    let done = report.resumed_from + report.encoded_batches;
    eprintln!(
        "{} {done}/{} batches ({} this run, resumed at {}) -> {}",
        if report.complete { "complete:" } else { "partial:" },
        report.total_batches,
        report.encoded_batches,
        report.resumed_from,
        a.out.display()
    );
    Ok(())
}

fn cmd_build(a: &BuildArgs, seed: u64) -> Result<()> {
    match a.backend {
        Backend::Graph => {
            let params = VamanaParams::new(a.r, a.l_build, a.alpha, seed);
            let r = build_graph_file(&a.vectors, &params, &a.out)?;
            eprintln!(
                "graph: {} nodes, max degree {}, reachable {:.4} -> {}",
                r.n,
                r.max_degree,
                r.reachable,
                a.out.display()
            );
        }
        Backend::Ivfpq => {
            let n_lists = match a.n_lists {
                Some(n) => n,
                None => default_n_lists(MmapVectors::open(&a.vectors)?.len()),
            };
            let params = if a.flat {
                IvfPqParams::flat(n_lists, seed)
            } else {
                IvfPqParams::new(n_lists, a.m, seed)
            };
            let index = build_ivfpq_file(&a.vectors, &params, &a.out)?;
            eprintln!(
                "ivfpq: {} vectors, {} lists, m={} ({:?}) -> {}",
                index.len(),
                index.n_lists(),
                index.m(),
                index.kind(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn cmd_serve(a: &ServeArgs, config: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let mut config = load_config(config, "serve")?;
    if let Some(listen) = &a.listen {
        config.listen = listen.clone();
    }
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async {
        let server = Server::bind(&config).await?;
        let addr = server.local_addr().map_err(ServeError::Io)?;
        tracing::info!(%addr, "serving");
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "listening on http://{addr}");
        let _ = out.flush();
        drop(out);
        server.run(annserve_server::shutdown_signal()).await?;
        Ok(())
    })
}

fn cmd_query(a: QueryArgs, config: Option<&Path>) -> Result<()> {
    let config = load_config(config, "query")?;
    let engine = Engine::open(&config.engine)?;
    let request = SearchRequest {
        query: a.text,
        k: a.k,
        mode: a.mode.map(|m| match m {
            ModeArg::Graph => Mode::Graph,
            ModeArg::Ivfpq => Mode::Ivfpq,
        }),
        exact: a.exact.then_some(true),
        diverse: a.diverse.then_some(true),
        big_k: a.big_k,
        n_probe: a.n_probe,
        l: a.l,
        w: a.w,
        lambda: a.lambda,
    };
    let response = engine.search(&request)?;
    let json = serde_json::to_string_pretty(&response).map_err(annserve_core::Error::from)?;
    println!("{json}");
    Ok(())
}

fn cmd_bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let rows = match &a.vectors {
        Some(path) => bench_files(a, path, seed)?,
        None => bench_synthetic(a, seed)?,
    };
    print!("{}", render_table(&rows));
    if let Some(csv) = &a.csv {
        write_csv(&rows, csv)?;
        eprintln!("wrote {} rows to {}", rows.len(), csv.display());
    }
    Ok(())
}

fn read_queries(a: &BenchArgs, data: &dyn VectorSource, seed: u64) -> Result<VectorSet> {
    let queries = match &a.queries {
        Some(p) => VectorSet::read(p)?,
        None => perturbed_queries(data, a.n_queries, 0.2, seed.wrapping_add(1)),
    };
    if queries.dim() != data.dim() {
        return Err(annserve_core::Error::Dimension {
            expected: data.dim(),
            actual: queries.dim(),
        }
        .into());
    }
    Ok(queries)
}

fn bench_files(a: &BenchArgs, path: &Path, seed: u64) -> Result<Vec<BenchRow>> {
    if a.graph.is_none() && a.ivfpq.is_none() {
        return Err(CliError::Usage("bench with --vectors needs --graph and/or --ivfpq".into()));
    }
    let data = MmapVectors::open(path)?;
    let queries = read_queries(a, &data, seed)?;
    let truth = oracle(&data, &queries, a.k);
    let mut rows = Vec::new();
    if let Some(g) = &a.graph {
        let graph = MmapGraph::open(g)?;
        if graph.len() != data.len() {
            return Err(CliError::Usage(format!(
                "graph has {} nodes but the vector file has {} rows",
                graph.len(),
                data.len()
            )));
        }
        rows.extend(sweep_graph(&graph, &queries, &truth, &a.ls, a.w, a.k)?);
    }
    if let Some(p) = &a.ivfpq {
        let index = IvfPqIndex::load(p)?;
        let probes: Vec<usize> = a.n_probe.iter().map(|&p| p.min(index.n_lists())).collect();
        rows.extend(sweep_ivfpq(&index, &queries, &truth, &probes, a.k)?);
    }
    Ok(rows)
}

fn bench_synthetic(a: &BenchArgs, seed: u64) -> Result<Vec<BenchRow>> {
    let (data, generated) = clustered(a.synthetic_n, a.n_queries, a.synthetic_dim, seed);
    let queries = match &a.queries {
        Some(_) => read_queries(a, &data, seed)?,
        None => generated,
    };
    let truth = oracle(&data, &queries, a.k);
    eprintln!("synthetic: {} x {}, building graph and ivfpq", data.len(), data.dim());
    let index = IvfPqIndex::build(&data, &IvfPqParams::new(default_n_lists(data.len()), 8, seed))?;
    let graph = build_vamana(data, &VamanaParams::new(32, 64, 1.2, seed))?;
    let mut rows = sweep_graph(&graph, &queries, &truth, &a.ls, a.w, a.k)?;
    let probes: Vec<usize> = a.n_probe.iter().map(|&p| p.min(index.n_lists())).collect();
    rows.extend(sweep_ivfpq(&index, &queries, &truth, &probes, a.k)?);
    Ok(rows)
}

/// Parses arguments, runs, and maps errors to exit codes. Clap handles
/// `--help` and usage errors itself (exit 0 and 2).
pub fn main_with_args() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
