//! `lfa`: command-line driver for the curation pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lfa_core::clustering::ClusterConfig;
use lfa_core::consistency::{Boundary, GateConfig};
use lfa_core::constraints::ConstraintConfig;
use lfa_core::index::{self, IndexParams, IvfPqIndex};
use lfa_core::manifest::{self, EmbeddingStore};
use lfa_core::mofe::{self, GateGranularity, GateKind, MofeConfig, ToyProblem};
use lfa_core::pipeline::{self, CorpusStats, PipelineConfig};
use lfa_core::synth::{self, SynthConfig, ViolationRates};

#[derive(Parser)]
#[command(name = "lfa", version, about = "Face-video dataset curation pipeline")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus.
    Gen(GenArgs),
    /// Apply facial constraints and the identity gate; writes report.jsonl.
    Filter(FilterArgs),
    /// Cluster accepted clips into identities; writes clusters.jsonl.
    Cluster(ClusterArgs),
    /// Split clusters into identity-disjoint train and test sets.
    Split(SplitArgs),
    /// Summarize a filter report (and optionally clusters).
    Stats(StatsArgs),
    /// Build or query an IVF-PQ index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Numerically verify the MoFE block and report its parameter overhead.
    MofeCheck(MofeCheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    identities: usize,
    #[arg(long, default_value_t = 10)]
    clips_per: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding dimension.
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Plant no violations at all.
    #[arg(long)]
    clean: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    clips: PathBuf,
    #[arg(long)]
    faces: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
}

#[derive(Args)]
struct ConstraintArgs {
    #[arg(long, default_value_t = 3)]
    sample_stride: u32,
    #[arg(long, default_value_t = 0.10)]
    min_face_prop: f64,
    #[arg(long, default_value_t = 30.0)]
    min_angle_var: f64,
}

impl ConstraintArgs {
    fn config(&self) -> ConstraintConfig {
        ConstraintConfig {
            sample_stride: self.sample_stride,
            min_face_proportion: self.min_face_prop,
            min_angle_variation: self.min_angle_var,
        }
    }
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    constraints: ConstraintArgs,
    #[arg(long, default_value_t = 0.6, allow_negative_numbers = true)]
    identity_threshold: f64,
    /// Retain clips whose mean similarity equals the threshold.
    #[arg(long)]
    inclusive_threshold: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    nlist: Option<usize>,
    #[arg(long, default_value_t = 8)]
    m: usize,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Filter report; only accepted clips are clustered.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    constraints: ConstraintArgs,
    #[command(flatten)]
    index: IndexArgs,
    #[arg(long, default_value_t = 0.75, allow_negative_numbers = true)]
    tau_high: f64,
    #[arg(long, default_value_t = 0.50, allow_negative_numbers = true)]
    tau_low: f64,
    #[arg(long, default_value_t = 16)]
    knn: usize,
    #[arg(long)]
    nprobe: Option<usize>,
    /// Cluster individual frames instead of per-clip mean embeddings.
    #[arg(long)]
    per_frame: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the index built over the clustering samples.
    #[arg(long)]
    save_index: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build an index over the (normalized) rows of an embedding store.
    Build {
        #[arg(long)]
        embeddings: PathBuf,
        #[command(flatten)]
        index: IndexArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search a saved index with every row of a query store; writes JSON Lines.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        nprobe: Option<usize>,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Linear,
    Mlp,
}

#[derive(Args)]
struct MofeCheckArgs {
    #[arg(long, default_value_t = 4)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_tokens: usize,
    #[arg(long, default_value_t = 2)]
    n_q: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GateArg::Linear)]
    gate: GateArg,
    /// One gate weight vector per block instead of per token.
    #[arg(long)]
    per_stream: bool,
    /// Backbone parameter count the overhead ratio is measured against.
    #[arg(long, default_value_t = 1_300_000_000)]
    base_params: u64,
    /// Depth of the full-size model used for the overhead count.
    #[arg(long, default_value_t = 30)]
    n_blocks: usize,
    #[arg(long, default_value_t = 2)]
    inject_every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures after argument parsing: bad flag combinations are usage errors,
/// everything else is a data error.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose {
        tracing_subscriber::filter::LevelFilter::INFO
    } else {
        tracing_subscriber::filter::LevelFilter::WARN
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Split(a) => cmd_split(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Index(c) => cmd_index(c),
        Command::MofeCheck(a) => cmd_mofe_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            // A closed pipe (e.g. `| head`) is not an error for the producer.
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => r.context("writing stdout"),
        },
    }
}

fn load_corpus(
    c: &CorpusArgs,
) -> Result<(
    Vec<manifest::ClipRecord>,
    Vec<manifest::FaceObservation>,
    EmbeddingStore,
)> {
    let clips = manifest::parse_clip_manifest(&c.clips)?;
    let faces = manifest::parse_face_manifest(&c.faces, &clips)?;
    let store = manifest::load_embedding_store(&c.embeddings)?;
    Ok((clips, faces, store))
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_identities: a.identities,
        clips_per_identity: a.clips_per,
        dim: a.dim,
        seed: a.seed,
        rates: if a.clean {
            ViolationRates::none()
        } else {
            ViolationRates::default()
        },
        ..Default::default()
    };
    cfg.validate().map_err(usage)?;
    let corpus = synth::generate(&cfg).map_err(usage)?;
    corpus.write(&a.out).map_err(anyhow::Error::from)?;
    tracing::info!(clips = corpus.clips.len(), rows = corpus.store.rows(), "corpus written");
    Ok(())
}

fn gate_config(threshold: f64, inclusive: bool) -> GateConfig {
    GateConfig {
        threshold,
        boundary: if inclusive {
            Boundary::Inclusive
        } else {
            Boundary::Strict
        },
    }
}

fn cmd_filter(a: FilterArgs) -> CmdResult {
    let cfg = PipelineConfig {
        constraints: a.constraints.config(),
        gate: gate_config(a.identity_threshold, a.inclusive_threshold),
        ..Default::default()
    };
    cfg.validate().map_err(usage)?;
    let (clips, faces, store) = load_corpus(&a.corpus)?;
    let started = Instant::now();
    let report = pipeline::filter_corpus(&clips, &faces, &store, &cfg).map_err(anyhow::Error::from)?;
    manifest::write_report(&report, &a.out).map_err(anyhow::Error::from)?;
    tracing::info!(
        clips = report.len(),
        accepted = report.iter().filter(|d| d.accepted).count(),
        elapsed_ms = started.elapsed().as_millis() as u64,
        "filter done"
    );
    Ok(())
}

fn cmd_cluster(a: ClusterArgs) -> CmdResult {
    let mut cfg = PipelineConfig::with_seed(a.seed);
    cfg.constraints = a.constraints.config();
    cfg.cluster = ClusterConfig {
        tau_high: a.tau_high,
        tau_low: a.tau_low,
        knn: a.knn,
        nprobe: a.nprobe,
        seed: a.seed,
    };
    cfg.index.nlist = a.index.nlist;
    cfg.index.m = a.index.m;
    cfg.per_frame = a.per_frame;
    cfg.validate().map_err(usage)?;
    if a.index.m == 0 || a.index.nlist == Some(0) || a.nprobe == Some(0) {
        return Err(usage("--m, --nlist and --nprobe must be >= 1"));
    }

    let (clips, faces, store) = load_corpus(&a.corpus)?;
    let report = manifest::read_report(&a.report).map_err(anyhow::Error::from)?;
    let (samples_store, samples) =
        pipeline::clustering_samples(&report, &clips, &faces, &store, &cfg).map_err(anyhow::Error::from)?;
    let out = pipeline::cluster_samples(&samples_store, &samples, &cfg).map_err(anyhow::Error::from)?;
    manifest::write_clusters(&out.records, &a.out).map_err(anyhow::Error::from)?;
    if let Some(path) = &a.save_index {
        index::save_index(&out.index, path).map_err(anyhow::Error::from)?;
    }
    tracing::info!(
        samples = samples.len(),
        clusters = out.assignment.n_clusters,
        "cluster done"
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> CmdResult {
    if !(a.test_frac > 0.0 && a.test_frac < 1.0) {
        return Err(usage(format!("--test-frac must lie in (0, 1), got {}", a.test_frac)));
    }
    let records = manifest::read_clusters(&a.clusters).map_err(anyhow::Error::from)?;
    let split = pipeline::split(&records, a.test_frac, a.seed).map_err(anyhow::Error::from)?;
    manifest::write_json(&split, &a.out).map_err(anyhow::Error::from)?;
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let report = manifest::read_report(&a.report).map_err(anyhow::Error::from)?;
    let clusters = match &a.clusters {
        Some(p) => Some(manifest::read_clusters(p).map_err(anyhow::Error::from)?),
        None => None,
    };
    let stats = CorpusStats::from_report(&report, clusters.as_deref()).map_err(anyhow::Error::from)?;
    match &a.out {
        Some(p) => manifest::write_json(&stats, p).map_err(anyhow::Error::from)?,
        None => write_text(
            None,
            &(serde_json::to_string_pretty(&stats).map_err(anyhow::Error::from)? + "\n"),
        )?,
    }
    Ok(())
}

fn cmd_index(c: IndexCommand) -> CmdResult {
    match c {
        IndexCommand::Build {
            embeddings,
            index: idx,
            seed,
            out,
        } => {
            if idx.m == 0 || idx.nlist == Some(0) {
                return Err(usage("--m and --nlist must be >= 1"));
            }
            let store = manifest::load_embedding_store(&embeddings).map_err(anyhow::Error::from)?;
            let unit = index::normalize_rows(&store).map_err(anyhow::Error::from)?;
            let params = IndexParams {
                nlist: idx.nlist,
                m: idx.m,
                seed,
                ..Default::default()
            };
            let built = IvfPqIndex::build(&unit, &params).map_err(anyhow::Error::from)?;
            index::save_index(&built, &out).map_err(anyhow::Error::from)?;
            tracing::info!(n = built.len(), nlist = built.nlist(), "index written");
            Ok(())
        }
        IndexCommand::Query {
            index: path,
            embeddings,
            k,
            nprobe,
            out,
        } => {
            if k == 0 || nprobe == Some(0) {
                return Err(usage("--k and --nprobe must be >= 1"));
            }
            let built = index::load_index(&path).map_err(anyhow::Error::from)?;
            let queries = manifest::load_embedding_store(&embeddings).map_err(anyhow::Error::from)?;
            let unit = index::normalize_rows(&queries).map_err(anyhow::Error::from)?;
            let nprobe = nprobe.unwrap_or_else(|| index::default_nprobe(built.nlist()).max(1));
            let mut text = String::new();
            for (q, row) in unit.iter_rows().enumerate() {
                let result = index::search(row, &built, k, nprobe).map_err(anyhow::Error::from)?;
                let neighbors: Vec<_> = result
                    .neighbors
                    .iter()
                    .map(|n| json!({"id": n.id, "distance": n.distance}))
                    .collect();
                text.push_str(&json!({"query": q, "neighbors": neighbors}).to_string());
                text.push('\n');
            }
            write_text(out.as_deref(), &text)?;
            Ok(())
        }
    }
}

fn cmd_mofe_check(a: MofeCheckArgs) -> CmdResult {
    let gate_kind = match a.gate {
        GateArg::Linear => GateKind::Linear,
        GateArg::Mlp => GateKind::Mlp,
    };
    let gate_granularity = if a.per_stream {
        GateGranularity::PerStream
    } else {
        GateGranularity::PerToken
    };
    let toy = MofeConfig {
        gate_kind,
        gate_granularity,
        inject_every: a.inject_every,
        ..MofeConfig::toy(a.d_model, a.n_tokens, a.seed)
    };
    toy.validate().map_err(usage)?;
    if a.n_q == 0 {
        return Err(usage("--n-q must be >= 1"));
    }
    let full = MofeConfig {
        gate_kind,
        gate_granularity,
        n_blocks: a.n_blocks,
        inject_every: a.inject_every,
        ..Default::default()
    };
    let overhead = mofe::parameter_overhead(&full, a.base_params).map_err(usage)?;

    let started = Instant::now();
    let problem = ToyProblem::new(toy, a.n_q).map_err(anyhow::Error::from)?;
    let report = mofe::gradient_check(&problem, 1e-5).map_err(anyhow::Error::from)?;
    tracing::info!(
        checked = report.n_checked,
        worst = %report.worst,
        elapsed_ms = started.elapsed().as_millis() as u64,
        "gradient check done"
    );
    let verdict = json!({
        "grad_max_rel_err": report.max_rel_err,
        "gate_row_sum_err": report.gate_row_sum_err,
        "blocks_injected": overhead.injected_blocks,
        "param_ratio": overhead.ratio,
        "mofe_params": overhead.mofe_params,
        "base_params": overhead.base_params,
        "n_checked": report.n_checked,
        "passed": report.max_rel_err <= 1e-4 && report.gate_row_sum_err <= 1e-6,
    });
    let text = serde_json::to_string_pretty(&verdict).map_err(anyhow::Error::from)? + "\n";
    write_text(a.out.as_deref(), &text)?;
    Ok(())
}
