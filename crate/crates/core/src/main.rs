use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use membase::bench::{bench_rerank, RerankBench};
use membase::embed::HashEmbedder;
use membase::engine::{EngineConfig, MemoryBase};
use membase::provider::MockProvider;
use membase::retrieval::RecallConfig;
use membase::schema::{parse_schema, validate_schema};
use membase::segmentation::{Role, Session};
use membase::service::{serve, Problem, ServiceConfig};
use membase::store::{SearchFilter, Store, StoreConfig};

#[derive(Parser)]
#[command(name = "membase", version, about = "Schema-driven memory base for LLM applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataDir {
    #[arg(long, env = "MEMBASE_DATA_DIR", default_value = "membase-data")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Schema file utilities.
    Schema {
        #[command(subcommand)]
        command: SchemaCommand,
    },
    /// Run the offline pipeline over one session file and print the result.
    Ingest {
        session: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        mock_script: PathBuf,
        /// Persist into this directory instead of a throwaway in-memory store.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Search the memories in a data directory.
    Query {
        text: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        w_time: Option<f64>,
        #[arg(long)]
        w_busi: Option<f64>,
        #[arg(long)]
        no_rerank: bool,
        #[command(flatten)]
        dir: DataDir,
    },
    /// Latency benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Write a snapshot of the data directory and truncate its log.
    Snapshot {
        #[command(flatten)]
        dir: DataDir,
        /// Also copy the snapshot here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace the data directory's contents with a snapshot file.
    Restore {
        path: PathBuf,
        #[command(flatten)]
        dir: DataDir,
    },
}

#[derive(Subcommand)]
enum SchemaCommand {
    Validate { file: PathBuf },
}

#[derive(Subcommand)]
enum BenchCommand {
    Rerank {
        #[arg(long, default_value_t = 1000)]
        candidates: usize,
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        #[arg(long, default_value_t = 32)]
        query_tokens: usize,
        #[arg(long, default_value_t = membase::embed::DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        /// Score full-precision tokens instead of the quantized form.
        #[arg(long)]
        exact: bool,
    },
}

#[derive(Deserialize)]
struct SessionFile {
    id: String,
    #[serde(default = "default_user")]
    user: String,
    messages: Vec<MessageFile>,
}

#[derive(Deserialize)]
struct MessageFile {
    #[serde(default = "default_role")]
    role: Role,
    content: String,
    #[serde(default)]
    timestamp: Option<i64>,
}

fn default_user() -> String {
    "default".into()
}

fn default_role() -> Role {
    Role::User
}

fn load_session(path: &Path) -> anyhow::Result<Session> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: SessionFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut s = Session::new(file.id, file.user);
    for (i, m) in file.messages.into_iter().enumerate() {
        s.push(m.role, m.content, m.timestamp.unwrap_or(1 + i as i64));
    }
    Ok(s)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn offline_engine(store: Store, llm: MockProvider) -> anyhow::Result<MemoryBase> {
    Ok(MemoryBase::new(
        store,
        Arc::new(HashEmbedder::default()),
        Arc::new(llm),
        EngineConfig::default(),
    )?)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(config.as_deref(), std::env::vars())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(cfg))?;
        }
        Command::Schema {
            command: SchemaCommand::Validate { file },
        } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let report = validate_schema(&parse_schema(&text)?);
            print_json(&report);
            if !report.is_valid() {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ingest {
            session,
            schema,
            mock_script,
            data_dir,
        } => {
            let schema = parse_schema(&std::fs::read_to_string(&schema)?)?;
            let llm = MockProvider::from_file(&mock_script)
                .with_context(|| format!("loading mock script {}", mock_script.display()))?;
            let store = match data_dir {
                Some(d) => Store::open(&d, StoreConfig::default())?.0,
                None => Store::in_memory(StoreConfig::default()),
            };
            let mb = offline_engine(store, llm)?;
            if mb.schema().map(|s| s.version) != Some(schema.version) {
                let report = mb.install_schema(schema)?;
                anyhow::ensure!(report.is_valid(), "schema rejected: {:?}", report.violations);
            }
            let report = mb.ingest_session(&load_session(&session)?)?;
            let events: Vec<_> = mb.store().read(|s| {
                report
                    .event_ids
                    .iter()
                    .filter_map(|id| s.events.get(id).cloned())
                    .collect()
            });
            print_json(&serde_json::json!({ "extraction": report, "events": events }));
        }
        Command::Query {
            text,
            k,
            w_time,
            w_busi,
            no_rerank,
            dir,
        } => {
            let (store, _) = Store::open(&dir.data_dir, StoreConfig::default())?;
            let mb = offline_engine(store, MockProvider::default())?;
            let mut cfg = RecallConfig {
                final_k: k,
                quota_primary: k - k / 5,
                quota_keyword: k / 5,
                ..RecallConfig::default()
            };
            cfg.w_time = w_time.unwrap_or(cfg.w_time);
            cfg.w_busi = w_busi.unwrap_or(cfg.w_busi);
            cfg.rerank.enabled = !no_rerank;
            print_json(&mb.search(&text, &cfg, &SearchFilter::default())?);
        }
        Command::Bench {
            command:
                BenchCommand::Rerank {
                    candidates,
                    tokens,
                    query_tokens,
                    dim,
                    iterations,
                    exact,
                },
        } => {
            anyhow::ensure!(candidates > 0 && tokens > 0 && query_tokens > 0 && dim > 0, "sizes must be positive");
            let r = bench_rerank(&RerankBench {
                candidates,
                tokens,
                query_tokens,
                dim,
                iterations: iterations.max(1),
                quantized: !exact,
                ..RerankBench::default()
            });
            println!(
                "rerank candidates={candidates} tokens={tokens} query_tokens={query_tokens} dim={dim} quantized={} simd={}",
                !exact, r.simd
            );
            println!("p50_ms={:.3} p95_ms={:.3} max_ms={:.3} mean_ms={:.3}", r.p50_ms, r.p95_ms, r.max_ms, r.mean_ms);
        }
        Command::Snapshot { dir, out } => {
            let (store, _) = Store::open(&dir.data_dir, StoreConfig::default())?;
            let path = store.snapshot()?;
            if let Some(out) = out {
                std::fs::copy(&path, &out)?;
                println!("{}", out.display());
            } else {
                println!("{}", path.display());
            }
        }
        Command::Restore { path, dir } => {
            let (store, _) = Store::restore(&dir.data_dir, &path, StoreConfig::default())?;
            let n = store.read(|s| s.records.len());
            println!("restored {n} records into {}", dir.data_dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("MEMBASE_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let command = std::env::args().nth(1).unwrap_or_default();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let p = Problem {
                code: "command_failed".into(),
                message: format!("{e:#}"),
                path: command,
                details: None,
            };
            eprintln!("{}", serde_json::to_string(&p).expect("problem serializes"));
            ExitCode::from(2)
        }
    }
}
