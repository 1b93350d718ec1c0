use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use re3g::{router, AppState};
use re3g_core::corpus::SplitPolicy;
use re3g_core::service::{layout, ops, Pipeline, PipelineConfig, SessionStore, TurnOverrides};
use re3g_core::synth::SynthConfig;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "re3g", version, about = "Retrieve, rerank and generate answers grounded in a document corpus")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `$RE3G_RUN_DIR/run-<hash>` or `runs/run-<hash>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Config override, e.g. `--set max_steps=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic documents/dialogues pair.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        clusters: usize,
        #[arg(long, default_value_t = 10)]
        sections: usize,
        #[arg(long, default_value_t = 300)]
        dialogues: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Split documents into passages and copy dialogues into the run directory.
    Ingest {
        #[arg(long)]
        documents: PathBuf,
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Build train/dev examples and the vocabulary.
    Split,
    TrainRetriever {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        phase: u8,
    },
    TrainReranker,
    /// Encode the corpus with the configured retriever phase.
    Index,
    TrainGenerator {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Every training step in order, then the index.
    TrainAll,
    /// Score prediction files, or run the pipeline over the dev split.
    Eval {
        #[arg(long, requires = "references")]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "predictions")]
        references: Option<PathBuf>,
        /// Report directory for file scoring; defaults to `<run-dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        ablation: Ablation,
    },
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Interactive session on stdin.
    Chat {
        #[command(flatten)]
        ablation: Ablation,
    },
}

#[derive(Args)]
struct SplitArgs {
    /// One passage per header section instead of token windows.
    #[arg(long, conflicts_with_all = ["window", "stride"])]
    structural: bool,
    #[arg(long, default_value_t = 200)]
    window: usize,
    #[arg(long, default_value_t = 100)]
    stride: usize,
}

#[derive(Args)]
struct Ablation {
    #[arg(long)]
    no_reranker: bool,
    #[arg(long)]
    no_refinement: bool,
}

impl Ablation {
    fn overrides(&self) -> TurnOverrides {
        TurnOverrides {
            use_reranker: self.no_reranker.then_some(false),
            use_refinement: self.no_refinement.then_some(false),
        }
    }
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<PipelineConfig> {
    let base = match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if sets.is_empty() {
        return Ok(base);
    }
    let mut table: toml::Table = toml::from_str(&base.to_toml()?)?;
    for s in sets {
        let Some((key, value)) = s.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {s:?}");
        };
        let key = key.trim();
        let parsed: toml::Table = toml::from_str(&format!("v = {}", value.trim()))
            .or_else(|_| toml::from_str(&format!("v = {:?}", value.trim())))
            .with_context(|| format!("bad value for {key}"))?;
        table.insert(key.to_string(), parsed["v"].clone());
    }
    Ok(PipelineConfig::from_toml_str(&toml::to_string(&table)?)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| cfg.run_dir());

    match cli.command {
        Command::Synth {
            out,
            clusters,
            sections,
            dialogues,
            seed,
        } => {
            let synth = SynthConfig {
                clusters,
                sections_per_cluster: sections,
                dialogues,
                dev_fraction: cfg.dev_fraction,
                seed,
            };
            let (d, n) = ops::write_synth(&out, &synth)?;
            print_json(&serde_json::json!({ "documents": d, "dialogues": n, "out": out }))?;
        }
        Command::Ingest {
            documents,
            dialogues,
            split,
        } => {
            let policy = if split.structural {
                SplitPolicy::Structural
            } else {
                SplitPolicy::Window {
                    size: split.window,
                    stride: split.stride,
                }
            };
            print_json(&ops::ingest(&run_dir, &documents, dialogues.as_deref(), &policy, &cfg)?)?;
        }
        Command::Split => print_json(&ops::split(&run_dir, &cfg)?)?,
        Command::TrainRetriever { phase } => print_json(&ops::train_retriever(&run_dir, phase, &cfg)?)?,
        Command::TrainReranker => print_json(&ops::train_reranker(&run_dir, &cfg)?)?,
        Command::Index => print_json(&ops::build_index(&run_dir, &cfg)?)?,
        Command::TrainGenerator { stage } => print_json(&ops::train_generator(&run_dir, stage, &cfg)?)?,
        Command::TrainAll => {
            ops::train_all(&run_dir, &cfg)?;
            print_json(&ops::artifact_summary(&run_dir))?;
        }
        Command::Eval {
            predictions,
            references,
            out,
            ablation,
        } => {
            let report = match (predictions, references) {
                (Some(p), Some(r)) => {
                    let out = out.unwrap_or_else(|| run_dir.join(layout::EVAL_DIR));
                    ops::evaluate_files(&p, &r, &out)?
                }
                _ => ops::evaluate_dev(&run_dir, &cfg, &ablation.overrides())?,
            };
            print_json(&report)?;
        }
        Command::Serve { addr } => {
            let pipeline = Pipeline::load(&run_dir, cfg)?;
            let sessions = SessionStore::open(&run_dir.join(layout::SESSIONS_DIR))?;
            let state = Arc::new(AppState::new(pipeline, sessions, Some(run_dir)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Chat { ablation } => chat(&run_dir, cfg, ablation.overrides())?,
    }
    Ok(())
}

fn chat(run_dir: &Path, cfg: PipelineConfig, overrides: TurnOverrides) -> Result<()> {
    let pipeline = Pipeline::load(run_dir, cfg)?;
    let store = SessionStore::in_memory();
    let id = store.create()?;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    write!(out, "> ")?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            write!(out, "> ")?;
            out.flush()?;
            continue;
        }
        let record = store.turn(&pipeline, &id, &line, &overrides)?;
        writeln!(out, "{}", record.answer)?;
        if let (Some(span), Some(o)) = (&record.span, &record.span_offsets) {
            writeln!(out, "  [{} {}..{}] {span}", o.passage_id, o.start, o.end)?;
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    Ok(())
}
