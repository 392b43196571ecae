use std::io::{BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use storyrank::prompt::{RankRequest, RankResponse, ScoringContext};
use storyrank_cli::pipeline::{self, load_vocab, LoadedModel, RunDir};
use storyrank_cli::serve::{serve_lines, serve_tcp, ServeConfig};
use storyrank_cli::{error_code, one_line, PipelineConfig};

#[derive(Parser)]
#[command(name = "storyrank", version, about = "Generative ranking over serialized viewer stories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    dir: PathBuf,
    /// TOML pipeline config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.macro_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<(PipelineConfig, RunDir)> {
        Ok((PipelineConfig::load(self.config.as_deref(), &self.overrides)?, RunDir::new(&self.dir)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world (stories.jsonl, catalog.jsonl).
    GenData(Common),
    /// Learn the vocabulary (vocab.tsv).
    BuildVocab(Common),
    /// Sample the training corpus for the configured transform.
    BuildCorpus(Common),
    /// Train a model on the corpus.
    Train(Common),
    /// Evaluate checkpoints and baselines on held-out users (metrics.jsonl).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to compare; every model-*.ckpt in the run directory
        /// when absent.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Run every stage in order.
    Run(Common),
    /// Answer one rank request (JSON) and print the response.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Request file; stdin when absent.
        #[arg(long)]
        request: Option<PathBuf>,
    },
    /// Serve rank requests as line-delimited JSON over stdio or TCP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Listen address such as 127.0.0.1:7878; stdio when absent.
        #[arg(long)]
        listen: Option<String>,
        /// Stop after this many TCP connections.
        #[arg(long)]
        max_connections: Option<usize>,
        /// Micro-batching window in milliseconds; 0 disables batching.
        #[arg(long, default_value_t = 0)]
        batch_window_ms: u64,
        #[arg(long, default_value_t = 16)]
        max_batch: usize,
        #[arg(long, default_value_t = 256)]
        queue_capacity: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", error_code(&e), one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let (cfg, dir) = c.load()?;
            let report = pipeline::gen_data(&cfg, &dir)?;
            print!("{}", report.to_table());
        }
        Command::BuildVocab(c) => {
            let (cfg, dir) = c.load()?;
            let vocab = pipeline::build_vocab(&cfg, &dir)?;
            println!("vocabulary: {} tokens, {} merges, hash {}", vocab.len(), vocab.merge_count(), vocab.hash());
        }
        Command::BuildCorpus(c) => {
            let (cfg, dir) = c.load()?;
            let path = pipeline::build_corpus(&cfg, &dir)?;
            println!("corpus: {} examples -> {}", pipeline::corpus_len(&cfg), path.display());
        }
        Command::Train(c) => {
            let (cfg, dir) = c.load()?;
            train(&cfg, &dir)?;
        }
        Command::Eval { common, checkpoints } => {
            let (cfg, dir) = common.load()?;
            let checkpoints = if checkpoints.is_empty() { dir.checkpoints()? } else { checkpoints };
            let out = pipeline::eval(&cfg, &dir, &checkpoints)?;
            print!("{}", out.table);
        }
        Command::Run(c) => {
            let (cfg, dir) = c.load()?;
            print!("{}", pipeline::gen_data(&cfg, &dir)?.to_table());
            pipeline::build_vocab(&cfg, &dir)?;
            pipeline::build_corpus(&cfg, &dir)?;
            let summary = train(&cfg, &dir)?;
            print!("{}", pipeline::eval(&cfg, &dir, &[summary.checkpoint])?.table);
        }
        Command::Rank { checkpoint, vocab, request } => {
            let (model, vocab) = load_model(&checkpoint, &vocab)?;
            let text = match request {
                Some(p) => std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let req: RankRequest = serde_json::from_str(text.trim())?;
            let t = Instant::now();
            let prompt = req.prompt(&vocab, &model.meta().transform, model.context_length())?;
            let list = model.rank(&prompt, &ScoringContext::new())?;
            let resp = RankResponse::new(&req, &list, &vocab, model.meta().step, t.elapsed().as_micros() as u64);
            println!("{}", serde_json::to_string(&resp)?);
        }
        Command::Serve { checkpoint, vocab, listen, max_connections, batch_window_ms, max_batch, queue_capacity } => {
            let (model, vocab) = load_model(&checkpoint, &vocab)?;
            let cfg = ServeConfig { batch_window: Duration::from_millis(batch_window_ms), max_batch, queue_capacity };
            let stats = match listen {
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    serve_tcp(&model, &vocab, cfg, listener, max_connections)?
                }
                None => {
                    let stdout = std::io::stdout();
                    serve_lines(&model, &vocab, cfg, BufReader::new(std::io::stdin()), stdout.lock())?
                }
            };
            eprintln!("{}", stats.summary_json());
        }
    }
    Ok(())
}

fn train(cfg: &PipelineConfig, dir: &RunDir) -> Result<pipeline::TrainSummary> {
    let every = (cfg.train.macro_steps / 10).max(1);
    let mut stderr = std::io::stderr();
    let summary = pipeline::train(cfg, dir, &mut |m| {
        if m.step == 1 || m.step % every == 0 {
            let _ = writeln!(stderr, "step {} loss {:.4} lr {:.2e} grad_norm {:.3}", m.step, m.loss, m.lr, m.grad_norm);
        }
    })?;
    println!(
        "trained {} steps: loss {:.4} -> {:.4}, checkpoint {}",
        summary.steps,
        summary.first_loss,
        summary.last_loss,
        summary.checkpoint.display()
    );
    Ok(summary)
}

fn load_model(checkpoint: &PathBuf, vocab: &PathBuf) -> Result<(LoadedModel, storyrank::Vocabulary)> {
    let model = LoadedModel::load(checkpoint)?;
    let vocab = load_vocab(vocab)?;
    model.check_vocab(&vocab)?;
    Ok((model, vocab))
}
