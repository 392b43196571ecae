//! Line-delimited JSON serving loop with optional micro-batching.

use std::io::{BufRead, Write};
use std::net::TcpListener;
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use storyrank::prompt::{RankError, RankRequest, RankResponse, ScoringContext};
use storyrank::{TaskPrompt, Vocabulary};

use crate::pipeline::LoadedModel;

/// Per-request latencies in microseconds.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LatencyHistogram {
    samples: Vec<u64>,
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, micros: u64) {
        self.samples.push(micros);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        self.samples.extend_from_slice(&other.samples);
    }

    /// Nearest-rank percentile, `p` in (0, 100].
    pub fn percentile(&self, p: f64) -> Option<u64> {
        if self.samples.is_empty() || !(p > 0.0 && p <= 100.0) {
            return None;
        }
        let mut sorted = self.samples.clone();
        sorted.sort_unstable();
        let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
        Some(sorted[rank.clamp(1, sorted.len()) - 1])
    }

    pub fn summary(&self) -> LatencySummary {
        LatencySummary {
            samples: self.samples.len(),
            p50_us: self.percentile(50.0),
            p95_us: self.percentile(95.0),
            p99_us: self.percentile(99.0),
            max_us: self.samples.iter().copied().max(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub p50_us: Option<u64>,
    pub p95_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub max_us: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServeConfig {
    /// How long to wait for more requests after the first of a batch;
    /// zero disables batching.
    pub batch_window: Duration,
    pub max_batch: usize,
    pub queue_capacity: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { batch_window: Duration::ZERO, max_batch: 16, queue_capacity: 256 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: u64,
    pub errors: u64,
    pub batches: u64,
    pub forward_passes: u64,
    pub latency: LatencyHistogram,
}

impl ServeStats {
    pub fn merge(&mut self, other: &ServeStats) {
        self.requests += other.requests;
        self.errors += other.errors;
        self.batches += other.batches;
        self.forward_passes += other.forward_passes;
        self.latency.merge(&other.latency);
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "requests": self.requests,
            "errors": self.errors,
            "batches": self.batches,
            "forward_passes": self.forward_passes,
            "latency": self.latency.summary(),
        })
        .to_string()
    }
}

struct Pending {
    line: String,
    arrived: Instant,
}

/// Reads requests from `input` on a reader thread and answers each line on
/// `output` until end of input.
pub fn serve_lines<R, W>(model: &LoadedModel, vocab: &Vocabulary, cfg: ServeConfig, input: R, mut output: W) -> Result<ServeStats>
where
    R: BufRead + Send,
    W: Write,
{
    let (tx, rx) = sync_channel::<Pending>(cfg.queue_capacity.max(1));
    std::thread::scope(|scope| {
        let reader = scope.spawn(move || -> std::io::Result<()> {
            for line in input.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                if tx.send(Pending { line, arrived: Instant::now() }).is_err() {
                    break;
                }
            }
            Ok(())
        });
        let stats = answer_loop(model, vocab, cfg, &rx, &mut output);
        drop(rx);
        let read = reader.join().expect("reader thread panicked");
        let stats = stats?;
        read.context("reading requests")?;
        Ok(stats)
    })
}

fn next_batch(rx: &Receiver<Pending>, cfg: &ServeConfig) -> Option<Vec<Pending>> {
    let first = rx.recv().ok()?;
    let mut batch = vec![first];
    if cfg.batch_window.is_zero() {
        return Some(batch);
    }
    let deadline = Instant::now() + cfg.batch_window;
    while batch.len() < cfg.max_batch.max(1) {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(p) => batch.push(p),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    Some(batch)
}

fn answer_loop<W: Write>(
    model: &LoadedModel,
    vocab: &Vocabulary,
    cfg: ServeConfig,
    rx: &Receiver<Pending>,
    out: &mut W,
) -> Result<ServeStats> {
    let ctx = ScoringContext::new();
    let step = model.meta().step;
    let transform = model.meta().transform;
    let ctx_len = model.context_length();
    let mut stats = ServeStats::default();
    while let Some(batch) = next_batch(rx, &cfg) {
        stats.batches += 1;
        let mut ready: Vec<(RankRequest, TaskPrompt, Instant)> = Vec::new();
        for p in batch {
            stats.requests += 1;
            let parsed: Result<RankRequest> = serde_json::from_str(&p.line).map_err(Into::into);
            let built = parsed.and_then(|req| {
                let prompt = req.prompt(vocab, &transform, ctx_len)?;
                Ok((req, prompt))
            });
            match built {
                Ok((req, prompt)) => ready.push((req, prompt, p.arrived)),
                Err(e) => {
                    stats.errors += 1;
                    write_error(out, request_id(&p.line), &e)?;
                }
            }
        }
        if ready.is_empty() {
            continue;
        }
        let lists = if cfg.batch_window.is_zero() || ready.len() == 1 {
            ready.iter().map(|(_, prompt, _)| model.rank(prompt, &ctx)).collect::<Result<Vec<_>>>()
        } else {
            let prompts: Vec<TaskPrompt> = ready.iter().map(|(_, p, _)| p.clone()).collect();
            model.rank_batch(&prompts, &ctx)
        };
        match lists {
            Ok(lists) => {
                for ((req, _, arrived), list) in ready.iter().zip(&lists) {
                    let latency = arrived.elapsed().as_micros() as u64;
                    stats.latency.record(latency);
                    let resp = RankResponse::new(req, list, vocab, step, latency);
                    serde_json::to_writer(&mut *out, &resp)?;
                    out.write_all(b"\n")?;
                }
            }
            Err(e) => {
                for (req, _, _) in &ready {
                    stats.errors += 1;
                    write_error(out, req.id.clone(), &e)?;
                }
            }
        }
        out.flush()?;
    }
    stats.forward_passes = ctx.forward_calls();
    Ok(stats)
}

fn request_id(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("id")?.as_str().map(str::to_string)
}

fn write_error<W: Write>(out: &mut W, id: Option<String>, e: &anyhow::Error) -> Result<()> {
    let err = RankError { id, error: crate::error_code(e).to_string(), message: crate::one_line(e) };
    serde_json::to_writer(&mut *out, &err)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Accepts TCP connections one at a time, serving each until it closes.
/// Stops after `max_connections` when set.
pub fn serve_tcp(
    model: &LoadedModel,
    vocab: &Vocabulary,
    cfg: ServeConfig,
    listener: TcpListener,
    max_connections: Option<usize>,
) -> Result<ServeStats> {
    let mut total = ServeStats::default();
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream.context("accepting connection")?;
        let reader = std::io::BufReader::new(stream.try_clone()?);
        let stats = serve_lines(model, vocab, cfg, reader, std::io::BufWriter::new(stream))?;
        total.merge(&stats);
        served += 1;
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(total)
}
