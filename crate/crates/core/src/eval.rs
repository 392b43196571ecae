//! Offline evaluation: user split, eligible positions, HR@K and NDCG@K,
//! and the BM25 and popularity baselines.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::CatalogIndex;
use crate::error::{Error, Result};
use crate::grammar::StoryTransform;
use crate::lm::{KvCache, Model, Wanted};
use crate::prompt::{build_prompt, candidates, extend_transformed, PromptContext, RankedList, Scored, TaskKind};
use crate::scalar::Scalar;
use crate::story::{Event, Session, Surface, UserStory};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_cutoffs: Vec<usize>,
    /// Fraction of users held out (production scale: 0.01).
    pub holdout_fraction: f64,
    pub rng_seed: u64,
    /// Evaluate only the first this many held-out users.
    pub max_users: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_cutoffs: vec![8, 50, 100], holdout_fraction: 0.1, rng_seed: 0, max_users: None }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_cutoffs.is_empty() || self.k_cutoffs.contains(&0) || !self.k_cutoffs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("k_cutoffs must be positive and strictly increasing"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config("holdout_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Position of `user_id` in [0, 1), fixed by the seed.
fn split_point(user_id: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(user_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64)
}

/// Deterministic hash-based split into (train, eval).
pub fn split_users(stories: &[UserStory], cfg: &EvalConfig) -> Result<(Vec<UserStory>, Vec<UserStory>)> {
    cfg.validate()?;
    let mut seen = HashSet::new();
    if let Some(dup) = stories.iter().find(|s| !seen.insert(s.user_id.as_str())) {
        return Err(Error::invalid(format!("duplicate user_id `{}`", dup.user_id)));
    }
    let (eval, train): (Vec<_>, Vec<_>) =
        stories.iter().cloned().partition(|s| split_point(&s.user_id, cfg.rng_seed) < cfg.holdout_fraction);
    if eval.is_empty() {
        return Err(Error::invalid(format!(
            "holdout fraction {} leaves no evaluation users out of {}",
            cfg.holdout_fraction,
            stories.len()
        )));
    }
    Ok((train, eval))
}

/// What a position asks the ranker to find.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Item(String),
    Carousel(String),
}

impl Target {
    pub fn token(&self, vocab: &Vocabulary) -> Option<TokenId> {
        match self {
            Target::Item(id) => vocab.item_token_id(id),
            Target::Carousel(id) => vocab.carousel_token_id(id).filter(|_| !id.is_empty()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligiblePosition {
    pub kind: TaskKind,
    /// Index of the target watch among the story's events.
    pub event_index: usize,
    /// Number of leading events kept as the prompt's history.
    pub prefix_events: usize,
    /// Prompt time, used to decide whether the head opens a session.
    pub now: i64,
    pub context: PromptContext,
    pub target: Target,
}

pub fn eligible_positions(story: &UserStory, kind: TaskKind) -> Vec<EligiblePosition> {
    let mut out = Vec::new();
    let mut index = 0;
    for session in &story.sessions {
        for (i, event) in session.events.iter().enumerate() {
            let event_index = index + i;
            let Event::Watch(w) = event else { continue };
            let base = PromptContext::at_hour(w.hour);
            let pos = match kind {
                TaskKind::ItemMasked | TaskKind::ItemContextual => w.item.as_ref().map(|item| {
                    let context = if kind == TaskKind::ItemContextual {
                        PromptContext { surface: Some(w.surface), carousel: Some(w.carousel.carousel_id.clone()), ..base }
                    } else {
                        base
                    };
                    (event_index, w.timestamp, context, Target::Item(item.item_id.clone()))
                }),
                TaskKind::Carousel => (!w.carousel.is_empty()).then(|| {
                    let context = PromptContext { surface: Some(w.surface), ..base };
                    (event_index, w.timestamp, context, Target::Carousel(w.carousel.carousel_id.clone()))
                }),
                TaskKind::Search => match (w.surface, &w.item, i.checked_sub(1).map(|j| &session.events[j])) {
                    (Surface::Search, Some(item), Some(Event::Search(s))) => {
                        let context = PromptContext { query: Some(s.query.clone()), ..base };
                        Some((event_index - 1, s.timestamp, context, Target::Item(item.item_id.clone())))
                    }
                    _ => None,
                },
            };
            if let Some((prefix_events, now, context, target)) = pos {
                out.push(EligiblePosition { kind, event_index, prefix_events, now, context, target });
            }
        }
        index += session.events.len();
    }
    out
}

/// The story restricted to its first `n` events, sessions kept.
pub fn story_prefix(story: &UserStory, n: usize) -> UserStory {
    let mut left = n;
    let mut sessions = Vec::new();
    for s in &story.sessions {
        if left == 0 {
            break;
        }
        let take = left.min(s.events.len());
        sessions.push(Session { start_time: s.start_time, clause: s.clause, events: s.events[..take].to_vec() });
        left -= take;
    }
    UserStory { user_id: story.user_id.clone(), attributes: story.attributes.clone(), sessions }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: String,
    pub task: TaskKind,
    pub position: usize,
    pub target: TokenId,
    /// 1-based rank among the candidates; absent when the target is not a
    /// candidate.
    pub rank: Option<usize>,
}

fn require_records(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no evaluation records"));
    }
    Ok(())
}

pub fn hit_rate_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    require_records(records)?;
    let hits = records.iter().filter(|r| r.rank.is_some_and(|rank| rank <= k)).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn ndcg_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    require_records(records)?;
    let total: f64 = records.iter().map(|r| discount(r.rank, k)).sum();
    Ok(total / records.len() as f64)
}

fn discount(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Something that ranks candidates at eligible positions.
pub trait Ranker {
    /// Row label in reports.
    fn method(&self) -> String;

    fn supports(&self, kind: TaskKind) -> bool;

    fn rank_position(&mut self, story: &UserStory, pos: &EligiblePosition, candidates: &[TokenId]) -> Result<RankedList>;
}

/// A language model scoring prompts built from the story prefix under its
/// training transform. Consecutive prompts share a key/value cache over
/// their common token prefix.
pub struct ModelRanker<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub vocab: &'a Vocabulary,
    pub transform: StoryTransform,
    pub label: String,
    cache: KvCache<T>,
    cached: Vec<TokenId>,
    forward_calls: u64,
}

impl<'a, T: Scalar> ModelRanker<'a, T> {
    pub fn new(model: &'a Model<T>, vocab: &'a Vocabulary, transform: StoryTransform) -> Self {
        Self {
            model,
            vocab,
            transform,
            label: transform.label(),
            cache: KvCache::new(),
            cached: Vec::new(),
            forward_calls: 0,
        }
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls
    }

    /// Last-position logits for `ids`, reusing the cached common prefix.
    pub fn logits(&mut self, ids: &[TokenId]) -> Result<Vec<T>> {
        if ids.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let common = self.cached.iter().zip(ids).take_while(|(a, b)| a == b).count().min(ids.len() - 1);
        self.cache.truncate(common, self.model.config().model_dim);
        self.cached.truncate(common);
        self.forward_calls += 1;
        let out = self.model.forward_cached(&mut self.cache, &ids[common..], Wanted::Last);
        match out {
            Ok(logits) => {
                self.cached.extend_from_slice(&ids[common..]);
                Ok(logits)
            }
            Err(e) => {
                self.cache = KvCache::new();
                self.cached.clear();
                Err(e)
            }
        }
    }
}

impl<T: Scalar> Ranker for ModelRanker<'_, T> {
    fn method(&self) -> String {
        self.label.clone()
    }

    fn supports(&self, _kind: TaskKind) -> bool {
        true
    }

    fn rank_position(&mut self, story: &UserStory, pos: &EligiblePosition, candidates: &[TokenId]) -> Result<RankedList> {
        let history = story_prefix(story, pos.prefix_events);
        let prefix = extend_transformed(&history, pos.now, &self.transform)?;
        let prompt = build_prompt(&prefix, pos.kind, &pos.context, self.vocab, self.model.config().context_length)?;
        let logits = self.logits(&prompt.token_ids)?;
        RankedList::from_logits(&logits, candidates)
    }
}

/// Ranks by global watch counts in the training stories; the same list
/// for every position.
pub struct PopularityRanker {
    items: RankedList,
    carousels: RankedList,
}

impl PopularityRanker {
    pub fn new(train: &[UserStory], vocab: &Vocabulary) -> Self {
        let mut counts: HashMap<TokenId, f64> = HashMap::new();
        for event in train.iter().flat_map(UserStory::events) {
            let Event::Watch(w) = event else { continue };
            if let Some(t) = w.item.as_ref().and_then(|i| vocab.item_token_id(&i.item_id)) {
                *counts.entry(t).or_default() += 1.0;
            }
            if !w.carousel.is_empty() {
                if let Some(t) = vocab.carousel_token_id(&w.carousel.carousel_id) {
                    *counts.entry(t).or_default() += 1.0;
                }
            }
        }
        let list = |ids: &[TokenId]| {
            RankedList::from_scores(
                ids.iter().map(|&t| Scored { token_id: t, logit: counts.get(&t).copied().unwrap_or(0.0) }).collect(),
            )
        };
        Self { items: list(vocab.item_token_ids()), carousels: list(vocab.carousel_token_ids()) }
    }
}

impl Ranker for PopularityRanker {
    fn method(&self) -> String {
        "popularity (reference)".into()
    }

    fn supports(&self, _kind: TaskKind) -> bool {
        true
    }

    fn rank_position(&mut self, _story: &UserStory, pos: &EligiblePosition, candidates: &[TokenId]) -> Result<RankedList> {
        let full = if pos.kind.ranks_items() { &self.items } else { &self.carousels };
        let keep: HashSet<TokenId> = candidates.iter().copied().collect();
        Ok(RankedList(full.0.iter().filter(|s| keep.contains(&s.token_id)).copied().collect()))
    }
}

/// Okapi BM25 over catalog titles.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    doc_ids: Vec<String>,
    doc_terms: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    df: HashMap<String, usize>,
    avg_len: f64,
}

/// Lowercased alphanumeric runs.
pub fn bm25_terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

impl Bm25Index {
    pub fn new(docs: &[(String, String)], k1: f64, b: f64) -> Self {
        let mut doc_terms = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for (_, title) in docs {
            let terms = bm25_terms(title);
            doc_lens.push(terms.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            doc_terms.push(tf);
        }
        let avg_len = if docs.is_empty() { 0.0 } else { doc_lens.iter().sum::<usize>() as f64 / docs.len() as f64 };
        Self { k1, b, doc_ids: docs.iter().map(|(id, _)| id.clone()).collect(), doc_terms, doc_lens, df, avg_len }
    }

    pub fn from_catalog(catalog: &CatalogIndex) -> Self {
        let docs: Vec<_> = catalog.items().iter().map(|i| (i.item_id.clone(), i.title.clone())).collect();
        Self::new(&docs, 1.2, 0.75)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let n = self.len() as f64;
        let len_norm = if self.avg_len > 0.0 { self.doc_lens[doc] as f64 / self.avg_len } else { 0.0 };
        bm25_terms(query)
            .iter()
            .map(|t| {
                let tf = self.doc_terms[doc].get(t).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                let df = self.df.get(t).copied().unwrap_or(0) as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * len_norm))
            })
            .sum()
    }

    /// Every document as (item_id, score), best first, ties by item_id.
    pub fn rank(&self, query: &str) -> Result<Vec<(String, f64)>> {
        if self.is_empty() {
            return Err(Error::invalid("BM25 index is empty"));
        }
        let mut out: Vec<_> = (0..self.len()).map(|d| (self.doc_ids[d].clone(), self.score(query, d))).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }
}

pub struct Bm25Ranker<'a> {
    pub index: Bm25Index,
    pub vocab: &'a Vocabulary,
}

impl Ranker for Bm25Ranker<'_> {
    fn method(&self) -> String {
        format!("bm25 (k1={}, b={})", self.index.k1, self.index.b)
    }

    fn supports(&self, kind: TaskKind) -> bool {
        kind == TaskKind::Search
    }

    fn rank_position(&mut self, _story: &UserStory, pos: &EligiblePosition, candidates: &[TokenId]) -> Result<RankedList> {
        let query = pos.context.query.as_deref().ok_or_else(|| Error::invalid("BM25 needs a query"))?;
        let keep: HashSet<TokenId> = candidates.iter().copied().collect();
        let ranked = self.index.rank(query)?;
        Ok(RankedList(
            ranked
                .into_iter()
                .filter_map(|(id, score)| self.vocab.item_token_id(&id).map(|t| Scored { token_id: t, logit: score }))
                .filter(|s| keep.contains(&s.token_id))
                .collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub task: TaskKind,
    pub n_positions: usize,
    /// (K, HR@K, NDCG@K); empty when there were no eligible positions.
    pub metrics: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub kinds: Vec<KindReport>,
}

/// Runs `ranker` over every eligible position of `stories` for each kind.
pub fn evaluate(
    ranker: &mut dyn Ranker,
    stories: &[UserStory],
    kinds: &[TaskKind],
    cfg: &EvalConfig,
    vocab: &Vocabulary,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    cfg.validate()?;
    let stories = &stories[..cfg.max_users.unwrap_or(stories.len()).min(stories.len())];
    let mut all = Vec::new();
    let mut kinds_out = Vec::new();
    for &kind in kinds {
        if !ranker.supports(kind) {
            return Err(Error::invalid(format!("{} does not rank the {kind} task", ranker.method())));
        }
        let cands = candidates(kind, vocab);
        let mut records = Vec::new();
        for story in stories {
            for pos in eligible_positions(story, kind) {
                let target = pos
                    .target
                    .token(vocab)
                    .unwrap_or(if kind.ranks_items() { vocab.unknown_item_id() } else { vocab.mask_carousel_id() });
                let list = ranker.rank_position(story, &pos, &cands)?;
                records.push(EvalRecord {
                    user_id: story.user_id.clone(),
                    task: kind,
                    position: pos.event_index,
                    target,
                    rank: list.rank_of(target),
                });
            }
        }
        let metrics = if records.is_empty() {
            Vec::new()
        } else {
            cfg.k_cutoffs
                .iter()
                .map(|&k| Ok((k, hit_rate_at_k(&records, k)?, ndcg_at_k(&records, k)?)))
                .collect::<Result<_>>()?
        };
        kinds_out.push(KindReport { task: kind, n_positions: records.len(), metrics });
        all.extend(records);
    }
    Ok((EvalReport { method: ranker.method(), kinds: kinds_out }, all))
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub task: TaskKind,
    #[serde(rename = "K")]
    pub k: usize,
    /// Absent when the task had no eligible positions.
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub n_positions: usize,
    pub config_hash: String,
}

pub fn metric_rows(report: &EvalReport, k_cutoffs: &[usize], config_hash: &str) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for kind in &report.kinds {
        for &k in k_cutoffs {
            let m = kind.metrics.iter().find(|m| m.0 == k);
            rows.push(MetricRow {
                method: report.method.clone(),
                task: kind.task,
                k,
                hr: m.map(|m| m.1),
                ndcg: m.map(|m| m.2),
                n_positions: kind.n_positions,
                config_hash: config_hash.to_string(),
            });
        }
    }
    rows
}

pub fn write_metrics(mut w: impl std::io::Write, rows: &[MetricRow]) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics(r: impl std::io::BufRead) -> Result<Vec<MetricRow>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Text table grouped by task, one row per method: HR at every cutoff,
/// then NDCG at every cutoff.
pub fn format_table(rows: &[MetricRow]) -> String {
    let mut tasks: Vec<TaskKind> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    let mut ks: Vec<usize> = Vec::new();
    for r in rows {
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !ks.contains(&r.k) {
            ks.push(r.k);
        }
    }
    ks.sort_unstable();
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<16} {:<width$}", "Task", "Method");
    for k in &ks {
        let _ = write!(out, " {:>9}", format!("HR@{k}"));
    }
    for k in &ks {
        let _ = write!(out, " {:>9}", format!("NDCG@{k}"));
    }
    let _ = writeln!(out, " {:>9}", "n");
    for task in tasks {
        for method in &methods {
            let cells: Vec<&MetricRow> = rows.iter().filter(|r| r.task == task && r.method == *method).collect();
            if cells.is_empty() {
                continue;
            }
            let _ = write!(out, "{:<16} {:<width$}", task.as_str(), method);
            let n = cells[0].n_positions;
            if n == 0 {
                let _ = writeln!(out, " no eligible positions");
                continue;
            }
            let get = |k: usize| cells.iter().find(|r| r.k == k);
            for &k in &ks {
                let _ = write!(out, " {:>9}", get(k).and_then(|r| r.hr).map_or("-".into(), |v| format!("{v:.4}")));
            }
            for &k in &ks {
                let _ = write!(out, " {:>9}", get(k).and_then(|r| r.ndcg).map_or("-".into(), |v| format!("{v:.4}")));
            }
            let _ = writeln!(out, " {n:>9}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::tests::{sample_catalog, sample_story};

    fn rec(rank: Option<usize>) -> EvalRecord {
        EvalRecord { user_id: "u".into(), task: TaskKind::ItemMasked, position: 0, target: 0, rank }
    }

    #[test]
    fn hit_rate_from_ranks() {
        let rs = [rec(Some(1)), rec(Some(9)), rec(Some(200))];
        assert_eq!(hit_rate_at_k(&rs, 8).unwrap(), 1.0 / 3.0);
        assert_eq!(hit_rate_at_k(&rs, 50).unwrap(), 2.0 / 3.0);
        assert_eq!(hit_rate_at_k(&rs, 100).unwrap(), 2.0 / 3.0);
        assert!(hit_rate_at_k(&[], 8).is_err());
        assert!(ndcg_at_k(&[], 8).is_err());
    }

    #[test]
    fn ndcg_discounts() {
        assert_eq!(ndcg_at_k(&[rec(Some(1))], 8).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[rec(Some(3))], 8).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&[rec(Some(51))], 50).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[rec(None)], 50).unwrap(), 0.0);
    }

    #[test]
    fn split_is_deterministic_and_bounded() {
        let stories: Vec<UserStory> = (0..1000)
            .map(|i| UserStory { user_id: format!("user-{i}"), attributes: Default::default(), sessions: vec![] })
            .collect();
        let cfg = EvalConfig::default();
        let (train, eval) = split_users(&stories, &cfg).unwrap();
        assert!((80..=120).contains(&eval.len()), "{}", eval.len());
        assert_eq!(train.len() + eval.len(), 1000);
        let ids: HashSet<_> = train.iter().map(|s| &s.user_id).collect();
        assert!(eval.iter().all(|s| !ids.contains(&s.user_id)));
        assert_eq!(split_users(&stories, &cfg).unwrap().1, eval);
        let tiny = EvalConfig { holdout_fraction: 1e-9, ..cfg };
        assert!(split_users(&stories, &tiny).is_err());
    }

    #[test]
    fn sample_story_positions() {
        let story = sample_story();
        let search = eligible_positions(&story, TaskKind::Search);
        assert_eq!(search.len(), 1);
        assert_eq!(search[0].target, Target::Item("SYN201".into()));
        assert_eq!(search[0].context.query.as_deref(), Some("lantern"));
        assert_eq!(search[0].prefix_events, 1);
        assert_eq!(eligible_positions(&story, TaskKind::ItemMasked).len(), 3);
        // The search-surface watch has no carousel.
        assert_eq!(eligible_positions(&story, TaskKind::Carousel).len(), 2);
    }

    #[test]
    fn search_prompt_reproduces_the_story_text() {
        let cat = sample_catalog();
        let vocab = Vocabulary::build(&cat, 0, &[] as &[&str]).unwrap();
        let story = sample_story();
        let pos = &eligible_positions(&story, TaskKind::Search)[0];
        let prefix = extend_transformed(&story_prefix(&story, pos.prefix_events), pos.now, &StoryTransform::default()).unwrap();
        let prompt = build_prompt(&prefix, pos.kind, &pos.context, &vocab, 4096).unwrap();
        let full = crate::grammar::serialize(&story).unwrap();
        let text = vocab.detokenize(&prompt.token_ids).unwrap();
        assert!(full.as_str().starts_with(&text), "{text}");
        assert!(text.ends_with("<|carousel()|>"));
    }

    struct TableRanker(HashMap<TokenId, f64>);

    impl Ranker for TableRanker {
        fn method(&self) -> String {
            "table".into()
        }
        fn supports(&self, _: TaskKind) -> bool {
            true
        }
        fn rank_position(&mut self, _: &UserStory, _: &EligiblePosition, c: &[TokenId]) -> Result<RankedList> {
            Ok(RankedList::from_scores(c.iter().map(|&t| Scored { token_id: t, logit: self.0[&t] }).collect()))
        }
    }

    #[test]
    fn sample_story_with_a_fixed_logit_table() {
        let vocab = Vocabulary::build(&sample_catalog(), 0, &[] as &[&str]).unwrap();
        let syn201 = vocab.item_token_id("SYN201").unwrap();
        let syn202 = vocab.item_token_id("SYN202").unwrap();
        let after = vocab.carousel_token_id("after_dark_detours").unwrap();
        let rainy = vocab.carousel_token_id("rainy_night_rewinds").unwrap();
        // SYN201 above SYN202; rainy above after_dark.
        let table = HashMap::from([(syn201, 2.0), (syn202, 1.0), (after, 0.5), (rainy, 0.7)]);
        let cfg = EvalConfig { k_cutoffs: vec![1, 2], ..Default::default() };
        let kinds = [TaskKind::ItemMasked, TaskKind::Carousel, TaskKind::Search];
        let (report, records) = evaluate(&mut TableRanker(table), &[sample_story()], &kinds, &cfg, &vocab).unwrap();
        assert_eq!(records.len(), 3 + 2 + 1);
        // Items: SYN201 (rank 1), SYN202 (rank 2), SYN201 (rank 1).
        let item = &report.kinds[0];
        assert_eq!(item.metrics[0], (1, 2.0 / 3.0, 2.0 / 3.0));
        let n2 = (2.0 + 1.0 / 3f64.log2()) / 3.0;
        assert_eq!(item.metrics[1], (2, 1.0, n2));
        // Carousels: after_dark at rank 2, rainy at rank 1.
        assert_eq!(report.kinds[1].metrics[0], (1, 0.5, 0.5));
        assert_eq!(report.kinds[2].metrics[0], (1, 1.0, 1.0));
    }

    #[test]
    fn empty_kinds_are_reported() {
        let vocab = Vocabulary::build(&sample_catalog(), 0, &[] as &[&str]).unwrap();
        let story = UserStory { user_id: "u".into(), attributes: Default::default(), sessions: vec![] };
        let mut pop = PopularityRanker::new(&[], &vocab);
        let cfg = EvalConfig::default();
        let (report, _) = evaluate(&mut pop, &[story], &[TaskKind::Search], &cfg, &vocab).unwrap();
        assert_eq!(report.kinds[0].n_positions, 0);
        let rows = metric_rows(&report, &cfg.k_cutoffs, "h");
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.hr.is_none()));
        assert!(format_table(&rows).contains("no eligible positions"));
    }

    #[test]
    fn bm25_ignores_absent_terms() {
        let idx = Bm25Index::new(&[("a".into(), "fog pier".into()), ("b".into(), "night".into())], 1.2, 0.75);
        let ranked = idx.rank("zzz").unwrap();
        assert!(ranked.iter().all(|(_, s)| *s == 0.0));
        assert_eq!(ranked[0].0, "a");
        assert!(Bm25Index::new(&[], 1.2, 0.75).rank("fog").is_err());
    }

    #[test]
    fn metric_rows_roundtrip() {
        let report = EvalReport {
            method: "full".into(),
            kinds: vec![KindReport { task: TaskKind::Search, n_positions: 4, metrics: vec![(8, 0.5, 0.25)] }],
        };
        let rows = metric_rows(&report, &[8], "abc");
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(line.trim(), r#"{"method":"full","task":"search","K":8,"hr":0.5,"ndcg":0.25,"n_positions":4,"config_hash":"abc"}"#);
        assert_eq!(read_metrics(&buf[..]).unwrap(), rows);
    }
}
