//! Task prompts built from live stories, and candidate ranking by
//! next-token logits.

use std::cell::Cell;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{self, render_clause, render_event, render_header, StoryTransform, BEGIN_SESSIONS, SEARCH, WATCH};
use crate::lm::Model;
use crate::scalar::Scalar;
use crate::story::{
    day_of_week, elapsed_hours, hour_of_day, CarouselRef, SessionClause, Surface, UserStory, INACTIVITY_GAP_SECS,
    MAX_SESSION_SPAN_SECS,
};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Item ranking with the carousel masked and the surface fixed to home.
    ItemMasked,
    /// Item ranking under a concrete surface and carousel.
    ItemContextual,
    Carousel,
    Search,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::ItemMasked, TaskKind::ItemContextual, TaskKind::Carousel, TaskKind::Search];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ItemMasked => "item_masked",
            TaskKind::ItemContextual => "item_contextual",
            TaskKind::Carousel => "carousel",
            TaskKind::Search => "search",
        }
    }

    /// Whether the candidates are item tokens (otherwise carousel tokens).
    pub fn ranks_items(self) -> bool {
        self != TaskKind::Carousel
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::invalid(format!("unknown task `{s}` (expected item_masked, item_contextual, carousel or search)"))
        })
    }
}

/// Fields a task head may need.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub hour: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<Surface>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carousel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

impl PromptContext {
    pub fn at_hour(hour: u8) -> Self {
        Self { hour, ..Self::default() }
    }
}

/// A story rendered as prompt text, split into trimmable blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoryPrefix {
    /// Attribute header and the begin marker.
    pub header: String,
    /// One block per event, oldest first, each with its leading space. The
    /// first event of a session carries the session clause.
    pub blocks: Vec<PrefixBlock>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixBlock {
    pub text: String,
    pub opens_session: bool,
}

impl StoryPrefix {
    pub fn text(&self) -> String {
        let mut out = self.header.clone();
        for b in &self.blocks {
            out.push_str(&b.text);
        }
        out
    }

    fn text_from(&self, first_block: usize) -> String {
        let mut out = self.header.clone();
        for b in &self.blocks[first_block..] {
            out.push_str(&b.text);
        }
        out
    }
}

/// Renders `story` and prepares it for a prompt at time `now`: the active
/// session continues if `now` is within an hour of its last activity and
/// within twelve hours of its start, otherwise a new session clause is
/// appended. Stories without session structure never gain a clause.
pub fn extend_story_for_now(story: &UserStory, now: i64) -> Result<StoryPrefix> {
    extend_with(story, now, !story.is_flat())
}

/// Applies `transform` to `story`, then extends it for `now`. A transform
/// that strips sessions also suppresses the new-session clause.
pub fn extend_transformed(story: &UserStory, now: i64, transform: &StoryTransform) -> Result<StoryPrefix> {
    let view = transform.apply(story);
    let sessions = !transform.strip_sessions && !view.is_flat();
    extend_with(&view, now, sessions)
}

fn extend_with(story: &UserStory, now: i64, sessions: bool) -> Result<StoryPrefix> {
    if let Some(last) = story.last_event_time() {
        if now < last {
            return Err(Error::invalid(format!("now ({now}) is before the last event ({last})")));
        }
    }
    let mut header = String::new();
    render_header(&story.attributes, &mut header);
    header.push_str(BEGIN_SESSIONS);

    let mut blocks = Vec::with_capacity(story.event_count() + 1);
    for session in &story.sessions {
        for (i, event) in session.events.iter().enumerate() {
            let mut text = String::new();
            let clause = session.clause.filter(|_| i == 0);
            if let Some(c) = clause {
                text.push(' ');
                render_clause(c, &mut text);
            }
            text.push(' ');
            render_event(event, &mut text);
            blocks.push(PrefixBlock { text, opens_session: clause.is_some() });
        }
    }

    if sessions {
        let active = story.sessions.iter().rev().find(|s| !s.events.is_empty());
        let clause = match active {
            None => Some(SessionClause { elapsed_hours: 0, day_of_week: day_of_week(now) }),
            Some(s) => {
                let end = s.end_time();
                let continues = now - end <= INACTIVITY_GAP_SECS && now - s.start_time <= MAX_SESSION_SPAN_SECS;
                (!continues).then(|| SessionClause { elapsed_hours: elapsed_hours(end, now), day_of_week: day_of_week(now) })
            }
        };
        if let Some(c) = clause {
            let mut text = String::from(" ");
            render_clause(c, &mut text);
            blocks.push(PrefixBlock { text, opens_session: true });
        }
    }
    Ok(StoryPrefix { header, blocks })
}

/// The text appended after a story prefix to select a task.
pub fn task_head(kind: TaskKind, ctx: &PromptContext) -> Result<String> {
    if ctx.hour > 23 {
        return Err(Error::invalid(format!("hour {} is out of range", ctx.hour)));
    }
    let h = ctx.hour;
    let mut out = String::new();
    match kind {
        TaskKind::ItemMasked => {
            let _ = write!(out, " {WATCH} hour={h} <|surface=home|>{}", grammar::CAROUSEL_MASK);
        }
        TaskKind::ItemContextual => {
            let carousel = ctx
                .carousel
                .as_deref()
                .ok_or_else(|| Error::invalid("item_contextual prompts need a carousel"))?;
            let surface = ctx.surface.unwrap_or(if carousel.is_empty() { Surface::Search } else { Surface::Home });
            if surface == Surface::Search && !carousel.is_empty() {
                return Err(Error::invalid("search-surface prompts take the empty carousel"));
            }
            check_carousel(carousel)?;
            let _ = write!(
                out,
                " {WATCH} hour={h} {}{}",
                grammar::surface_token(surface),
                grammar::carousel_token(&CarouselRef::new(carousel))
            );
        }
        TaskKind::Carousel => {
            let surface = ctx.surface.unwrap_or(Surface::Home);
            let _ = write!(out, " {WATCH} hour={h} {}", grammar::surface_token(surface));
        }
        TaskKind::Search => {
            let query = ctx.query.as_deref().ok_or_else(|| Error::invalid("search prompts need a query"))?;
            if query.is_empty() || query.contains(['\n', '\r']) || query.contains("<|") || query.contains("|>") {
                return Err(Error::invalid("query must be non-empty single-line text without `<|` or `|>`"));
            }
            let _ = write!(
                out,
                " {SEARCH} hour={h} {query} {WATCH} hour={h} <|surface=search|>{}",
                grammar::CAROUSEL_EMPTY
            );
        }
    }
    Ok(out)
}

fn check_carousel(id: &str) -> Result<()> {
    if id.contains(['(', ')', '|']) || id.contains(char::is_whitespace) {
        return Err(Error::invalid(format!("malformed carousel id `{id}`")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub kind: TaskKind,
    pub token_ids: Vec<TokenId>,
    /// Position whose next-token logits are read.
    pub target_slot: usize,
    pub candidate_set: Vec<TokenId>,
    /// Number of oldest events dropped to fit the context.
    pub trimmed_events: usize,
}

/// Builds a prompt, trimming whole oldest sessions (or, in a story without
/// sessions, oldest events) until it fits in `context_length` tokens.
pub fn build_prompt(
    prefix: &StoryPrefix,
    kind: TaskKind,
    ctx: &PromptContext,
    vocab: &Vocabulary,
    context_length: usize,
) -> Result<TaskPrompt> {
    let head = task_head(kind, ctx)?;
    let candidate_set = candidates(kind, vocab);
    if candidate_set.is_empty() {
        return Err(Error::invalid(format!("the vocabulary has no candidates for {kind}")));
    }

    let tokens_from = |first: usize| -> Result<Vec<TokenId>> {
        let mut text = prefix.text_from(first);
        text.push_str(&head);
        vocab.tokenize(&text)
    };
    let mut first = 0;
    let mut ids = tokens_from(0)?;
    if ids.len() > context_length {
        // Estimate per-block lengths to jump close to the cut, then verify.
        let block_lens: Vec<usize> =
            prefix.blocks.iter().map(|b| vocab.tokenize(&b.text).map(|t| t.len())).collect::<Result<_>>()?;
        let cut_points = trim_points(prefix);
        let mut excess = ids.len() - context_length;
        let mut idx = 0;
        while ids.len() > context_length {
            let mut next = None;
            while idx < cut_points.len() {
                let cut = cut_points[idx];
                idx += 1;
                let dropped: usize = block_lens[first..cut].iter().sum();
                if dropped >= excess || idx == cut_points.len() {
                    next = Some(cut);
                    break;
                }
            }
            let Some(cut) = next else {
                return Err(Error::invalid(format!(
                    "prompt does not fit in {context_length} tokens even without history"
                )));
            };
            excess = excess.saturating_sub(block_lens[first..cut].iter().sum());
            first = cut;
            ids = tokens_from(first)?;
            excess = excess.max(ids.len().saturating_sub(context_length));
        }
    }
    let target_slot = ids.len() - 1;
    Ok(TaskPrompt { kind, token_ids: ids, target_slot, candidate_set, trimmed_events: first })
}

/// Block indices where trimming may stop, ascending; the last one drops the
/// whole history.
fn trim_points(prefix: &StoryPrefix) -> Vec<usize> {
    let n = prefix.blocks.len();
    let starts: Vec<usize> = (1..n).filter(|&i| prefix.blocks[i].opens_session).collect();
    let mut points = if prefix.blocks.iter().any(|b| b.opens_session) { starts } else { (1..n).collect() };
    points.push(n);
    points
}

pub fn candidates(kind: TaskKind, vocab: &Vocabulary) -> Vec<TokenId> {
    if kind.ranks_items() {
        vocab.item_token_ids().to_vec()
    } else {
        vocab.carousel_token_ids().to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub token_id: TokenId,
    pub logit: f64,
}

/// Candidates by descending logit, ties by ascending token id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList(pub Vec<Scored>);

impl RankedList {
    /// Ranks `candidates` by their entries in a full logit row.
    pub fn from_logits<T: Scalar>(logits: &[T], candidates: &[TokenId]) -> Result<Self> {
        let mut out = Vec::with_capacity(candidates.len());
        for &c in candidates {
            let logit = logits
                .get(c as usize)
                .ok_or_else(|| Error::invalid(format!("candidate token {c} is outside the vocabulary")))?;
            out.push(Scored { token_id: c, logit: logit.to_f64().unwrap_or(f64::NAN) });
        }
        Ok(Self::from_scores(out))
    }

    pub fn from_scores(mut scores: Vec<Scored>) -> Self {
        scores.sort_by(|a, b| b.logit.total_cmp(&a.logit).then(a.token_id.cmp(&b.token_id)));
        Self(scores)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based rank of `token`.
    pub fn rank_of(&self, token: TokenId) -> Option<usize> {
        self.0.iter().position(|s| s.token_id == token).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[Scored] {
        &self.0[..k.min(self.0.len())]
    }
}

/// Per-caller scoring state; counts model forward passes.
#[derive(Debug, Default)]
pub struct ScoringContext {
    forward_calls: Cell<u64>,
}

impl ScoringContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.get()
    }

    fn count(&self) {
        self.forward_calls.set(self.forward_calls.get() + 1);
    }
}

fn check_prompt<T: Scalar>(prompt: &TaskPrompt, model: &Model<T>) -> Result<()> {
    let cfg = model.config();
    if prompt.token_ids.is_empty() || prompt.target_slot + 1 != prompt.token_ids.len() {
        return Err(Error::invalid("the target slot must be the last prompt position"));
    }
    if prompt.token_ids.len() > cfg.context_length {
        return Err(Error::invalid(format!(
            "prompt of {} tokens exceeds the context of {}",
            prompt.token_ids.len(),
            cfg.context_length
        )));
    }
    if let Some(&c) = prompt.candidate_set.iter().find(|&&c| c as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!("candidate token {c} is outside the model vocabulary")));
    }
    Ok(())
}

/// Scores every candidate from a single forward pass.
pub fn rank<T: Scalar>(prompt: &TaskPrompt, model: &Model<T>, ctx: &ScoringContext) -> Result<RankedList> {
    check_prompt(prompt, model)?;
    ctx.count();
    let logits = model.forward_last(&prompt.token_ids)?;
    RankedList::from_logits(&logits, &prompt.candidate_set)
}

/// Ranks several prompts with one batched forward pass.
pub fn rank_batch<T: Scalar>(prompts: &[TaskPrompt], model: &Model<T>, ctx: &ScoringContext) -> Result<Vec<RankedList>> {
    for p in prompts {
        check_prompt(p, model)?;
    }
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    ctx.count();
    let seqs: Vec<&[TokenId]> = prompts.iter().map(|p| p.token_ids.as_slice()).collect();
    let rows = model.forward_batch(&seqs)?;
    rows.iter().zip(prompts).map(|(row, p)| RankedList::from_logits(row, &p.candidate_set)).collect()
}

fn default_top_k() -> usize {
    10
}

/// A ranking request (one JSON line).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub story: UserStory,
    pub task: TaskKind,
    /// Request time; defaults to the end of the story's last activity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub now: Option<i64>,
    /// Overrides the hour derived from `now`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hour: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<Surface>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carousel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl RankRequest {
    /// Builds the prompt for this request.
    pub fn prompt(&self, vocab: &Vocabulary, transform: &StoryTransform, context_length: usize) -> Result<TaskPrompt> {
        let now = match self.now {
            Some(t) => t,
            None => self
                .story
                .sessions
                .iter()
                .rev()
                .find(|s| !s.events.is_empty())
                .map(|s| s.end_time())
                .ok_or_else(|| Error::invalid("`now` is required for an empty story"))?,
        };
        let prefix = extend_transformed(&self.story, now, transform)?;
        let ctx = PromptContext {
            hour: self.hour.unwrap_or_else(|| hour_of_day(now)),
            surface: self.surface,
            carousel: self.carousel.clone(),
            query: self.query.clone(),
        };
        build_prompt(&prefix, self.task, &ctx, vocab, context_length)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub token_id: TokenId,
    pub token: String,
    pub logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub task: TaskKind,
    pub candidates: Vec<RankedCandidate>,
    pub model_step: u64,
    pub latency_us: u64,
}

impl RankResponse {
    pub fn new(req: &RankRequest, list: &RankedList, vocab: &Vocabulary, model_step: u64, latency_us: u64) -> Self {
        let candidates = list
            .top(req.top_k)
            .iter()
            .map(|s| RankedCandidate {
                token_id: s.token_id,
                token: vocab.surface_bytes(s.token_id).map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default(),
                logit: s.logit,
            })
            .collect();
        Self { id: req.id.clone(), task: req.task, candidates, model_step, latency_us }
    }
}

/// Per-request failure, answered in place of a response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankError {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub error: String,
    pub message: String,
}
