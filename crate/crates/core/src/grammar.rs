//! The story token grammar: rendering, parsing and field-stripping views.
//!
//! ```text
//! story    := header? "<|begin_sessions|>" (" " clause | " " event)*
//! header   := pair (" " pair)* " "
//! pair     := key "=" value
//! clause   := "<|session|> elapsed=" N "h day=" D
//! event    := watch | search
//! watch    := "<|watch|> hour=" H " <|surface=" S "|>" "<|carousel(" C ")|>"
//!             ("<|id(" ID "|" TITLE ")|>" " " M "m")?
//! search   := "<|search|> hour=" H " " QUERY
//! ```
//!
//! One story is one line; fields are separated by single spaces.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::CatalogIndex;
use crate::error::{Error, Result};
use crate::story::{
    hour_of_day, item_id_ok, query_ok, title_ok, validate_story, AttributeHeader, CarouselRef, Event,
    ItemRef, SearchEvent, Session, SessionClause, Surface, UserStory, Violation, WatchEvent, MASK_CAROUSEL_ID,
    SECONDS_PER_HOUR,
};

pub const BEGIN_SESSIONS: &str = "<|begin_sessions|>";
pub const SESSION: &str = "<|session|>";
pub const WATCH: &str = "<|watch|>";
pub const SEARCH: &str = "<|search|>";
pub const MARKERS: [&str; 4] = [BEGIN_SESSIONS, SESSION, WATCH, SEARCH];
pub const CAROUSEL_MASK: &str = "<|carousel(MASK)|>";
pub const CAROUSEL_EMPTY: &str = "<|carousel()|>";
pub const ITEM_UNKNOWN: &str = "<|id(UNK)|>";

pub fn surface_token(surface: Surface) -> String {
    format!("<|surface={}|>", surface.as_str())
}

pub fn carousel_token(carousel: &CarouselRef) -> String {
    format!("<|carousel({})|>", carousel.carousel_id)
}

pub fn item_token(item: &ItemRef) -> String {
    format!("<|id({}|{})|>", item.item_id, item.title)
}

/// A serialized story: one line of grammar text.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StoryText(String);

impl StoryText {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for StoryText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for StoryText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Violations that affect the rendered text. Timing violations are not
/// representable in the grammar and do not block serialization: parsed
/// stories and stripped views carry reconstructed or thinned timestamps.
pub fn grammar_violations(story: &UserStory) -> Vec<Violation> {
    validate_story(story).into_iter().filter(|v| !v.rule.is_timing()).collect()
}

pub fn serialize(story: &UserStory) -> Result<StoryText> {
    let violations = grammar_violations(story);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut out = String::with_capacity(64 + story.event_count() * 64);
    render_story(story, &mut out);
    Ok(StoryText(out))
}

pub(crate) fn render_story(story: &UserStory, out: &mut String) {
    render_header(&story.attributes, out);
    out.push_str(BEGIN_SESSIONS);
    for session in &story.sessions {
        if let Some(clause) = session.clause {
            out.push(' ');
            render_clause(clause, out);
        }
        for event in &session.events {
            out.push(' ');
            render_event(event, out);
        }
    }
}

pub(crate) fn render_header(header: &AttributeHeader, out: &mut String) {
    for attr in header.iter() {
        out.push_str(&attr.key);
        out.push('=');
        out.push_str(&attr.value);
        out.push(' ');
    }
}

pub(crate) fn render_clause(clause: SessionClause, out: &mut String) {
    use fmt::Write;
    let _ = write!(out, "{SESSION} elapsed={}h day={}", clause.elapsed_hours, clause.day_of_week);
}

pub(crate) fn render_event(event: &Event, out: &mut String) {
    use fmt::Write;
    match event {
        Event::Watch(w) => {
            let _ = write!(out, "{WATCH} hour={} ", w.hour);
            out.push_str(&surface_token(w.surface));
            out.push_str(&carousel_token(&w.carousel));
            if let Some(item) = &w.item {
                out.push_str(&item_token(item));
            }
            if let Some(m) = w.duration_minutes {
                let _ = write!(out, " {m}m");
            }
        }
        Event::Search(s) => {
            let _ = write!(out, "{SEARCH} hour={} {}", s.hour, s.query);
        }
    }
}

/// Carousel slot of a watch in prompt text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CarouselSlot {
    Named(CarouselRef),
    Masked,
}

/// Item slot of a watch in prompt text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ItemSlot {
    Known(ItemRef),
    Unknown,
}

/// A trailing watch left open by a task head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenWatch {
    pub hour: u8,
    pub surface: Surface,
    pub carousel: Option<CarouselSlot>,
    pub item: Option<ItemSlot>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptParse {
    pub story: UserStory,
    pub open_watch: Option<OpenWatch>,
}

/// Parses story text. Timestamps are reconstructed from Unix time 0.
pub fn parse(text: &str, catalog: &CatalogIndex) -> Result<UserStory> {
    parse_at(text, catalog, 0)
}

/// Parses story text, reconstructing timestamps forward from `epoch`.
///
/// The text carries only hours, weekdays and floored session gaps, so the
/// reconstructed timestamps agree with the serialized fields but are not the
/// originals. Items found in `catalog` take the catalog title; unknown items
/// keep the embedded title.
pub fn parse_at(text: &str, catalog: &CatalogIndex, epoch: i64) -> Result<UserStory> {
    let raw = Parser { s: text, pos: 0, prompt: false }.story()?;
    let (story, open) = assemble(raw, catalog, epoch)?;
    debug_assert!(open.is_none());
    Ok(story)
}

/// Parses prompt text: like [`parse`], but the final watch may be an open
/// task head (missing carousel, item or duration, or using the mask and
/// unknown-item tokens).
pub fn parse_prompt(text: &str, catalog: &CatalogIndex) -> Result<PromptParse> {
    let raw = Parser { s: text, pos: 0, prompt: true }.story()?;
    let (story, open_watch) = assemble(raw, catalog, 0)?;
    Ok(PromptParse { story, open_watch })
}

struct RawStory {
    attributes: AttributeHeader,
    sessions: Vec<RawSession>,
}

struct RawSession {
    clause: Option<SessionClause>,
    events: Vec<RawEvent>,
}

enum RawEvent {
    Watch {
        hour: u8,
        surface: Surface,
        carousel: Option<CarouselSlot>,
        item: Option<ItemSlot>,
        duration: Option<u32>,
        open: bool,
    },
    Search { hour: u8, query: String },
}

struct Parser<'a> {
    s: &'a str,
    pos: usize,
    prompt: bool,
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos == self.s.len()
    }

    fn found(&self) -> String {
        if self.at_end() {
            return "found end of input".to_string();
        }
        let snippet: String = self.rest().chars().take(24).collect();
        format!("found `{snippet}`")
    }

    fn err(&self, expected: impl Into<String>) -> Error {
        Error::parse(self.pos, expected, self.found())
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(format!("`{lit}`")))
        }
    }

    fn number(&mut self, what: &str, max: u64) -> Result<u64> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 || digits > 10 {
            return Err(self.err(what.to_string()));
        }
        let value: u64 = self.rest()[..digits].parse().expect("ascii digits");
        if value > max {
            return Err(self.err(format!("{what} at most {max}")));
        }
        self.pos += digits;
        Ok(value)
    }

    /// Consumes text up to (not including) `delim`.
    fn until(&mut self, delim: &str, expected: &str) -> Result<&'a str> {
        match self.rest().find(delim) {
            Some(n) => {
                let out = &self.rest()[..n];
                self.pos += n;
                Ok(out)
            }
            None => Err(self.err(expected.to_string())),
        }
    }

    fn story(mut self) -> Result<RawStory> {
        let mut attrs = Vec::new();
        while !self.eat(BEGIN_SESSIONS) {
            if self.at_end() || self.rest().starts_with("<|") {
                return Err(self.err(format!("attribute `key=value` or `{BEGIN_SESSIONS}`")));
            }
            let start = self.pos;
            let word_len = self.rest().find(' ').unwrap_or(self.rest().len());
            let word = &self.rest()[..word_len];
            let Some((key, value)) = word.split_once('=') else {
                return Err(self.err("attribute `key=value`"));
            };
            if key.is_empty() || word.contains("<|") || word.contains("|>") {
                return Err(self.err("attribute `key=value`"));
            }
            if attrs.iter().any(|(k, _): &(String, String)| k == key) {
                return Err(Error::parse(start, "unique attribute key", format!("found repeated key `{key}`")));
            }
            attrs.push((key.to_string(), value.to_string()));
            self.pos += word_len;
            self.expect(" ")?;
        }
        let attributes = AttributeHeader::from_pairs(attrs);

        let mut sessions: Vec<RawSession> = Vec::new();
        let mut open_seen = false;
        while !self.at_end() {
            if open_seen {
                return Err(self.err("end of prompt after an open watch"));
            }
            self.expect(" ")?;
            let marker_at = self.pos;
            if self.eat(SESSION) {
                if sessions.iter().any(|s| s.clause.is_none()) {
                    return Err(Error::parse(marker_at, "no session clause in a flat story", self.found()));
                }
                self.expect(" elapsed=")?;
                let elapsed = self.number("elapsed hours", u64::from(u32::MAX))? as u32;
                self.expect("h day=")?;
                let day = self.number("day of week 0..=6", 6)? as u8;
                sessions.push(RawSession { clause: Some(SessionClause { elapsed_hours: elapsed, day_of_week: day }), events: Vec::new() });
                continue;
            }
            let event = if self.eat(WATCH) {
                let (event, open) = self.watch()?;
                open_seen = open;
                event
            } else if self.eat(SEARCH) {
                self.expect(" hour=")?;
                let hour = self.number("hour 0..=23", 23)? as u8;
                self.expect(" ")?;
                let query_at = self.pos;
                let query = match self.rest().find(" <|") {
                    Some(n) => &self.rest()[..n],
                    None => self.rest(),
                };
                if query_ok(query).is_some() {
                    return Err(Error::parse(query_at, "non-empty query without surrounding whitespace", self.found()));
                }
                self.pos += query.len();
                RawEvent::Search { hour, query: query.to_string() }
            } else {
                return Err(self.err(format!("`{SESSION}`, `{WATCH}` or `{SEARCH}`")));
            };
            if sessions.is_empty() {
                sessions.push(RawSession { clause: None, events: Vec::new() });
            }
            sessions.last_mut().expect("session present").events.push(event);
        }
        Ok(RawStory { attributes, sessions })
    }

    /// Parses the body of a watch after its marker. Returns whether the
    /// watch is an open prompt head.
    fn watch(&mut self) -> Result<(RawEvent, bool)> {
        self.expect(" hour=")?;
        let hour = self.number("hour 0..=23", 23)? as u8;
        self.expect(" ")?;
        let surface_at = self.pos;
        self.expect("<|surface=")?;
        let name = self.until("|>", "`|>` closing the surface")?;
        let surface: Surface = name
            .parse()
            .map_err(|_| Error::parse(surface_at, "known surface (home, search, browse, autoplay)", format!("unknown surface `{name}`")))?;
        self.pos += 2;

        let mut open = false;
        let carousel = if self.rest().starts_with("<|carousel(") {
            let at = self.pos;
            self.pos += "<|carousel(".len();
            let id = self.until(")|>", "`)|>` closing the carousel")?;
            self.pos += 3;
            if id == MASK_CAROUSEL_ID {
                if !self.prompt {
                    return Err(Error::parse(at, "a concrete carousel", "found the mask token outside a prompt"));
                }
                open = true;
                Some(CarouselSlot::Masked)
            } else {
                if id.contains('(') || id.contains(')') {
                    return Err(Error::parse(at, "carousel id without parentheses", format!("found `{id}`")));
                }
                Some(CarouselSlot::Named(CarouselRef::new(id)))
            }
        } else if self.prompt && self.at_end() {
            open = true;
            None
        } else {
            return Err(self.err("`<|carousel(`"));
        };

        if surface == Surface::Search && matches!(&carousel, Some(CarouselSlot::Named(c)) if !c.is_empty()) {
            return Err(Error::parse(surface_at, "the empty carousel after the search surface", self.found()));
        }

        let item = if self.rest().starts_with("<|id(") {
            let at = self.pos;
            if self.eat(ITEM_UNKNOWN) {
                if !self.prompt {
                    return Err(Error::parse(at, "a catalog item", "found the unknown-item token outside a prompt"));
                }
                open = true;
                Some(ItemSlot::Unknown)
            } else {
                self.pos += "<|id(".len();
                let id = self.until("|", "`|` after the item id")?;
                if let Some(rule) = item_id_ok(id) {
                    return Err(Error::parse(at, "valid item id", format!("{rule}")));
                }
                self.pos += 1;
                let title = self.until(")|>", "`)|>` closing the item")?;
                if title_ok(title).is_some() {
                    return Err(Error::parse(at, "valid item title", format!("found `{title}`")));
                }
                self.pos += 3;
                Some(ItemSlot::Known(ItemRef::new(id, title)))
            }
        } else {
            None
        };

        let duration = if item.is_some() && self.rest().starts_with(' ') && self.rest()[1..].starts_with(|c: char| c.is_ascii_digit()) {
            self.pos += 1;
            let m = self.number("duration minutes", u64::from(u32::MAX))? as u32;
            self.expect("m")?;
            Some(m)
        } else {
            None
        };

        if item.is_some() && duration.is_none() {
            if self.prompt && self.at_end() {
                open = true;
            } else {
                return Err(self.err("` {minutes}m` after the item"));
            }
        }
        if open && !self.at_end() {
            return Err(self.err("end of prompt after an open watch"));
        }
        if !self.at_end() && !self.rest().starts_with(" <|") {
            return Err(self.err("` <|` starting the next clause"));
        }
        if self.prompt && self.at_end() && item.is_none() && !open {
            // `<|carousel(x)|>` at the end of a prompt is a carousel-task head
            open = true;
        }
        Ok((RawEvent::Watch { hour, surface, carousel, item, duration, open }, open))
    }
}

/// Smallest instant at or after `t` whose hour of day is `hour`.
fn next_with_hour(t: i64, hour: u8) -> i64 {
    if hour_of_day(t) == hour {
        return t;
    }
    let day_start = t - t.rem_euclid(86_400);
    let candidate = day_start + i64::from(hour) * SECONDS_PER_HOUR;
    if candidate > t {
        candidate
    } else {
        candidate + 86_400
    }
}

fn assemble(raw: RawStory, catalog: &CatalogIndex, epoch: i64) -> Result<(UserStory, Option<OpenWatch>)> {
    let mut sessions = Vec::with_capacity(raw.sessions.len());
    let mut open_watch = None;
    let mut cursor = epoch;
    let mut prev_end: Option<i64> = None;

    for rs in raw.sessions {
        let start_min = match (prev_end, rs.clause) {
            (Some(end), Some(c)) => end + i64::from(c.elapsed_hours) * SECONDS_PER_HOUR,
            _ => cursor,
        };
        cursor = start_min.max(cursor);
        let mut events = Vec::with_capacity(rs.events.len());
        for event in rs.events {
            match event {
                RawEvent::Search { hour, query } => {
                    cursor = next_with_hour(cursor, hour);
                    events.push(Event::Search(SearchEvent { timestamp: cursor, hour, query }));
                }
                RawEvent::Watch { hour, surface, carousel, item, duration, open } => {
                    cursor = next_with_hour(cursor, hour);
                    let item = item.map(|slot| match slot {
                        ItemSlot::Known(item) => ItemSlot::Known(canonical(item, catalog)),
                        other => other,
                    });
                    match (open, carousel, item) {
                        (false, Some(CarouselSlot::Named(carousel)), item) => {
                            let item = match item {
                                Some(ItemSlot::Known(item)) => Some(item),
                                None => None,
                                Some(ItemSlot::Unknown) => unreachable!("unknown items only appear in open heads"),
                            };
                            let w = WatchEvent { timestamp: cursor, hour, surface, carousel, item, duration_minutes: duration };
                            cursor += i64::from(duration.unwrap_or(0)) * 60;
                            events.push(Event::Watch(w));
                        }
                        (_, carousel, item) => open_watch = Some(OpenWatch { hour, surface, carousel, item }),
                    }
                }
            }
        }
        let start_time = events.first().map_or(start_min, Event::timestamp);
        let session = Session { start_time, clause: rs.clause, events };
        prev_end = Some(session.end_time());
        cursor = cursor.max(session.end_time());
        sessions.push(session);
    }
    let story = UserStory { user_id: String::new(), attributes: raw.attributes, sessions };
    Ok((story, open_watch))
}

fn canonical(item: ItemRef, catalog: &CatalogIndex) -> ItemRef {
    match catalog.item(&item.item_id) {
        Some(entry) => entry.item_ref(),
        None => item,
    }
}

/// Task-specific story views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Watches only, carousels blanked, surfaces kept.
    Item,
    /// Watches only, item and duration removed.
    Carousel,
    /// Searches plus watches from the search surface.
    Search,
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" => Ok(View::Item),
            "carousel" => Ok(View::Carousel),
            "search" => Ok(View::Search),
            other => Err(Error::config(format!("unknown view `{other}` (expected item, carousel or search)"))),
        }
    }
}

pub fn strip_view(story: &UserStory, view: View) -> UserStory {
    let mut out = story.clone();
    for session in &mut out.sessions {
        session.events.retain(|e| match (view, e) {
            (View::Item | View::Carousel, Event::Search(_)) => false,
            (View::Search, Event::Watch(w)) => w.surface == Surface::Search,
            _ => true,
        });
        for event in &mut session.events {
            if let Event::Watch(w) = event {
                match view {
                    View::Item => w.carousel = CarouselRef::none(),
                    View::Carousel => {
                        w.item = None;
                        w.duration_minutes = None;
                    }
                    View::Search => {}
                }
            }
        }
    }
    out
}

/// Flattens all sessions into one clause-less session.
pub fn strip_sessions(story: &UserStory) -> UserStory {
    let Some(first) = story.sessions.first() else {
        return story.clone();
    };
    let flat = Session {
        start_time: first.start_time,
        clause: None,
        events: story.sessions.iter().flat_map(|s| s.events.iter().cloned()).collect(),
    };
    UserStory { user_id: story.user_id.clone(), attributes: story.attributes.clone(), sessions: vec![flat] }
}

/// Header keys describing where the viewer is.
pub const LOCATION_KEYS: &[&str] = &["country", "region", "city", "dma", "timezone", "zip"];
/// Header keys describing the viewer or their device.
pub const PROFILE_KEYS: &[&str] = &["age_bucket", "gender", "device", "platform", "language", "tenure"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeSubset {
    All,
    Profile,
    Location,
}

impl FromStr for AttributeSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AttributeSubset::All),
            "profile" => Ok(AttributeSubset::Profile),
            "location" => Ok(AttributeSubset::Location),
            other => Err(Error::config(format!("unknown attribute subset `{other}` (expected all, profile or location)"))),
        }
    }
}

pub fn strip_attributes(story: &UserStory, which: AttributeSubset) -> UserStory {
    let mut out = story.clone();
    out.attributes.0.retain(|a| match which {
        AttributeSubset::All => false,
        AttributeSubset::Profile => !PROFILE_KEYS.contains(&a.key.as_str()),
        AttributeSubset::Location => !LOCATION_KEYS.contains(&a.key.as_str()),
    });
    out
}

/// A composition of the stripping operations, applied in the order
/// attributes, view, sessions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StoryTransform {
    #[serde(default)]
    pub view: Option<View>,
    #[serde(default)]
    pub strip_sessions: bool,
    #[serde(default)]
    pub strip_attributes: Option<AttributeSubset>,
}

impl StoryTransform {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, story: &UserStory) -> UserStory {
        let mut out = match self.strip_attributes {
            Some(which) => strip_attributes(story, which),
            None => story.clone(),
        };
        if let Some(view) = self.view {
            out = strip_view(&out, view);
        }
        if self.strip_sessions {
            out = strip_sessions(&out);
        }
        out
    }

    /// Short label used for method names in reports.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(view) = self.view {
            parts.push(format!("{}_view", serde_plain(view)));
        }
        if self.strip_sessions {
            parts.push("no_session".to_string());
        }
        if let Some(which) = self.strip_attributes {
            parts.push(format!("excl_{}", serde_plain(which)));
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

fn serde_plain<T: Serialize>(value: T) -> String {
    serde_json::to_value(value).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

impl StoryText {
    fn through_story(&self, f: impl FnOnce(&UserStory) -> UserStory) -> Result<StoryText> {
        let story = parse(self.as_str(), &CatalogIndex::default())?;
        let mut out = String::with_capacity(self.0.len());
        render_story(&f(&story), &mut out);
        Ok(StoryText(out))
    }

    pub fn strip_view(&self, view: View) -> Result<StoryText> {
        self.through_story(|s| strip_view(s, view))
    }

    pub fn strip_sessions(&self) -> Result<StoryText> {
        self.through_story(strip_sessions)
    }

    pub fn strip_attributes(&self, which: AttributeSubset) -> Result<StoryText> {
        self.through_story(|s| strip_attributes(s, which))
    }
}

/// The serialized content of an event, without timestamps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventFields {
    Watch { hour: u8, surface: Surface, carousel: CarouselRef, item: Option<ItemRef>, duration_minutes: Option<u32> },
    Search { hour: u8, query: String },
}

/// Everything a story contributes to its text. Two stories with equal
/// fields serialize identically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoryFields {
    pub attributes: AttributeHeader,
    pub sessions: Vec<(Option<SessionClause>, Vec<EventFields>)>,
}

pub fn story_fields(story: &UserStory) -> StoryFields {
    let sessions = story
        .sessions
        .iter()
        .map(|s| {
            let events = s
                .events
                .iter()
                .map(|e| match e {
                    Event::Watch(w) => EventFields::Watch {
                        hour: w.hour,
                        surface: w.surface,
                        carousel: w.carousel.clone(),
                        item: w.item.clone(),
                        duration_minutes: w.duration_minutes,
                    },
                    Event::Search(q) => EventFields::Search { hour: q.hour, query: q.query.clone() },
                })
                .collect();
            (s.clause, events)
        })
        .collect();
    StoryFields { attributes: story.attributes.clone(), sessions }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::story::{segment_sessions, validate_story};

    // Sunday 2024-01-07 00:00:00 UTC (day=6).
    pub(crate) const SUNDAY: i64 = 1_704_585_600;

    pub(crate) fn sample_story() -> UserStory {
        let lantern = ItemRef::new("SYN201", "The Lantern at Exit 13");
        let motel = ItemRef::new("SYN202", "Violet Static Motel");
        let h = |hour: i64, min: i64| SUNDAY + hour * 3600 + min * 60;
        let events = vec![
            Event::Search(SearchEvent::new(h(3, 0), "lan")),
            Event::Search(SearchEvent::new(h(3, 1), "lantern")),
            Event::Watch(WatchEvent::new(h(3, 2), Surface::Search, CarouselRef::none(), lantern.clone(), 87)),
            Event::Watch(WatchEvent::new(h(5, 0), Surface::Home, CarouselRef::new("after_dark_detours"), motel, 50)),
            Event::Watch(WatchEvent::new(h(22, 0), Surface::Home, CarouselRef::new("rainy_night_rewinds"), lantern, 27)),
        ];
        let sessions = segment_sessions(events).unwrap();
        UserStory {
            user_id: "viewer-1".into(),
            attributes: AttributeHeader::from_pairs([("country", "US"), ("device", "tv")]),
            sessions,
        }
    }

    pub(crate) fn sample_catalog() -> CatalogIndex {
        use crate::catalog::{CatalogCarousel, CatalogItem};
        let item = |id: &str, title: &str| CatalogItem { item_id: id.into(), title: title.into(), genre: None };
        let row = |id: &str, name: &str| CatalogCarousel { carousel_id: id.into(), name: name.into() };
        CatalogIndex::new(
            vec![item("SYN201", "The Lantern at Exit 13"), item("SYN202", "Violet Static Motel")],
            vec![row("after_dark_detours", "After Dark Detours"), row("rainy_night_rewinds", "Rainy Night Rewinds")],
        )
        .unwrap()
    }

    const SAMPLE_TEXT: &str = "country=US device=tv <|begin_sessions|> <|session|> elapsed=0h day=6 \
<|search|> hour=3 lan <|search|> hour=3 lantern \
<|watch|> hour=3 <|surface=search|><|carousel()|><|id(SYN201|The Lantern at Exit 13)|> 87m \
<|watch|> hour=5 <|surface=home|><|carousel(after_dark_detours)|><|id(SYN202|Violet Static Motel)|> 50m \
<|session|> elapsed=16h day=6 \
<|watch|> hour=22 <|surface=home|><|carousel(rainy_night_rewinds)|><|id(SYN201|The Lantern at Exit 13)|> 27m";

    #[test]
    fn sample_story_serializes_to_the_reference_text() {
        let story = sample_story();
        assert!(validate_story(&story).is_empty());
        assert_eq!(serialize(&story).unwrap().as_str(), SAMPLE_TEXT);
    }

    #[test]
    fn watch_clause_surface_form() {
        let text = serialize(&sample_story()).unwrap();
        assert!(text
            .as_str()
            .contains("<|watch|> hour=3 <|surface=search|><|carousel()|><|id(SYN201|The Lantern at Exit 13)|> 87m"));
        assert!(text.as_str().contains("<|search|> hour=3 lan <|search|> hour=3 lantern"));
    }

    #[test]
    fn zero_sessions_is_header_and_marker() {
        let story = UserStory {
            user_id: "u".into(),
            attributes: AttributeHeader::from_pairs([("country", "US")]),
            sessions: vec![],
        };
        assert_eq!(serialize(&story).unwrap().as_str(), "country=US <|begin_sessions|>");
        let empty = UserStory { user_id: "u".into(), attributes: AttributeHeader::default(), sessions: vec![] };
        assert_eq!(serialize(&empty).unwrap().as_str(), BEGIN_SESSIONS);
    }

    #[test]
    fn serialize_rejects_grammar_violations() {
        let mut story = sample_story();
        if let Event::Watch(w) = &mut story.sessions[0].events[2] {
            w.carousel = CarouselRef::new("after_dark");
        }
        assert!(matches!(serialize(&story), Err(Error::Validation(v)) if v.len() == 1));
    }

    fn fields_equal(a: &UserStory, b: &UserStory) -> bool {
        story_fields(a) == story_fields(b)
    }

    #[test]
    fn figure_roundtrip() {
        let story = sample_story();
        let text = serialize(&story).unwrap();
        let back = parse(text.as_str(), &CatalogIndex::default()).unwrap();
        assert!(fields_equal(&story, &back));
        assert_eq!(serialize(&back).unwrap(), text);
        // reconstructed timestamps agree with the serialized hours
        assert!(validate_story(&back).iter().all(|v| v.rule != crate::story::Rule::HourMismatch));
    }

    #[test]
    fn unknown_surface_reports_its_offset() {
        let text = SAMPLE_TEXT.replacen("<|surface=home|>", "<|surface=kiosk|>", 1);
        let offset = text.find("<|surface=kiosk|>").unwrap();
        match parse(&text, &CatalogIndex::default()) {
            Err(Error::Parse { offset: at, found, .. }) => {
                assert_eq!(at, offset);
                assert!(found.contains("unknown surface"), "{found}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_report_the_earliest_offset() {
        let cases = [
            ("<|begin_sessions|> <|watch|> hour=24 <|surface=home|>", 34),
            ("<|begin_sessions|>  <|session|>", 19),
            ("<|begin_sessions|> <|session|> elapsed=1h day=7", 46),
            ("country US <|begin_sessions|>", 0),
            ("<|begin_sessions|> <|bogus|>", 19),
            ("<|begin_sessions|> <|watch|> hour=3 <|surface=home|><|carousel(x)|><|id(A|T)|>", 78),
        ];
        for (text, expected) in cases {
            match parse(text, &CatalogIndex::default()) {
                Err(Error::Parse { offset, .. }) => assert_eq!(offset, expected, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn catalog_supplies_canonical_titles() {
        let catalog = CatalogIndex::new(
            vec![crate::catalog::CatalogItem { item_id: "SYN201".into(), title: "New Title".into(), genre: None }],
            vec![],
        )
        .unwrap();
        let story = parse(SAMPLE_TEXT, &catalog).unwrap();
        let titles: Vec<_> = story
            .events()
            .filter_map(|e| e.as_watch().and_then(|w| w.item.as_ref()).map(|i| i.title.clone()))
            .collect();
        assert_eq!(titles, vec!["New Title", "Violet Static Motel", "New Title"]);
    }

    #[test]
    fn search_view_on_sample_story() {
        let view = strip_view(&sample_story(), View::Search);
        let text = serialize(&view).unwrap();
        assert_eq!(
            text.as_str(),
            "country=US device=tv <|begin_sessions|> <|session|> elapsed=0h day=6 \
<|search|> hour=3 lan <|search|> hour=3 lantern \
<|watch|> hour=3 <|surface=search|><|carousel()|><|id(SYN201|The Lantern at Exit 13)|> 87m \
<|session|> elapsed=16h day=6"
        );
    }

    #[test]
    fn item_view_blanks_carousels_and_drops_searches() {
        let view = strip_view(&sample_story(), View::Item);
        let text = serialize(&view).unwrap();
        assert!(!text.as_str().contains(SEARCH));
        assert!(!text.as_str().contains("after_dark_detours"));
        assert_eq!(text.as_str().matches("<|carousel()|>").count(), 3);
        assert!(text.as_str().contains("<|surface=home|><|carousel()|><|id(SYN202"));
    }

    #[test]
    fn carousel_view_drops_items_and_durations() {
        let view = strip_view(&sample_story(), View::Carousel);
        let text = serialize(&view).unwrap();
        assert!(!text.as_str().contains("<|id("));
        assert!(!text.as_str().contains("87m"));
        assert!(text.as_str().ends_with("<|watch|> hour=22 <|surface=home|><|carousel(rainy_night_rewinds)|>"));
        let back = parse(text.as_str(), &CatalogIndex::default()).unwrap();
        assert!(fields_equal(&view, &back));
    }

    #[test]
    fn session_strip_flattens() {
        let flat = strip_sessions(&sample_story());
        let text = serialize(&flat).unwrap();
        assert!(!text.as_str().contains(SESSION));
        assert!(text.as_str().starts_with("country=US device=tv <|begin_sessions|> <|search|> hour=3 lan"));
        let back = parse(text.as_str(), &CatalogIndex::default()).unwrap();
        assert!(fields_equal(&flat, &back));
        let empty = UserStory { user_id: "u".into(), attributes: AttributeHeader::default(), sessions: vec![] };
        assert_eq!(strip_sessions(&empty), empty);
    }

    #[test]
    fn attribute_subsets() {
        let story = sample_story();
        assert!(strip_attributes(&story, AttributeSubset::All).attributes.is_empty());
        let loc = strip_attributes(&story, AttributeSubset::Location);
        assert_eq!(loc.attributes, AttributeHeader::from_pairs([("device", "tv")]));
        let prof = strip_attributes(&story, AttributeSubset::Profile);
        assert_eq!(prof.attributes, AttributeHeader::from_pairs([("country", "US")]));
        assert!("everything".parse::<AttributeSubset>().is_err());
        let text = serialize(&strip_attributes(&story, AttributeSubset::All)).unwrap();
        assert!(text.as_str().starts_with(BEGIN_SESSIONS));
    }

    #[test]
    fn text_level_views_match_story_level() {
        let story = sample_story();
        let text = serialize(&story).unwrap();
        for view in [View::Item, View::Carousel, View::Search] {
            assert_eq!(text.strip_view(view).unwrap(), serialize(&strip_view(&story, view)).unwrap());
        }
        assert_eq!(text.strip_sessions().unwrap(), serialize(&strip_sessions(&story)).unwrap());
    }

    #[test]
    fn prompt_mode_accepts_open_heads() {
        let base = "<|begin_sessions|> <|session|> elapsed=0h day=6";
        let masked = format!("{base} <|watch|> hour=3 <|surface=home|><|carousel(MASK)|>");
        let p = parse_prompt(&masked, &CatalogIndex::default()).unwrap();
        assert_eq!(p.open_watch.unwrap().carousel, Some(CarouselSlot::Masked));
        assert!(parse(&masked, &CatalogIndex::default()).is_err());

        let carousel_head = format!("{base} <|watch|> hour=3 <|surface=home|>");
        let p = parse_prompt(&carousel_head, &CatalogIndex::default()).unwrap();
        assert_eq!(p.open_watch.unwrap().carousel, None);

        let with_item = format!("{masked}<|id(SYN1|Fog)|>");
        let p = parse_prompt(&with_item, &CatalogIndex::default()).unwrap();
        assert_eq!(p.open_watch.unwrap().item, Some(ItemSlot::Known(ItemRef::new("SYN1", "Fog"))));

        let with_carousel = format!("{carousel_head}<|carousel(coastal)|>");
        let p = parse_prompt(&with_carousel, &CatalogIndex::default()).unwrap();
        assert_eq!(p.open_watch.unwrap().carousel, Some(CarouselSlot::Named(CarouselRef::new("coastal"))));
        assert!(p.story.sessions[0].events.is_empty());
    }
}
