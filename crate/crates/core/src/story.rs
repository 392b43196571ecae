//! Typed user journeys: events, sessions and the attribute header.
//!
//! A session is the maximal run of events where no event starts more than one
//! hour after the previous activity ended, capped at twelve hours of span.
//! "Activity" includes watching: a watch at 03:10 lasting 87 minutes keeps the
//! session alive until 04:37.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_HOUR: i64 = 3600;
const SECONDS_PER_DAY: i64 = 86_400;

/// A gap strictly greater than this opens a new session.
pub const INACTIVITY_GAP_SECS: i64 = SECONDS_PER_HOUR;
/// No session spans more than this from its first to its last event.
pub const MAX_SESSION_SPAN_SECS: i64 = 12 * SECONDS_PER_HOUR;

/// Reserved item id for the unknown-item token.
pub const UNKNOWN_ITEM_ID: &str = "UNK";
/// Reserved carousel id for the carousel-mask token.
pub const MASK_CAROUSEL_ID: &str = "MASK";

pub fn hour_of_day(ts: i64) -> u8 {
    (ts.rem_euclid(SECONDS_PER_DAY) / SECONDS_PER_HOUR) as u8
}

/// ISO-style weekday in UTC, 0 = Monday.
pub fn day_of_week(ts: i64) -> u8 {
    // 1970-01-01 was a Thursday.
    ((ts.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7)) as u8
}

/// Whole hours between two instants, floored and clamped at zero.
pub fn elapsed_hours(from: i64, to: i64) -> u32 {
    (to - from).max(0).div_euclid(SECONDS_PER_HOUR) as u32
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub item_id: String,
    pub title: String,
}

impl ItemRef {
    pub fn new(item_id: impl Into<String>, title: impl Into<String>) -> Self {
        Self { item_id: item_id.into(), title: title.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CarouselRef {
    pub carousel_id: String,
}

impl CarouselRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self { carousel_id: id.into() }
    }

    /// The empty carousel used by search-surface watches.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.carousel_id.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    Home,
    Search,
    Browse,
    Autoplay,
}

impl Surface {
    pub const ALL: [Surface; 4] = [Surface::Home, Surface::Search, Surface::Browse, Surface::Autoplay];

    pub fn as_str(self) -> &'static str {
        match self {
            Surface::Home => "home",
            Surface::Search => "search",
            Surface::Browse => "browse",
            Surface::Autoplay => "autoplay",
        }
    }
}

impl fmt::Display for Surface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Surface {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Surface::ALL
            .into_iter()
            .find(|surface| surface.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown surface `{s}`")))
    }
}

/// A watch. `item` and `duration_minutes` are absent only in the
/// carousel-centred view, which strips item information.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchEvent {
    pub timestamp: i64,
    pub hour: u8,
    pub surface: Surface,
    #[serde(default)]
    pub carousel: CarouselRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_minutes: Option<u32>,
}

impl WatchEvent {
    pub fn new(timestamp: i64, surface: Surface, carousel: CarouselRef, item: ItemRef, duration_minutes: u32) -> Self {
        Self {
            timestamp,
            hour: hour_of_day(timestamp),
            surface,
            carousel,
            item: Some(item),
            duration_minutes: Some(duration_minutes),
        }
    }
}

/// One keystroke state of a search; `f`, `fo` and `fog` are three events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub timestamp: i64,
    pub hour: u8,
    pub query: String,
}

impl SearchEvent {
    pub fn new(timestamp: i64, query: impl Into<String>) -> Self {
        Self { timestamp, hour: hour_of_day(timestamp), query: query.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Event {
    Watch(WatchEvent),
    Search(SearchEvent),
}

impl Event {
    pub fn timestamp(&self) -> i64 {
        match self {
            Event::Watch(w) => w.timestamp,
            Event::Search(s) => s.timestamp,
        }
    }

    pub fn hour(&self) -> u8 {
        match self {
            Event::Watch(w) => w.hour,
            Event::Search(s) => s.hour,
        }
    }

    /// When the viewer was last active because of this event.
    pub fn activity_end(&self) -> i64 {
        match self {
            Event::Watch(w) => w.timestamp + i64::from(w.duration_minutes.unwrap_or(0)) * 60,
            Event::Search(s) => s.timestamp,
        }
    }

    pub fn as_watch(&self) -> Option<&WatchEvent> {
        match self {
            Event::Watch(w) => Some(w),
            Event::Search(_) => None,
        }
    }

    pub fn as_search(&self) -> Option<&SearchEvent> {
        match self {
            Event::Search(s) => Some(s),
            Event::Watch(_) => None,
        }
    }
}

/// The serialized `elapsed={E}h day={D}` fields of a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionClause {
    pub elapsed_hours: u32,
    pub day_of_week: u8,
}

/// A session. `clause` is `None` only for the single flattened session of a
/// story whose session structure was stripped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub start_time: i64,
    #[serde(flatten, default)]
    pub clause: Option<SessionClause>,
    pub events: Vec<Event>,
}

impl Session {
    /// Latest activity end in the session, or its start when empty.
    pub fn end_time(&self) -> i64 {
        self.events.iter().map(Event::activity_end).fold(self.start_time, i64::max)
    }

    pub fn last_event_time(&self) -> Option<i64> {
        self.events.last().map(Event::timestamp)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub key: String,
    pub value: String,
}

/// Ordered `key=value` pairs rendered ahead of the sessions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeHeader(pub Vec<Attribute>);

impl AttributeHeader {
    pub fn from_pairs<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        Self(pairs.into_iter().map(|(k, v)| Attribute { key: k.into(), value: v.into() }).collect())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|a| a.key == key).map(|a| a.value.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.0.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserStory {
    pub user_id: String,
    #[serde(default)]
    pub attributes: AttributeHeader,
    #[serde(default)]
    pub sessions: Vec<Session>,
}

impl UserStory {
    pub fn new(user_id: impl Into<String>, attributes: AttributeHeader, events: Vec<Event>) -> Result<Self> {
        let sessions = if events.is_empty() { Vec::new() } else { segment_sessions(events)? };
        Ok(Self { user_id: user_id.into(), attributes, sessions })
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.sessions.iter().flat_map(|s| s.events.iter())
    }

    pub fn event_count(&self) -> usize {
        self.sessions.iter().map(|s| s.events.len()).sum()
    }

    pub fn last_event_time(&self) -> Option<i64> {
        self.sessions.iter().rev().find_map(Session::last_event_time)
    }

    pub fn is_flat(&self) -> bool {
        self.sessions.iter().any(|s| s.clause.is_none())
    }
}

/// Reads the story interchange format: one JSON story per line.
pub fn read_stories(reader: impl BufRead) -> Result<Vec<UserStory>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let story = serde_json::from_str(&line).map_err(|e| Error::invalid(format!("story line {}: {e}", i + 1)))?;
        out.push(story);
    }
    Ok(out)
}

pub fn write_stories(mut writer: impl Write, stories: &[UserStory]) -> Result<()> {
    for story in stories {
        serde_json::to_writer(&mut writer, story)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Splits time-ordered events into sessions.
///
/// A new session starts when an event begins more than an hour after the
/// current session's last activity, or when including it would stretch the
/// session past twelve hours (the split happens before that event).
pub fn segment_sessions(events: Vec<Event>) -> Result<Vec<Session>> {
    if events.is_empty() {
        return Err(Error::invalid("segment_sessions requires at least one event"));
    }
    if let Some(i) = events.windows(2).position(|w| w[1].timestamp() < w[0].timestamp()) {
        return Err(Error::invalid(format!(
            "events not sorted by timestamp: index {} precedes index {}",
            i + 1,
            i
        )));
    }

    let mut sessions: Vec<Session> = Vec::new();
    let mut current: Option<Session> = None;
    let mut current_end = 0;
    let mut previous_end = None;

    for event in events {
        let ts = event.timestamp();
        let opens_new = match &current {
            None => true,
            Some(s) => ts - current_end > INACTIVITY_GAP_SECS || ts - s.start_time > MAX_SESSION_SPAN_SECS,
        };
        if opens_new {
            if let Some(done) = current.take() {
                previous_end = Some(done.end_time());
                sessions.push(done);
            }
            let clause = SessionClause {
                elapsed_hours: previous_end.map_or(0, |end| elapsed_hours(end, ts)),
                day_of_week: day_of_week(ts),
            };
            current = Some(Session { start_time: ts, clause: Some(clause), events: Vec::new() });
            current_end = ts;
        }
        current_end = current_end.max(event.activity_end());
        current.as_mut().expect("session opened above").events.push(event);
    }
    sessions.extend(current);
    Ok(sessions)
}

/// A violated story invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Path to the offending field, e.g. `sessions[1].events[3].carousel`.
    pub path: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.rule)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rule {
    EmptyItemId,
    ItemIdReservedChar,
    ReservedItemId,
    TitleReservedText,
    CarouselReservedChar,
    ReservedCarouselId,
    SearchSurfaceCarousel,
    InvalidQuery,
    InvalidAttributeKey,
    InvalidAttributeValue,
    DuplicateAttributeKey,
    ItemDurationMismatch,
    HourOutOfRange,
    DayOutOfRange,
    FlatSessionNotAlone,
    // Timing rules: not encoded in the text grammar.
    HourMismatch,
    EventsOutOfOrder,
    InactivityGap,
    SpanExceeded,
    StartTimeMismatch,
    SessionsOutOfOrder,
    SessionsShouldMerge,
    ElapsedMismatch,
    DayMismatch,
}

impl Rule {
    /// Timing rules concern absolute timestamps, which the grammar does not
    /// carry; every other rule concerns serialized fields.
    pub fn is_timing(&self) -> bool {
        matches!(
            self,
            Rule::HourMismatch
                | Rule::EventsOutOfOrder
                | Rule::InactivityGap
                | Rule::SpanExceeded
                | Rule::StartTimeMismatch
                | Rule::SessionsOutOfOrder
                | Rule::SessionsShouldMerge
                | Rule::ElapsedMismatch
                | Rule::DayMismatch
        )
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Rule::EmptyItemId => "item_id is empty",
            Rule::ItemIdReservedChar => "item_id contains `|`, `)`, a newline or a reserved delimiter",
            Rule::ReservedItemId => "item_id `UNK` is reserved for the unknown-item token",
            Rule::TitleReservedText => "title contains a newline, `|)`, `)|>` or a reserved delimiter",
            Rule::CarouselReservedChar => "carousel_id contains `(`, `)`, a newline or a reserved delimiter",
            Rule::ReservedCarouselId => "carousel_id `MASK` is reserved for the carousel-mask token",
            Rule::SearchSurfaceCarousel => "a watch from the search surface must have the empty carousel",
            Rule::InvalidQuery => "query is empty, has surrounding whitespace, a newline or a reserved delimiter",
            Rule::InvalidAttributeKey => "attribute key is empty or contains whitespace, `=` or a reserved delimiter",
            Rule::InvalidAttributeValue => "attribute value contains whitespace or a reserved delimiter",
            Rule::DuplicateAttributeKey => "attribute key repeated",
            Rule::ItemDurationMismatch => "item and duration must be both present or both absent",
            Rule::HourOutOfRange => "hour outside 0..=23",
            Rule::DayOutOfRange => "day_of_week outside 0..=6",
            Rule::FlatSessionNotAlone => "a session without a clause must be the only session",
            Rule::HourMismatch => "hour differs from the hour of day of the timestamp",
            Rule::EventsOutOfOrder => "event timestamp precedes the previous event",
            Rule::InactivityGap => "event starts more than one hour after the previous activity (1-hour rule)",
            Rule::SpanExceeded => "session spans more than twelve hours",
            Rule::StartTimeMismatch => "start_time differs from the first event timestamp",
            Rule::SessionsOutOfOrder => "session starts before the previous session",
            Rule::SessionsShouldMerge => "session starts within one hour of the previous one without a 12-hour cap",
            Rule::ElapsedMismatch => "elapsed_hours differs from whole hours since the previous session ended",
            Rule::DayMismatch => "day_of_week differs from the weekday of start_time",
        };
        f.write_str(msg)
    }
}

fn has_delimiter(s: &str) -> bool {
    s.contains("<|") || s.contains("|>") || s.contains('\n') || s.contains('\r')
}

pub(crate) fn item_id_ok(id: &str) -> Option<Rule> {
    if id.is_empty() {
        Some(Rule::EmptyItemId)
    } else if id.contains('|') || id.contains(')') || has_delimiter(id) {
        Some(Rule::ItemIdReservedChar)
    } else if id == UNKNOWN_ITEM_ID {
        Some(Rule::ReservedItemId)
    } else {
        None
    }
}

pub(crate) fn title_ok(title: &str) -> Option<Rule> {
    (title.contains("|)") || title.contains(")|>") || has_delimiter(title)).then_some(Rule::TitleReservedText)
}

pub(crate) fn carousel_id_ok(id: &str) -> Option<Rule> {
    if id.contains('(') || id.contains(')') || has_delimiter(id) {
        Some(Rule::CarouselReservedChar)
    } else if id == MASK_CAROUSEL_ID {
        Some(Rule::ReservedCarouselId)
    } else {
        None
    }
}

pub(crate) fn query_ok(query: &str) -> Option<Rule> {
    let bad = query.is_empty() || query.trim() != query || has_delimiter(query);
    bad.then_some(Rule::InvalidQuery)
}

fn attribute_key_ok(key: &str) -> bool {
    !key.is_empty() && !key.contains(char::is_whitespace) && !key.contains('=') && !has_delimiter(key)
}

fn attribute_value_ok(value: &str) -> bool {
    !value.contains(char::is_whitespace) && !has_delimiter(value)
}

/// Lists every violated invariant. Empty iff the story is well formed.
pub fn validate_story(story: &UserStory) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, rule: Rule| out.push(Violation { path, rule });

    let mut seen = HashSet::new();
    for (i, attr) in story.attributes.iter().enumerate() {
        if !attribute_key_ok(&attr.key) {
            push(format!("attributes[{i}].key"), Rule::InvalidAttributeKey);
        }
        if !attribute_value_ok(&attr.value) {
            push(format!("attributes[{i}].value"), Rule::InvalidAttributeValue);
        }
        if !seen.insert(attr.key.as_str()) {
            push(format!("attributes[{i}].key"), Rule::DuplicateAttributeKey);
        }
    }

    let n_sessions = story.sessions.len();
    let mut previous: Option<&Session> = None;
    for (si, session) in story.sessions.iter().enumerate() {
        let sp = format!("sessions[{si}]");
        match session.clause {
            None if n_sessions > 1 => push(format!("{sp}.clause"), Rule::FlatSessionNotAlone),
            None => {}
            Some(clause) => {
                if clause.day_of_week > 6 {
                    push(format!("{sp}.day_of_week"), Rule::DayOutOfRange);
                } else if clause.day_of_week != day_of_week(session.start_time) {
                    push(format!("{sp}.day_of_week"), Rule::DayMismatch);
                }
                let expected = previous.map_or(0, |p| elapsed_hours(p.end_time(), session.start_time));
                if clause.elapsed_hours != expected {
                    push(format!("{sp}.elapsed_hours"), Rule::ElapsedMismatch);
                }
            }
        }
        if let Some(prev) = previous {
            if session.start_time < prev.start_time {
                push(format!("{sp}.start_time"), Rule::SessionsOutOfOrder);
            } else if session.start_time - prev.end_time() <= INACTIVITY_GAP_SECS
                && session.start_time - prev.start_time <= MAX_SESSION_SPAN_SECS
            {
                push(format!("{sp}.start_time"), Rule::SessionsShouldMerge);
            }
        }
        if let Some(first) = session.events.first() {
            if first.timestamp() != session.start_time {
                push(format!("{sp}.start_time"), Rule::StartTimeMismatch);
            }
        }

        let mut activity_end = session.start_time;
        for (ei, event) in session.events.iter().enumerate() {
            let ep = format!("{sp}.events[{ei}]");
            let ts = event.timestamp();
            if event.hour() > 23 {
                push(format!("{ep}.hour"), Rule::HourOutOfRange);
            } else if event.hour() != hour_of_day(ts) {
                push(format!("{ep}.hour"), Rule::HourMismatch);
            }
            if ei > 0 {
                let prev_ts = session.events[ei - 1].timestamp();
                if ts < prev_ts {
                    push(format!("{ep}.timestamp"), Rule::EventsOutOfOrder);
                } else if ts - activity_end > INACTIVITY_GAP_SECS {
                    push(format!("{ep}.timestamp"), Rule::InactivityGap);
                }
            }
            if ts - session.start_time > MAX_SESSION_SPAN_SECS {
                push(format!("{ep}.timestamp"), Rule::SpanExceeded);
            }
            activity_end = activity_end.max(event.activity_end());

            match event {
                Event::Watch(w) => {
                    if let Some(rule) = carousel_id_ok(&w.carousel.carousel_id) {
                        push(format!("{ep}.carousel"), rule);
                    }
                    if w.surface == Surface::Search && !w.carousel.is_empty() {
                        push(format!("{ep}.carousel"), Rule::SearchSurfaceCarousel);
                    }
                    if let Some(item) = &w.item {
                        if let Some(rule) = item_id_ok(&item.item_id) {
                            push(format!("{ep}.item.item_id"), rule);
                        }
                        if let Some(rule) = title_ok(&item.title) {
                            push(format!("{ep}.item.title"), rule);
                        }
                    }
                    if w.item.is_some() != w.duration_minutes.is_some() {
                        push(format!("{ep}.duration_minutes"), Rule::ItemDurationMismatch);
                    }
                }
                Event::Search(s) => {
                    if let Some(rule) = query_ok(&s.query) {
                        push(format!("{ep}.query"), rule);
                    }
                }
            }
        }
        previous = Some(session);
    }
    out
}
