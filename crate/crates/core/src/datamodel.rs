//! Behavior-log ingestion and training-example construction.
//!
//! Catalog lines look like
//! `{"i":"i0001","leaf":"leaf3","cat":"cat0","brand":"b7","shop":"s12"}` and
//! event lines like `{"u":"u001","i":"i0001","t":1577836800,"e":"imp"}`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    #[serde(rename = "i")]
    pub item_id: String,
    #[serde(rename = "leaf")]
    pub leaf_category: String,
    #[serde(rename = "cat")]
    pub first_level_category: String,
    pub brand: String,
    pub shop: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventType {
    Impression,
    Click,
}

impl EventType {
    pub fn token(self) -> &'static str {
        match self {
            EventType::Impression => "imp",
            EventType::Click => "clk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub event_type: EventType,
}

#[derive(Serialize, Deserialize)]
struct EventRecord<'a> {
    u: std::borrow::Cow<'a, str>,
    i: std::borrow::Cow<'a, str>,
    t: i64,
    e: std::borrow::Cow<'a, str>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub user_id: String,
    pub anchor_time: i64,
    /// S⁺, ascending time.
    pub clicked_seq: Vec<String>,
    /// S⁻, ascending by latest impression time.
    pub unclicked_seq: Vec<String>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub label_k: usize,
    pub max_clicked_len: usize,
    pub max_unclicked_len: usize,
    pub unclicked_window_seconds: i64,
    pub min_exposures: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            label_k: 5,
            max_clicked_len: 50,
            max_unclicked_len: 100,
            unclicked_window_seconds: 3 * 24 * 3600,
            min_exposures: 2,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label_k == 0 || self.max_clicked_len == 0 {
            return Err(Error::Config(
                "label_k and max_clicked_len must be positive".into(),
            ));
        }
        if self.unclicked_window_seconds < 0 {
            return Err(Error::Config(
                "unclicked_window_seconds must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn nonblank_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(Error::from))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

/// Strips serde_json's own position suffix; we report the file line instead.
fn json_message(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.find(" at line ") {
        Some(pos) => msg[..pos].to_string(),
        None => msg,
    }
}

pub fn parse_catalog<R: BufRead>(reader: R) -> Result<Vec<ItemMeta>> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for line in nonblank_lines(reader) {
        let (line_no, text) = line?;
        let item: ItemMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            message: json_message(&e),
        })?;
        if item.item_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty item id".into(),
            });
        }
        if !seen.insert(item.item_id.clone()) {
            return Err(Error::DuplicateItem {
                line: line_no,
                item_id: item.item_id,
            });
        }
        items.push(item);
    }
    Ok(items)
}

/// Parses events and sorts them by `(user_id, timestamp)`; the sort is stable,
/// so equal timestamps keep file order.
pub fn parse_events<R: BufRead>(reader: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for line in nonblank_lines(reader) {
        let (line_no, text) = line?;
        let rec: EventRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            message: json_message(&e),
        })?;
        let event_type = match rec.e.as_ref() {
            "imp" => EventType::Impression,
            "clk" => EventType::Click,
            other => {
                return Err(Error::UnknownEventType {
                    line: line_no,
                    token: other.to_string(),
                })
            }
        };
        if rec.t < 0 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("negative timestamp {}", rec.t),
            });
        }
        events.push(Event {
            user_id: rec.u.into_owned(),
            item_id: rec.i.into_owned(),
            timestamp: rec.t,
            event_type,
        });
    }
    events.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then(a.timestamp.cmp(&b.timestamp))
    });
    Ok(events)
}

pub fn write_catalog<W: Write>(mut w: W, items: &[ItemMeta]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_events<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    for ev in events {
        let rec = EventRecord {
            u: ev.user_id.as_str().into(),
            i: ev.item_id.as_str().into(),
            t: ev.timestamp,
            e: ev.event_type.token().into(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups a `(user_id, timestamp)`-sorted event list into per-user slices.
fn per_user(events: &[Event]) -> Vec<&[Event]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].user_id != events[start].user_id {
            if i > start {
                out.push(&events[start..i]);
            }
            start = i;
        }
    }
    out
}

/// In-window exposure and click counts per item for one user.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct WindowCounts {
    pub exposures: usize,
    pub clicks: usize,
    pub last_impression: i64,
}

pub(crate) fn window_counts<'a>(
    events: &'a [Event],
    from: i64,
    until: i64,
) -> HashMap<&'a str, WindowCounts> {
    let lo = events.partition_point(|e| e.timestamp < from);
    let hi = events.partition_point(|e| e.timestamp < until);
    let mut counts: HashMap<&str, WindowCounts> = HashMap::new();
    for ev in &events[lo..hi] {
        let c = counts.entry(ev.item_id.as_str()).or_default();
        match ev.event_type {
            EventType::Impression => {
                c.exposures += 1;
                c.last_impression = c.last_impression.max(ev.timestamp);
            }
            EventType::Click => c.clicks += 1,
        }
    }
    counts
}

/// Builds sliding-anchor examples.
///
/// An anchor sits one second after each click that is followed by at least
/// `label_k` further clicks (and whose successor click is strictly later).
/// Events before the anchor form the history; the next `label_k` clicks are
/// the labels.
pub fn build_examples(events: &[Event], cfg: &SequenceConfig) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for user_events in per_user(events) {
        let clicks: Vec<&Event> = user_events
            .iter()
            .filter(|e| e.event_type == EventType::Click)
            .collect();
        if clicks.len() <= cfg.label_k {
            continue;
        }
        for idx in 0..clicks.len() - cfg.label_k {
            if clicks[idx + 1].timestamp <= clicks[idx].timestamp {
                continue;
            }
            let anchor = clicks[idx].timestamp + 1;
            let first = (idx + 1).saturating_sub(cfg.max_clicked_len);
            let clicked_seq = clicks[first..=idx]
                .iter()
                .map(|e| e.item_id.clone())
                .collect();
            let labels = clicks[idx + 1..=idx + cfg.label_k]
                .iter()
                .map(|e| e.item_id.clone())
                .collect();

            let counts = window_counts(user_events, anchor - cfg.unclicked_window_seconds, anchor);
            let mut unclicked: Vec<(i64, &str)> = counts
                .iter()
                .filter(|(_, c)| c.clicks == 0 && c.exposures >= cfg.min_exposures)
                .map(|(id, c)| (c.last_impression, *id))
                .collect();
            unclicked.sort_unstable();
            let skip = unclicked.len().saturating_sub(cfg.max_unclicked_len);
            let unclicked_seq = unclicked[skip..]
                .iter()
                .map(|(_, id)| id.to_string())
                .collect();

            out.push(TrainingExample {
                user_id: clicks[idx].user_id.clone(),
                anchor_time: anchor,
                clicked_seq,
                unclicked_seq,
                labels,
            });
        }
    }
    out
}

/// Per user, the latest `ceil(test_fraction * n)` examples become test cases.
pub fn split_temporal(examples: &[TrainingExample], test_fraction: f64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Precondition(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_user: Vec<(&str, Vec<&TrainingExample>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        let i = *slot.entry(ex.user_id.as_str()).or_insert_with(|| {
            by_user.push((ex.user_id.as_str(), Vec::new()));
            by_user.len() - 1
        });
        by_user[i].1.push(ex);
    }
    by_user.sort_by(|a, b| a.0.cmp(b.0));

    let mut split = DatasetSplit::default();
    for (_, mut exs) in by_user {
        exs.sort_by_key(|e| e.anchor_time);
        let n_test = (test_fraction * exs.len() as f64).ceil() as usize;
        let n_test = n_test.min(exs.len());
        let cut = exs.len() - n_test;
        split.train.extend(exs[..cut].iter().map(|e| (*e).clone()));
        split.test.extend(exs[cut..].iter().map(|e| (*e).clone()));
    }
    Ok(split)
}

/// Checks every example invariant, recounting the unclicked filter against
/// the raw events.
pub fn validate_examples(
    examples: &[TrainingExample],
    events: &[Event],
    cfg: &SequenceConfig,
) -> Result<()> {
    let users: HashMap<&str, &[Event]> = per_user(events)
        .into_iter()
        .map(|evs| (evs[0].user_id.as_str(), evs))
        .collect();
    for (n, ex) in examples.iter().enumerate() {
        let fail = |msg: String| Err(Error::Precondition(format!("example {n}: {msg}")));
        if ex.clicked_seq.is_empty() || ex.clicked_seq.len() > cfg.max_clicked_len {
            return fail(format!("clicked length {}", ex.clicked_seq.len()));
        }
        if ex.unclicked_seq.len() > cfg.max_unclicked_len {
            return fail(format!("unclicked length {}", ex.unclicked_seq.len()));
        }
        if ex.labels.is_empty() || ex.labels.len() > cfg.label_k {
            return fail(format!("label count {}", ex.labels.len()));
        }
        let Some(user_events) = users.get(ex.user_id.as_str()) else {
            return fail(format!("user {:?} has no events", ex.user_id));
        };
        let counts = window_counts(
            user_events,
            ex.anchor_time - cfg.unclicked_window_seconds,
            ex.anchor_time,
        );
        for item in &ex.unclicked_seq {
            match counts.get(item.as_str()) {
                Some(c) if c.clicks == 0 && c.exposures >= cfg.min_exposures => {}
                _ => return fail(format!("unclicked item {item:?} violates the window filter")),
            }
        }
        let clicks: Vec<&Event> = user_events
            .iter()
            .filter(|e| e.event_type == EventType::Click)
            .collect();
        let before = clicks.partition_point(|e| e.timestamp < ex.anchor_time);
        let history: Vec<&str> = clicks[..before]
            .iter()
            .rev()
            .take(ex.clicked_seq.len())
            .rev()
            .map(|e| e.item_id.as_str())
            .collect();
        if history != ex.clicked_seq.iter().map(String::as_str).collect::<Vec<_>>() {
            return fail("clicked sequence does not match the pre-anchor clicks".into());
        }
        let future: Vec<&str> = clicks[before..]
            .iter()
            .take(ex.labels.len())
            .map(|e| e.item_id.as_str())
            .collect();
        if future != ex.labels.iter().map(String::as_str).collect::<Vec<_>>() {
            return fail("labels do not match the post-anchor clicks".into());
        }
    }
    Ok(())
}
