//! Interaction events and reading-session reconstruction.
//!
//! Tracked pages post batches of `{"cid","ts","k","p"}` objects. Events are
//! validated, logged, and later folded into per-second reading sessions:
//! a session starts at every `open`, ends at `close` or after
//! [`SESSION_TIMEOUT_MS`] of silence, and is resampled onto a 1 Hz grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{CampaignId, RecipientId, SectionId};
use crate::error::{Error, Result};

pub const SESSION_TIMEOUT_MS: i64 = 30 * 60 * 1000;
/// Longest gap over which the previous sample is carried forward.
pub const CARRY_FORWARD_MS: i64 = 5_000;
/// Seconds without interaction before the page asks whether the reader
/// is still there.
pub const IDLE_AFTER_MS: i64 = 60_000;
pub const MAX_COMMENT_CHARS: usize = 5_000;
pub const MAX_BATCH_EVENTS: usize = 500;

/// Section geometry in document pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionBox {
    pub id: SectionId,
    pub top: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSnapshot {
    pub sections: Vec<SectionBox>,
    pub doc_height: f64,
    pub vw: f64,
    pub vh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePayload {
    pub scroll_y: f64,
    pub vw: f64,
    pub vh: f64,
    pub mouse_x: f64,
    pub mouse_y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Open,
    Layout(LayoutSnapshot),
    Sample(SamplePayload),
    Scroll {
        y: Option<f64>,
    },
    /// Pointer position in viewport pixels, when the client reports it.
    MouseMove {
        x: Option<f64>,
        y: Option<f64>,
    },
    Click {
        section_id: SectionId,
        url: String,
    },
    Visible,
    Hidden,
    IdlePrompt,
    IdleConfirm,
    IdleEnd,
    RelevanceOn {
        section_id: SectionId,
    },
    RelevanceOff {
        section_id: SectionId,
    },
    Comment {
        section_id: SectionId,
        text: String,
    },
    /// Comment posted by the communicator or a share-link client.
    SenderComment {
        section_id: SectionId,
        text: String,
        pinned: bool,
    },
    Close,
}

#[derive(Deserialize)]
struct ScrollP {
    y: Option<f64>,
}

#[derive(Deserialize)]
struct MouseP {
    x: Option<f64>,
    y: Option<f64>,
}

#[derive(Deserialize)]
struct SectionP {
    section_id: SectionId,
}

#[derive(Deserialize)]
struct ClickP {
    section_id: SectionId,
    #[serde(default)]
    url: String,
}

#[derive(Deserialize)]
struct CommentP {
    section_id: SectionId,
    text: String,
}

#[derive(Deserialize)]
struct SenderCommentP {
    section_id: SectionId,
    text: String,
    #[serde(default)]
    pinned: bool,
}

fn payload<T: for<'de> Deserialize<'de>>(kind: &str, p: Value) -> Result<T> {
    let p = if p.is_null() { json!({}) } else { p };
    serde_json::from_value(p).map_err(|e| Error::Validation(format!("bad `{kind}` payload: {e}")))
}

impl EventKind {
    pub fn wire_name(&self) -> &'static str {
        match self {
            EventKind::Open => "open",
            EventKind::Layout(_) => "layout",
            EventKind::Sample(_) => "sample",
            EventKind::Scroll { .. } => "scroll",
            EventKind::MouseMove { .. } => "mouse_move",
            EventKind::Click { .. } => "click",
            EventKind::Visible => "visible",
            EventKind::Hidden => "hidden",
            EventKind::IdlePrompt => "idle_prompt",
            EventKind::IdleConfirm => "idle_confirm",
            EventKind::IdleEnd => "idle_end",
            EventKind::RelevanceOn { .. } => "relevance_on",
            EventKind::RelevanceOff { .. } => "relevance_off",
            EventKind::Comment { .. } => "comment",
            EventKind::SenderComment { .. } => "sender_comment",
            EventKind::Close => "close",
        }
    }

    pub fn from_wire(k: &str, p: Value) -> Result<Self> {
        Ok(match k {
            "open" => EventKind::Open,
            "layout" => EventKind::Layout(payload(k, p)?),
            "sample" => EventKind::Sample(payload(k, p)?),
            "scroll" => {
                let ScrollP { y } = payload(k, p)?;
                EventKind::Scroll { y }
            }
            "mouse_move" => {
                let MouseP { x, y } = payload(k, p)?;
                EventKind::MouseMove { x, y }
            }
            "click" => {
                let ClickP { section_id, url } = payload(k, p)?;
                EventKind::Click { section_id, url }
            }
            "visible" => EventKind::Visible,
            "hidden" => EventKind::Hidden,
            "idle_prompt" => EventKind::IdlePrompt,
            "idle_confirm" => EventKind::IdleConfirm,
            "idle_end" => EventKind::IdleEnd,
            "relevance_on" => EventKind::RelevanceOn { section_id: payload::<SectionP>(k, p)?.section_id },
            "relevance_off" => EventKind::RelevanceOff { section_id: payload::<SectionP>(k, p)?.section_id },
            "comment" => {
                let CommentP { section_id, text } = payload(k, p)?;
                EventKind::Comment { section_id, text }
            }
            "sender_comment" => {
                let SenderCommentP { section_id, text, pinned } = payload(k, p)?;
                EventKind::SenderComment { section_id, text, pinned }
            }
            "close" => EventKind::Close,
            other => return Err(Error::Validation(format!("unknown event kind {other:?}"))),
        })
    }

    pub fn wire_payload(&self) -> Value {
        match self {
            EventKind::Layout(l) => serde_json::to_value(l).expect("layout serializes"),
            EventKind::Sample(s) => serde_json::to_value(s).expect("sample serializes"),
            EventKind::Scroll { y } => json!({ "y": y }),
            EventKind::MouseMove { x, y } => json!({ "x": x, "y": y }),
            EventKind::Click { section_id, url } => json!({ "section_id": section_id, "url": url }),
            EventKind::RelevanceOn { section_id } | EventKind::RelevanceOff { section_id } => {
                json!({ "section_id": section_id })
            }
            EventKind::Comment { section_id, text } => json!({ "section_id": section_id, "text": text }),
            EventKind::SenderComment { section_id, text, pinned } => {
                json!({ "section_id": section_id, "text": text, "pinned": pinned })
            }
            _ => json!({}),
        }
    }

    /// Kinds that only tracked pages may send through the events endpoint.
    pub fn is_client_kind(&self) -> bool {
        !matches!(self, EventKind::SenderComment { .. })
    }

    /// Scroll, pointer and click activity, which resets the idle clock.
    fn is_interaction(&self) -> bool {
        matches!(self, EventKind::Scroll { .. } | EventKind::MouseMove { .. } | EventKind::Click { .. })
    }
}

/// One event as reported by a tracked page.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEvent {
    /// Client event id; unique per tracking token. Server-side events have none.
    pub cid: Option<u64>,
    pub ts_ms: i64,
    pub kind: EventKind,
}

/// Exact wire shape of one element of a POSTed batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireEvent {
    pub cid: u64,
    pub ts: i64,
    pub k: String,
    #[serde(default)]
    pub p: Value,
}

/// Decodes a POSTed JSON array into events. Any malformed element rejects
/// the whole batch.
pub fn parse_batch(body: &[u8]) -> Result<Vec<InteractionEvent>> {
    let wire: Vec<WireEvent> =
        serde_json::from_slice(body).map_err(|e| Error::Validation(format!("event batch must be a JSON array of events: {e}")))?;
    if wire.len() > MAX_BATCH_EVENTS {
        return Err(Error::Validation(format!("batch exceeds {MAX_BATCH_EVENTS} events")));
    }
    wire.into_iter()
        .map(|w| {
            let event = InteractionEvent { cid: Some(w.cid), ts_ms: w.ts, kind: EventKind::from_wire(&w.k, w.p)? };
            validate_event(&event)?;
            Ok(event)
        })
        .collect()
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} must be finite")))
    }
}

/// Payload invariants every stored event satisfies.
pub fn validate_event(event: &InteractionEvent) -> Result<()> {
    if event.ts_ms < 0 {
        return Err(Error::Validation("timestamp must be non-negative".into()));
    }
    match &event.kind {
        EventKind::Sample(s) => {
            for (name, v) in [("scroll_y", s.scroll_y), ("vw", s.vw), ("vh", s.vh), ("mouse_x", s.mouse_x), ("mouse_y", s.mouse_y)] {
                finite(name, v)?;
            }
            if s.visible && (s.vw <= 0.0 || s.vh <= 0.0) {
                return Err(Error::Validation("visible sample needs a positive viewport".into()));
            }
        }
        EventKind::Layout(l) => {
            finite("doc_height", l.doc_height)?;
            if !(l.vw > 0.0 && l.vh > 0.0 && l.vw.is_finite() && l.vh.is_finite()) {
                return Err(Error::Validation("layout needs a positive viewport".into()));
            }
            for b in &l.sections {
                finite("top", b.top)?;
                finite("height", b.height)?;
                if b.height < 0.0 {
                    return Err(Error::Validation(format!("section {} has negative height", b.id)));
                }
            }
        }
        EventKind::Scroll { y } => {
            y.map(|y| finite("y", y)).transpose()?;
        }
        EventKind::MouseMove { x, y } => {
            for v in [x, y].into_iter().flatten() {
                finite("mouse position", *v)?;
            }
        }
        EventKind::Comment { text, .. } | EventKind::SenderComment { text, .. } => {
            if text.trim().is_empty() {
                return Err(Error::Validation("comment text is empty".into()));
            }
            if text.chars().count() > MAX_COMMENT_CHARS {
                return Err(Error::Validation("comment text too long".into()));
            }
        }
        _ => {}
    }
    Ok(())
}

/// A stored log line: an event plus the recipient it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub recipient_id: Option<RecipientId>,
    pub event: InteractionEvent,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    rid: Option<RecipientId>,
    cid: Option<u64>,
    ts: i64,
    k: String,
    p: Value,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        let line = RecordLine {
            rid: self.recipient_id.clone(),
            cid: self.event.cid,
            ts: self.event.ts_ms,
            k: self.event.kind.wire_name().to_owned(),
            p: self.event.kind.wire_payload(),
        };
        serde_json::to_string(&line).expect("log record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let raw: RecordLine = serde_json::from_str(line)?;
        Ok(LogRecord {
            recipient_id: raw.rid,
            event: InteractionEvent { cid: raw.cid, ts_ms: raw.ts, kind: EventKind::from_wire(&raw.k, raw.p)? },
        })
    }
}

/// One second of a reading session on the 1 Hz grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    /// Seconds since session start.
    pub ts_s: u32,
    pub scroll_y: f64,
    pub viewport: (f64, f64),
    pub mouse: (f64, f64),
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub ts_ms: i64,
    pub section_id: SectionId,
    pub url: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Scroll,
    /// Pointer movement; flags tell whether it moved along each axis.
    MouseMove {
        horizontal: bool,
        vertical: bool,
    },
    Click,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub ts_ms: i64,
    pub kind: InteractionKind,
}

/// One visit of one recipient, from open to close or timeout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingSession {
    pub recipient_id: RecipientId,
    pub campaign_id: CampaignId,
    pub start_ms: i64,
    pub end_ms: i64,
    pub frames: Vec<FrameSample>,
    /// Layout history as `(ts_ms, snapshot)`, sorted.
    pub layouts: Vec<(i64, LayoutSnapshot)>,
    pub clicks: Vec<ClickRecord>,
    pub interactions: Vec<Interaction>,
    /// Half-open `[from_ms, to_ms)` spans flagged idle.
    pub idle_spans: Vec<(i64, i64)>,
}

impl ReadingSession {
    pub fn frame_start_ms(&self, frame: &FrameSample) -> i64 {
        self.start_ms + i64::from(frame.ts_s) * 1000
    }

    pub fn is_idle_at(&self, ts_ms: i64) -> bool {
        self.idle_spans.iter().any(|&(from, to)| from <= ts_ms && ts_ms < to)
    }

    /// Visible and not idle.
    pub fn is_active(&self, frame: &FrameSample) -> bool {
        frame.visible && !self.is_idle_at(self.frame_start_ms(frame))
    }

    /// Latest layout reported at or before `ts_ms`, falling back to the
    /// first one when the page reported geometry only after sampling began.
    pub fn layout_at(&self, ts_ms: i64) -> Option<&LayoutSnapshot> {
        self.layouts.iter().rev().find(|(ts, _)| *ts <= ts_ms).or_else(|| self.layouts.first()).map(|(_, l)| l)
    }
}

/// Seconds of the session that were visible and not idle.
pub fn active_time(session: &ReadingSession) -> u32 {
    session.frames.iter().filter(|f| session.is_active(f)).count() as u32
}

struct SessionBuilder {
    start_ms: i64,
    last_ms: i64,
    events: Vec<InteractionEvent>,
}

impl SessionBuilder {
    fn finish(self, end_ms: i64, recipient_id: &RecipientId, campaign_id: &CampaignId) -> ReadingSession {
        let start = self.start_ms;
        let end = end_ms.max(start);
        let n_frames = ((end - start) + 999) / 1000;

        let mut samples: Vec<(i64, SamplePayload)> = Vec::new();
        let mut visibility: Vec<(i64, bool)> = Vec::new();
        let mut layouts = Vec::new();
        let mut clicks = Vec::new();
        let mut interactions = Vec::new();
        let mut activity = vec![start];
        let mut mouse: Option<(f64, f64)> = None;
        for ev in &self.events {
            match &ev.kind {
                EventKind::Sample(s) => {
                    samples.push((ev.ts_ms, *s));
                    mouse = Some((s.mouse_x, s.mouse_y));
                }
                EventKind::Layout(l) => layouts.push((ev.ts_ms, l.clone())),
                EventKind::Hidden => visibility.push((ev.ts_ms, false)),
                EventKind::Visible => visibility.push((ev.ts_ms, true)),
                EventKind::Click { section_id, url } => {
                    clicks.push(ClickRecord { ts_ms: ev.ts_ms, section_id: section_id.clone(), url: url.clone() })
                }
                _ => {}
            }
            match &ev.kind {
                EventKind::Scroll { .. } => interactions.push(Interaction { ts_ms: ev.ts_ms, kind: InteractionKind::Scroll }),
                EventKind::Click { .. } => interactions.push(Interaction { ts_ms: ev.ts_ms, kind: InteractionKind::Click }),
                EventKind::MouseMove { x, y } => {
                    let (horizontal, vertical) = match (x, y, mouse) {
                        (Some(x), Some(y), Some((px, py))) => (*x != px, *y != py),
                        _ => (true, true),
                    };
                    if let (Some(x), Some(y)) = (x, y) {
                        mouse = Some((*x, *y));
                    }
                    interactions.push(Interaction { ts_ms: ev.ts_ms, kind: InteractionKind::MouseMove { horizontal, vertical } });
                }
                _ => {}
            }
            if ev.kind.is_interaction() || matches!(ev.kind, EventKind::IdleConfirm | EventKind::IdleEnd) {
                activity.push(ev.ts_ms);
            }
        }

        let mut frames = Vec::with_capacity(n_frames as usize);
        let mut sample_idx = 0usize;
        let mut current: Option<(i64, SamplePayload)> = None;
        let mut last_known: Option<SamplePayload> = None;
        let mut vis_idx = 0usize;
        let mut page_visible = true;
        for i in 0..n_frames {
            let frame_start = start + i * 1000;
            let frame_end = frame_start + 1000;
            while sample_idx < samples.len() && samples[sample_idx].0 < frame_end {
                current = Some(samples[sample_idx]);
                last_known = Some(samples[sample_idx].1);
                sample_idx += 1;
            }
            while vis_idx < visibility.len() && visibility[vis_idx].0 <= frame_start {
                page_visible = visibility[vis_idx].1;
                vis_idx += 1;
            }
            let fresh = current.filter(|(ts, _)| frame_start - *ts <= CARRY_FORWARD_MS);
            let geometry = fresh.map(|(_, s)| s).or(last_known);
            let visible = page_visible && fresh.is_some_and(|(_, s)| s.visible && s.vw > 0.0 && s.vh > 0.0);
            frames.push(FrameSample {
                ts_s: i as u32,
                scroll_y: geometry.map_or(0.0, |s| s.scroll_y),
                viewport: geometry.map_or((0.0, 0.0), |s| (s.vw, s.vh)),
                mouse: geometry.map_or((0.0, 0.0), |s| (s.mouse_x, s.mouse_y)),
                visible,
            });
        }

        activity.sort_unstable();
        let mut idle_spans = Vec::new();
        for (i, &a) in activity.iter().enumerate() {
            let next = activity.get(i + 1).copied().unwrap_or(end).min(end);
            if next - a > IDLE_AFTER_MS {
                idle_spans.push((a + IDLE_AFTER_MS, next));
            }
        }

        ReadingSession {
            recipient_id: recipient_id.clone(),
            campaign_id: campaign_id.clone(),
            start_ms: start,
            end_ms: end,
            frames,
            layouts,
            clicks,
            interactions,
            idle_spans,
        }
    }
}

/// Rebuilds the reading sessions of one recipient of one campaign.
///
/// Events are sorted by `(ts, cid)` first, so arrival order does not matter.
/// Events before the first `open` or after a `close` are ignored.
pub fn sessionize(recipient_id: &RecipientId, campaign_id: &CampaignId, events: &[InteractionEvent]) -> Vec<ReadingSession> {
    let mut sorted: Vec<&InteractionEvent> = events.iter().collect();
    sorted.sort_by_key(|e| (e.ts_ms, e.cid));

    let mut sessions = Vec::new();
    let mut current: Option<SessionBuilder> = None;
    for ev in sorted {
        if !ev.kind.is_client_kind() {
            continue;
        }
        if matches!(ev.kind, EventKind::Open) {
            if let Some(b) = current.take() {
                let end = b.last_ms + 1;
                sessions.push(b.finish(end, recipient_id, campaign_id));
            }
            current = Some(SessionBuilder { start_ms: ev.ts_ms, last_ms: ev.ts_ms, events: Vec::new() });
            continue;
        }
        let Some(b) = current.as_mut() else { continue };
        if ev.ts_ms - b.last_ms > SESSION_TIMEOUT_MS {
            let b = current.take().expect("checked above");
            let end = b.last_ms + 1;
            sessions.push(b.finish(end, recipient_id, campaign_id));
            continue;
        }
        b.last_ms = ev.ts_ms;
        if matches!(ev.kind, EventKind::Close) {
            let b = current.take().expect("checked above");
            let end = ev.ts_ms;
            sessions.push(b.finish(end, recipient_id, campaign_id));
        } else {
            b.events.push(ev.clone());
        }
    }
    if let Some(b) = current {
        let end = b.last_ms + 1;
        sessions.push(b.finish(end, recipient_id, campaign_id));
    }
    sessions
}

/// Sessions for every recipient appearing in a campaign log.
pub fn sessionize_log(campaign_id: &CampaignId, records: &[LogRecord]) -> BTreeMap<RecipientId, Vec<ReadingSession>> {
    let mut per_recipient: BTreeMap<RecipientId, Vec<InteractionEvent>> = BTreeMap::new();
    for rec in records {
        if let Some(rid) = &rec.recipient_id {
            per_recipient.entry(rid.clone()).or_default().push(rec.event.clone());
        }
    }
    per_recipient
        .into_iter()
        .map(|(rid, events)| {
            let sessions = sessionize(&rid, campaign_id, &events);
            (rid, sessions)
        })
        .filter(|(_, s)| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(ts_ms: i64, kind: EventKind) -> InteractionEvent {
        InteractionEvent { cid: Some(ts_ms as u64), ts_ms, kind }
    }

    fn sample(ts_ms: i64) -> InteractionEvent {
        ev(ts_ms, EventKind::Sample(SamplePayload { scroll_y: 0.0, vw: 1000.0, vh: 800.0, mouse_x: 10.0, mouse_y: 10.0, visible: true }))
    }

    fn rid() -> RecipientId {
        "r1".into()
    }

    fn cid() -> CampaignId {
        "c1".into()
    }

    fn visit(seconds: i64, extra: Vec<InteractionEvent>) -> Vec<InteractionEvent> {
        let mut events = vec![ev(0, EventKind::Open)];
        events.extend((0..seconds).map(|s| sample(s * 1000)));
        events.extend(extra);
        events.push(ev(seconds * 1000, EventKind::Close));
        events
    }

    #[test]
    fn one_visit_gives_thirty_frames() {
        let sessions = sessionize(&rid(), &cid(), &visit(30, vec![]));
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].frames.len(), 30);
        assert!(sessions[0].frames.iter().all(|f| f.visible));
    }

    #[test]
    fn second_open_starts_a_new_session() {
        let mut events = vec![ev(0, EventKind::Open), sample(0), sample(1000)];
        events.push(ev(40 * 60 * 1000, EventKind::Open));
        events.push(sample(40 * 60 * 1000));
        let sessions = sessionize(&rid(), &cid(), &events);
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].frames.len(), 2);
        assert_eq!(sessions[1].start_ms, 40 * 60 * 1000);
    }

    #[test]
    fn silence_beyond_timeout_closes_session() {
        let events = vec![ev(0, EventKind::Open), sample(0), sample(SESSION_TIMEOUT_MS + 5_000)];
        let sessions = sessionize(&rid(), &cid(), &events);
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].frames.len(), 1);
    }

    #[test]
    fn hidden_span_marks_frames_not_visible() {
        let events = visit(30, vec![ev(10_000, EventKind::Hidden), ev(20_000, EventKind::Visible)]);
        let s = &sessionize(&rid(), &cid(), &events)[0];
        assert_eq!(s.frames.len(), 30);
        for f in &s.frames {
            assert_eq!(f.visible, !(10..20).contains(&f.ts_s), "frame {}", f.ts_s);
        }
    }

    #[test]
    fn no_open_means_no_session() {
        let events = vec![sample(0), sample(1000), ev(2000, EventKind::Close)];
        assert!(sessionize(&rid(), &cid(), &events).is_empty());
    }

    #[test]
    fn short_gaps_carry_forward_long_gaps_go_dark() {
        let events = vec![ev(0, EventKind::Open), sample(0), sample(10_000), ev(12_000, EventKind::Close)];
        let s = &sessionize(&rid(), &cid(), &events)[0];
        let visible: Vec<bool> = s.frames.iter().map(|f| f.visible).collect();
        assert_eq!(visible, vec![true, true, true, true, true, true, false, false, false, false, true, true]);
    }

    #[test]
    fn activity_every_second_is_fully_active() {
        let moves = (0..30).map(|s| ev(s * 1000 + 500, EventKind::MouseMove { x: Some(s as f64), y: Some(1.0) })).collect();
        let s = &sessionize(&rid(), &cid(), &visit(30, moves))[0];
        assert_eq!(active_time(s), 30);
    }

    #[test]
    fn idle_seconds_after_a_minute_are_excluded() {
        let s = &sessionize(&rid(), &cid(), &visit(120, vec![]))[0];
        assert_eq!(s.frames.len(), 120);
        assert_eq!(active_time(s), 60);
        assert_eq!(s.idle_spans, vec![(60_000, 120_000)]);
    }

    #[test]
    fn idle_confirm_resumes_counting() {
        let s = &sessionize(&rid(), &cid(), &visit(120, vec![ev(90_000, EventKind::IdleConfirm)]))[0];
        assert_eq!(active_time(s), 90);
        assert_eq!(s.idle_spans, vec![(60_000, 90_000)]);
    }

    #[test]
    fn hidden_only_session_has_zero_active_time() {
        let events = visit(20, vec![ev(0, EventKind::Hidden)]);
        let s = &sessionize(&rid(), &cid(), &events)[0];
        assert_eq!(active_time(s), 0);
    }

    #[test]
    fn parses_wire_batch() {
        let body = br#"[{"cid":1,"ts":1000,"k":"open","p":{}},
            {"cid":2,"ts":1001,"k":"sample","p":{"scroll_y":0,"vw":800,"vh":600,"mouse_x":1,"mouse_y":2,"visible":true}},
            {"cid":3,"ts":1002,"k":"click","p":{"section_id":"s2","url":"https://x.org"}},
            {"cid":4,"ts":1003,"k":"mouse_move","p":{}}]"#;
        let events = parse_batch(body).unwrap();
        assert_eq!(events.len(), 4);
        assert_eq!(events[2].kind, EventKind::Click { section_id: "s2".into(), url: "https://x.org".into() });
        assert_eq!(events[3].kind, EventKind::MouseMove { x: None, y: None });
    }

    #[test]
    fn rejects_zero_viewport_while_visible() {
        let body = br#"[{"cid":1,"ts":5,"k":"sample","p":{"scroll_y":0,"vw":0,"vh":0,"mouse_x":0,"mouse_y":0,"visible":true}}]"#;
        assert!(matches!(parse_batch(body), Err(Error::Validation(_))));
        let hidden = br#"[{"cid":1,"ts":5,"k":"sample","p":{"scroll_y":0,"vw":0,"vh":0,"mouse_x":0,"mouse_y":0,"visible":false}}]"#;
        assert!(parse_batch(hidden).is_ok());
    }

    #[test]
    fn rejects_unknown_fields_and_kinds() {
        assert!(parse_batch(br#"[{"cid":1,"ts":5,"k":"teleport","p":{}}]"#).is_err());
        assert!(parse_batch(br#"[{"cid":1,"ts":5,"k":"open","p":{},"extra":1}]"#).is_err());
        assert!(parse_batch(br#"{"cid":1}"#).is_err());
    }

    #[test]
    fn log_lines_round_trip() {
        let rec = LogRecord {
            recipient_id: Some(rid()),
            event: ev(42, EventKind::Comment { section_id: "s3".into(), text: "nice \"quote\"".into() }),
        };
        let line = rec.to_json_line();
        assert!(!line.contains('\n'));
        assert_eq!(LogRecord::from_json_line(&line).unwrap(), rec);
    }

    fn arb_stream() -> impl Strategy<Value = Vec<InteractionEvent>> {
        let kinds = prop_oneof![
            Just(EventKind::Scroll { y: None }),
            (0.0f64..900.0, 0.0f64..700.0).prop_map(|(x, y)| EventKind::MouseMove { x: Some(x), y: Some(y) }),
            Just(EventKind::Hidden),
            Just(EventKind::Visible),
            Just(EventKind::IdleConfirm),
            (0.0f64..3000.0, any::<bool>()).prop_map(|(sy, v)| EventKind::Sample(SamplePayload {
                scroll_y: sy,
                vw: 900.0,
                vh: 700.0,
                mouse_x: 1.0,
                mouse_y: 1.0,
                visible: v
            })),
            Just(EventKind::Open),
            Just(EventKind::Close),
        ];
        prop::collection::vec((0i64..400_000, kinds), 0..120).prop_map(|mut v| {
            v.sort_by_key(|(ts, _)| *ts);
            let mut out = vec![InteractionEvent { cid: Some(0), ts_ms: 0, kind: EventKind::Open }];
            out.extend(v.into_iter().enumerate().map(|(i, (ts, kind))| InteractionEvent { cid: Some(i as u64 + 1), ts_ms: ts, kind }));
            out
        })
    }

    proptest! {
        #[test]
        fn sessionize_is_pure_and_order_insensitive(events in arb_stream(), seed in any::<u64>()) {
            let a = sessionize(&rid(), &cid(), &events);
            let b = sessionize(&rid(), &cid(), &events);
            prop_assert_eq!(&a, &b);
            // shuffle arrival order: events are re-sorted before processing
            let mut shuffled = events.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&a, &sessionize(&rid(), &cid(), &shuffled));
        }

        #[test]
        fn active_time_is_bounded_by_duration(events in arb_stream()) {
            for s in sessionize(&rid(), &cid(), &events) {
                let wall = ((s.end_ms - s.start_ms) + 999) / 1000;
                prop_assert!(i64::from(active_time(&s)) <= wall);
                for w in s.frames.windows(2) {
                    prop_assert!(w[0].ts_s < w[1].ts_s);
                }
                for &(from, to) in &s.idle_spans {
                    prop_assert!(s.start_ms <= from && to <= s.end_ms && from < to);
                }
            }
        }
    }
}
