//! Brute-force recount of campaign metrics straight from the files on disk.
//!
//! Nothing here calls into the metric, ingest or estimation code. Events are
//! read as raw JSON lines and every second of every session is examined on
//! its own.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::Value;

const SESSION_GAP_MS: i64 = 30 * 60 * 1000;
const STALE_MS: i64 = 5_000;
const IDLE_MS: i64 = 60_000;
const OVERHEAD_S: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct Person {
    pub id: String,
    pub implicit: bool,
    pub unit: String,
    pub job: String,
}

#[derive(Debug, Clone)]
pub struct Msg {
    pub id: String,
    pub content: bool,
    pub words: f64,
}

#[derive(Debug, Clone)]
struct Ev {
    line: usize,
    cid: i64,
    ts: i64,
    k: String,
    p: Value,
}

/// (dimension, bucket, interested, total)
pub type Interest = BTreeSet<(String, String, u64, u64)>;
pub type MessageRow = (String, BTreeMap<String, Option<f64>>, Interest);

/// Expected metric values as plain JSON-ish numbers; `None` is absent.
#[derive(Debug, Default)]
pub struct Expected {
    pub email: BTreeMap<String, Option<f64>>,
    pub messages: Vec<MessageRow>,
}

fn f(v: &Value) -> f64 {
    v.as_f64().expect("number")
}

/// 0 skip, 1 skim, 2 detail
fn level(words: f64, t: f64) -> u8 {
    if t <= 0.0 {
        0
    } else if words / (t / 60.0) <= 200.0 {
        2
    } else if words / (t / 60.0) <= 400.0 {
        1
    } else {
        0
    }
}

struct Session {
    start: i64,
    end: i64,
    evs: Vec<Ev>,
}

fn sessions_of(mut evs: Vec<Ev>) -> Vec<Session> {
    evs.sort_by_key(|e| (e.ts, e.cid));
    let mut out = Vec::new();
    let mut cur: Option<Session> = None;
    let mut last = 0;
    for e in evs {
        if e.k == "sender_comment" {
            continue;
        }
        if e.k == "open" {
            if let Some(s) = cur.take() {
                out.push(Session { end: last + 1, ..s });
            }
            cur = Some(Session { start: e.ts, end: 0, evs: Vec::new() });
            last = e.ts;
            continue;
        }
        let Some(s) = cur.as_mut() else { continue };
        if e.ts - last > SESSION_GAP_MS {
            let s = cur.take().unwrap();
            out.push(Session { end: last + 1, ..s });
            continue;
        }
        last = e.ts;
        if e.k == "close" {
            let s = cur.take().unwrap();
            out.push(Session { end: e.ts, ..s });
        } else {
            s.evs.push(e);
        }
    }
    if let Some(s) = cur {
        out.push(Session { end: last + 1, ..s });
    }
    out
}

/// (active seconds, window-share seconds per section id)
fn replay(s: &Session) -> (u64, BTreeMap<String, f64>) {
    let frames = ((s.end - s.start).max(0) + 999) / 1000;
    let mut active = 0;
    let mut share: BTreeMap<String, f64> = BTreeMap::new();
    for k in 0..frames {
        let fs = s.start + k * 1000;
        let fe = fs + 1000;
        let sample = s.evs.iter().rev().find(|e| e.k == "sample" && e.ts < fe);
        let fresh = sample.filter(|e| fs - e.ts <= STALE_MS);
        let page_visible =
            s.evs.iter().rev().find(|e| (e.k == "hidden" || e.k == "visible") && e.ts <= fs).is_none_or(|e| e.k == "visible");
        let visible =
            page_visible && fresh.is_some_and(|e| e.p["visible"].as_bool().unwrap() && f(&e.p["vw"]) > 0.0 && f(&e.p["vh"]) > 0.0);
        let reference = s
            .evs
            .iter()
            .filter(|e| matches!(e.k.as_str(), "scroll" | "mouse_move" | "click" | "idle_confirm" | "idle_end") && e.ts <= fs)
            .map(|e| e.ts)
            .chain([s.start])
            .max()
            .unwrap();
        let idle = fs - reference >= IDLE_MS;
        if !visible || idle {
            continue;
        }
        active += 1;
        let geo = &sample.unwrap().p;
        let layouts: Vec<&Ev> = s.evs.iter().filter(|e| e.k == "layout").collect();
        let Some(layout) = layouts.iter().rev().find(|e| e.ts <= fs).or(layouts.first()) else { continue };
        let (y, vh) = (f(&geo["scroll_y"]), f(&geo["vh"]));
        for b in layout.p["sections"].as_array().unwrap() {
            let (top, h) = (f(&b["top"]), f(&b["height"]));
            let overlap = ((top + h).min(y + vh) - top.max(y)).max(0.0);
            *share.entry(b["id"].as_str().unwrap().to_string()).or_default() += (overlap / vh).clamp(0.0, 1.0);
        }
    }
    (active, share)
}

fn rate(hit: usize, of: usize) -> Option<f64> {
    if of == 0 {
        None
    } else {
        Some(hit as f64 / of as f64)
    }
}

/// Recount of one campaign stored under `data/<channel>/<campaign>`.
pub fn recount(data: &Path, channel: &str, campaign: &str) -> Expected {
    let ch: Value = serde_json::from_slice(&std::fs::read(data.join(channel).join("meta.json")).unwrap()).unwrap();
    let cp: Value = serde_json::from_slice(&std::fs::read(data.join(channel).join(campaign).join("meta.json")).unwrap()).unwrap();
    let audience = f(&ch["channel"]["audience_size"]);
    let hourly = f(&ch["channel"]["hourly_rate_usd"]);
    let people: Vec<Person> = ch["recipients"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| Person {
            id: r["recipient_id"].as_str().unwrap().into(),
            implicit: r["group"] == "implicit",
            unit: r["unit"].as_str().unwrap().into(),
            job: r["job_category"].as_str().unwrap().into(),
        })
        .collect();
    let msgs: Vec<Msg> = cp["campaign"]["sections"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| Msg { id: s["section_id"].as_str().unwrap().into(), content: s["kind"] == "content", words: f(&s["word_count"]) })
        .collect();

    let text = std::fs::read_to_string(data.join(channel).join(campaign).join("events.jsonl")).unwrap_or_default();
    let mut by_person: BTreeMap<String, Vec<Ev>> = BTreeMap::new();
    for (line, raw) in text.lines().enumerate() {
        let v: Value = serde_json::from_str(raw).unwrap();
        let Some(rid) = v["rid"].as_str() else { continue };
        by_person.entry(rid.to_string()).or_default().push(Ev {
            line,
            cid: v["cid"].as_i64().unwrap_or(-1),
            ts: v["ts"].as_i64().unwrap(),
            k: v["k"].as_str().unwrap().to_string(),
            p: v["p"].clone(),
        });
    }

    struct Seen {
        opened: bool,
        active: u64,
        clicked: BTreeSet<String>,
        time: BTreeMap<String, f64>,
        marks: BTreeSet<String>,
        comments: BTreeMap<String, usize>,
    }
    let mut seen: BTreeMap<&str, Seen> = BTreeMap::new();
    for p in &people {
        let evs = by_person.get(&p.id).cloned().unwrap_or_default();
        // relevance: latest toggle by timestamp, then by log position
        let mut toggles: Vec<&Ev> = evs.iter().filter(|e| e.k == "relevance_on" || e.k == "relevance_off").collect();
        toggles.sort_by_key(|e| (e.ts, e.line));
        let mut marks = BTreeSet::new();
        for t in toggles {
            let sid = t.p["section_id"].as_str().unwrap().to_string();
            if t.k == "relevance_on" {
                marks.insert(sid);
            } else {
                marks.remove(&sid);
            }
        }
        let mut comments = BTreeMap::new();
        for e in evs.iter().filter(|e| e.k == "comment") {
            *comments.entry(e.p["section_id"].as_str().unwrap().to_string()).or_default() += 1;
        }
        let sessions = sessions_of(evs);
        let mut active = 0;
        let mut time: BTreeMap<String, f64> = BTreeMap::new();
        let mut clicked = BTreeSet::new();
        for s in &sessions {
            let (a, share) = replay(s);
            active += a;
            for (id, t) in share {
                *time.entry(id).or_default() += t;
            }
            for e in s.evs.iter().filter(|e| e.k == "click") {
                clicked.insert(e.p["section_id"].as_str().unwrap().to_string());
            }
        }
        seen.insert(&p.id, Seen { opened: !sessions.is_empty(), active, clicked, time, marks, comments });
    }

    let implicit: Vec<&Person> = people.iter().filter(|p| p.implicit).collect();
    let explicit: Vec<&Person> = people.iter().filter(|p| !p.implicit).collect();
    let t = |p: &Person, m: &Msg| seen[p.id.as_str()].time.get(&m.id).copied().unwrap_or(0.0);
    let lvl = |p: &Person, m: &Msg| level(m.words, t(p, m));
    let content: Vec<&Msg> = msgs.iter().filter(|m| m.content).collect();
    let openers: Vec<&&Person> = implicit.iter().filter(|p| seen[p.id.as_str()].opened).collect();

    let open = rate(openers.len(), implicit.len());
    let reading = if openers.is_empty() {
        None
    } else {
        Some(openers.iter().map(|p| seen[p.id.as_str()].active as f64).sum::<f64>() / openers.len() as f64)
    };
    let mut e = BTreeMap::new();
    e.insert("open_rate".into(), open);
    e.insert("click_rate".into(), rate(implicit.iter().filter(|p| !seen[p.id.as_str()].clicked.is_empty()).count(), implicit.len()));
    e.insert("read_rate".into(), rate(implicit.iter().filter(|p| content.iter().any(|m| lvl(p, m) >= 1)).count(), implicit.len()));
    e.insert("detail_rate".into(), rate(implicit.iter().filter(|p| content.iter().any(|m| lvl(p, m) == 2)).count(), implicit.len()));
    e.insert("relevance_rate".into(), rate(explicit.iter().filter(|p| !seen[p.id.as_str()].marks.is_empty()).count(), explicit.len()));
    e.insert("reading_time_s".into(), reading);
    e.insert("estimated_cost_usd".into(), open.map(|o| (reading.unwrap_or(0.0) * o * audience + OVERHEAD_S * audience) / 3600.0 * hourly));
    let n_comments = explicit.iter().map(|p| seen[p.id.as_str()].comments.values().sum::<usize>()).sum::<usize>();
    e.insert("n_comments".into(), Some(n_comments as f64));
    e.insert("reputation_change".into(), Some(0.0));

    let mut messages = Vec::new();
    for m in &content {
        let mut row = BTreeMap::new();
        row.insert(
            "click_rate".into(),
            rate(implicit.iter().filter(|p| seen[p.id.as_str()].clicked.contains(&m.id)).count(), implicit.len()),
        );
        row.insert("read_rate".into(), rate(implicit.iter().filter(|p| lvl(p, m) >= 1).count(), implicit.len()));
        row.insert("detail_rate".into(), rate(implicit.iter().filter(|p| lvl(p, m) == 2).count(), implicit.len()));
        row.insert(
            "relevance_rate".into(),
            rate(explicit.iter().filter(|p| seen[p.id.as_str()].marks.contains(&m.id)).count(), explicit.len()),
        );
        let rt = if openers.is_empty() { None } else { Some(openers.iter().map(|p| t(p, m)).sum::<f64>() / openers.len() as f64) };
        row.insert("reading_time_s".into(), rt);
        row.insert("estimated_cost_usd".into(), open.map(|o| rt.unwrap_or(0.0) * o * audience / 3600.0 * hourly));
        let nc = explicit.iter().map(|p| seen[p.id.as_str()].comments.get(&m.id).copied().unwrap_or(0)).sum::<usize>();
        row.insert("n_comments".into(), Some(nc as f64));
        let mut buckets: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();
        for p in &people {
            let s = &seen[p.id.as_str()];
            let hit = if p.implicit { s.clicked.contains(&m.id) || lvl(p, m) >= 1 } else { s.marks.contains(&m.id) };
            for key in [("Unit".to_string(), p.unit.clone()), ("JobCategory".to_string(), p.job.clone())] {
                let b = buckets.entry(key).or_default();
                b.1 += 1;
                b.0 += u64::from(hit);
            }
        }
        let interest = buckets.into_iter().map(|((d, b), (i, n))| (d, b, i, n)).collect();
        messages.push((m.id.clone(), row, interest));
    }
    Expected { email: e, messages }
}
