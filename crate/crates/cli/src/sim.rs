//! Synthetic recipients.
//!
//! The simulator writes tracker events in the wire format together with the
//! ground truth that produced them, so tests can check the metric and
//! estimation code against numbers it never computed.
//!
//! Campaign mode stacks every section at [`SECTION_HEIGHT`] pixels in an
//! equally tall viewport and scrolls to exactly one section per second, so
//! the window-share baseline sees the true reading time. Dataset mode uses
//! uneven sections and a drifting scroll position, and labels each second
//! with the section nearest the viewport center after noise.

use std::collections::BTreeMap;

use commtool_core::domain::{Group, Section, SectionKind};
use commtool_core::estimation::dataset::LabeledRow;
use commtool_core::estimation::features::build_features;
use commtool_core::ingest::{parse_batch, sessionize_log, LogRecord};
use commtool_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const SECTION_HEIGHT: f64 = 800.0;
pub const VIEWPORT_W: f64 = 1000.0;
/// Gap between a recipient's first session and a revisit, past the
/// session timeout.
pub const REVISIT_GAP_MS: i64 = 31 * 60 * 1000;
pub const BATCH_SIZE: usize = 50;

fn default_one() -> f64 {
    1.0
}

fn default_dwell() -> [u32; 2] {
    [10, 10]
}

/// Behavior of the synthetic panel. Probabilities are per recipient for
/// opening and revisiting, per section otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    #[serde(default = "default_one")]
    pub open_prob: f64,
    /// Inclusive range of whole seconds spent on a read message.
    #[serde(default = "default_dwell")]
    pub dwell_s: [u32; 2],
    #[serde(default = "default_one")]
    pub read_prob: f64,
    #[serde(default)]
    pub click_prob: f64,
    #[serde(default)]
    pub relevance_prob: f64,
    /// Chance that a relevance mark is taken back later.
    #[serde(default)]
    pub relevance_off_prob: f64,
    #[serde(default)]
    pub comment_prob: f64,
    /// Chance of switching tabs after reading a message.
    #[serde(default)]
    pub hidden_prob: f64,
    /// Inclusive range of seconds left idle on the page before closing.
    #[serde(default)]
    pub idle_tail_s: [u32; 2],
    /// Chance of answering the idle prompt when it appears.
    #[serde(default)]
    pub idle_confirm_prob: f64,
    #[serde(default)]
    pub revisit_prob: f64,
}

impl Default for Profile {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// A panel member as the simulator sees them.
#[derive(Debug, Clone)]
pub struct SimRecipient {
    pub recipient_id: String,
    pub group: Group,
}

/// True reading of one section in one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub recipient_id: String,
    pub session: u32,
    pub section_id: String,
    pub true_time_s: u32,
}

#[derive(Debug, Clone, Default)]
pub struct RecipientLog {
    pub recipient_id: String,
    /// Wire events in emission order.
    pub events: Vec<Value>,
}

impl RecipientLog {
    /// Wire batches of at most [`BATCH_SIZE`] events.
    pub fn batches(&self) -> Vec<Vec<u8>> {
        self.events.chunks(BATCH_SIZE).map(|c| serde_json::to_vec(c).expect("events serialize")).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Simulation {
    pub logs: Vec<RecipientLog>,
    pub truth: Vec<TruthRow>,
    /// True active seconds per recipient, summed over sessions.
    pub active_s: BTreeMap<String, u32>,
}

struct Emitter {
    t0: i64,
    cid: u64,
    events: Vec<Value>,
}

impl Emitter {
    fn at(&mut self, second: u32, k: &str, p: Value) {
        self.cid += 1;
        self.events.push(json!({"cid": self.cid, "ts": self.t0 + i64::from(second) * 1000, "k": k, "p": p}));
    }

    fn sample(&mut self, second: u32, scroll_y: f64, vh: f64, mouse_y: f64, visible: bool) {
        let p =
            json!({"scroll_y": scroll_y, "vw": VIEWPORT_W, "vh": vh, "mouse_x": VIEWPORT_W / 2.0, "mouse_y": mouse_y, "visible": visible});
        self.at(second, "sample", p);
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [u32; 2]) -> u32 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn stacked_layout(sections: &[Section]) -> Value {
    let boxes: Vec<Value> = sections
        .iter()
        .enumerate()
        .map(|(i, s)| json!({"id": s.section_id, "top": i as f64 * SECTION_HEIGHT, "height": SECTION_HEIGHT}))
        .collect();
    json!({"sections": boxes, "doc_height": sections.len() as f64 * SECTION_HEIGHT, "vw": VIEWPORT_W, "vh": SECTION_HEIGHT})
}

/// One session starting at `t0`. Returns the session length in seconds.
#[allow(clippy::too_many_arguments)]
fn simulate_session(
    rng: &mut ChaCha8Rng,
    em: &mut Emitter,
    sections: &[Section],
    recipient: &SimRecipient,
    profile: &Profile,
    session: u32,
    truth: &mut Vec<TruthRow>,
    comments: &mut u32,
) -> (u32, u32) {
    let vh = SECTION_HEIGHT;
    let mid = vh / 2.0;
    em.at(0, "open", json!({}));
    em.at(0, "layout", stacked_layout(sections));
    em.at(0, "mouse_move", json!({"x": VIEWPORT_W / 2.0, "y": mid}));
    let explicit = recipient.group == Group::Explicit;
    let mut s: u32 = 0;
    let mut scroll_y = 0.0;
    let mut last_activity: u32 = 0;
    let mut active: u32 = 0;
    for (i, section) in sections.iter().enumerate() {
        let top = i as f64 * SECTION_HEIGHT;
        if explicit && section.survey_enabled && rng.random_bool(profile.relevance_prob) {
            em.at(s, "relevance_on", json!({"section_id": section.section_id}));
            if rng.random_bool(profile.relevance_off_prob) {
                em.at(s, "relevance_off", json!({"section_id": section.section_id}));
            }
        }
        if explicit && section.survey_enabled && rng.random_bool(profile.comment_prob) {
            *comments += 1;
            em.at(s, "comment", json!({"section_id": section.section_id, "text": format!("comment {}", comments)}));
        }
        let reads = section.kind == SectionKind::Content && rng.random_bool(profile.read_prob);
        let dwell = if reads { uniform(rng, profile.dwell_s).max(1) } else { 0 };
        if dwell == 0 {
            continue;
        }
        scroll_y = top;
        em.at(s, "scroll", json!({"y": top}));
        let click_at = rng.random_bool(profile.click_prob).then(|| s + dwell / 2);
        for k in 0..dwell {
            em.at(s + k, "mouse_move", json!({"x": VIEWPORT_W / 2.0, "y": mid}));
            em.sample(s + k, scroll_y, vh, mid, true);
            if click_at == Some(s + k) {
                em.at(
                    s + k,
                    "click",
                    json!({"section_id": section.section_id, "url": format!("https://example.org/{}", section.section_id)}),
                );
            }
        }
        truth.push(TruthRow {
            recipient_id: recipient.recipient_id.clone(),
            session,
            section_id: section.section_id.to_string(),
            true_time_s: dwell,
        });
        s += dwell;
        active += dwell;
        last_activity = s - 1;
        if rng.random_bool(profile.hidden_prob) {
            let away = rng.random_range(2..=6);
            em.at(s, "hidden", json!({}));
            for k in 0..away {
                em.sample(s + k, scroll_y, vh, mid, false);
            }
            em.at(s + away, "visible", json!({}));
            s += away;
        }
    }
    // idle on the last position; after a minute without activity the page
    // asks, and an answer keeps the remaining seconds active
    let tail = uniform(rng, profile.idle_tail_s);
    let idle_from = last_activity + 60;
    let end = s + tail;
    let mut confirm = None;
    if end > idle_from && rng.random_bool(profile.idle_confirm_prob) {
        let earliest = idle_from.max((end).saturating_sub(59));
        if earliest < end {
            confirm = Some(rng.random_range(earliest..end));
        }
    }
    for k in s..end {
        if k == idle_from {
            em.at(k, "idle_prompt", json!({}));
        }
        if confirm == Some(k) {
            em.at(k, "idle_confirm", json!({}));
        }
        em.sample(k, scroll_y, vh, mid, true);
        let idle = k >= idle_from && confirm.is_none_or(|c| k < c);
        if !idle {
            active += 1;
        }
    }
    em.at(end, "close", json!({}));
    (end, active)
}

/// Simulates every recipient of a campaign; `start_ms` is the first open.
pub fn simulate_campaign(sections: &[Section], recipients: &[SimRecipient], profile: &Profile, seed: u64, start_ms: i64) -> Simulation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&SimRecipient> = recipients.iter().collect();
    order.sort_by(|a, b| a.recipient_id.cmp(&b.recipient_id));
    let mut sim = Simulation::default();
    let mut comments = 0;
    for r in order {
        let mut em = Emitter { t0: start_ms, cid: 0, events: Vec::new() };
        if !rng.random_bool(profile.open_prob) {
            sim.logs.push(RecipientLog { recipient_id: r.recipient_id.clone(), events: Vec::new() });
            continue;
        }
        let (len, mut active) = simulate_session(&mut rng, &mut em, sections, r, profile, 0, &mut sim.truth, &mut comments);
        if rng.random_bool(profile.revisit_prob) {
            em.t0 = start_ms + i64::from(len) * 1000 + REVISIT_GAP_MS;
            active += simulate_session(&mut rng, &mut em, sections, r, profile, 1, &mut sim.truth, &mut comments).1;
        }
        sim.active_s.insert(r.recipient_id.clone(), active);
        sim.logs.push(RecipientLog { recipient_id: r.recipient_id.clone(), events: em.events });
    }
    sim
}

/// Settings for labeled dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub users: usize,
    pub sessions_per_user: usize,
    pub messages: [usize; 2],
    pub seconds_per_message: [u32; 2],
    /// Standard deviation of the noise added to the center weighting.
    pub noise_sd: f64,
    /// Chance that a visible second is spent not reading at all.
    pub away_prob: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            users: 6,
            sessions_per_user: 6,
            messages: [4, 8],
            seconds_per_message: [8, 40],
            noise_sd: 0.08,
            away_prob: 0.1,
            seed: 0,
        }
    }
}

/// Center-weighted reading share of each section, computed from the
/// geometry the simulator chose.
fn center_weights(tops: &[f64], heights: &[f64], scroll: f64, vh: f64) -> Vec<f64> {
    let center = scroll + vh / 2.0;
    let w: Vec<f64> = tops
        .iter()
        .zip(heights)
        .map(|(&t, &h)| {
            let visible = ((t + h).min(scroll + vh) - t.max(scroll)).max(0.0) / vh;
            visible / (1.0 + ((t + h / 2.0) - center).abs() / vh)
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter().map(|x| x / total).collect()
    } else {
        w
    }
}

/// Labeled rows and a word-count table. Every session has its own section
/// ids so word counts never collide.
pub fn simulate_dataset(config: &DatasetConfig) -> Result<(Vec<LabeledRow>, BTreeMap<String, usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sd.max(1e-12)).expect("valid sd");
    let vh = 800.0;
    let mut rows = Vec::new();
    let mut words = BTreeMap::new();
    for u in 0..config.users {
        let user = format!("u{u}");
        // each user has a habitual scroll offset relative to what they read
        let habit: f64 = rng.random_range(-0.25..0.25);
        for k in 0..config.sessions_per_user {
            let session = format!("x{k}");
            let n = rng.random_range(config.messages[0]..=config.messages[1]);
            let ids: Vec<String> = (0..n).map(|m| format!("{user}{session}m{m}")).collect();
            let heights: Vec<f64> = (0..n).map(|_| rng.random_range(250.0..1100.0_f64).round()).collect();
            let mut tops = Vec::with_capacity(n);
            let mut y = 0.0;
            for h in &heights {
                tops.push(y);
                y += h;
            }
            let doc_height = y;
            for (id, h) in ids.iter().zip(&heights) {
                words.insert(id.clone(), (h / 4.0) as usize);
            }
            let mut em = Emitter { t0: 0, cid: 0, events: Vec::new() };
            let boxes: Vec<Value> =
                ids.iter().zip(&tops).zip(&heights).map(|((id, t), h)| json!({"id": id, "top": t, "height": h})).collect();
            em.at(0, "open", json!({}));
            em.at(0, "layout", json!({"sections": boxes, "doc_height": doc_height, "vw": VIEWPORT_W, "vh": vh}));
            let mut labels: BTreeMap<(u32, usize), f64> = BTreeMap::new();
            let mut s: u32 = 0;
            for m in 0..n {
                let dwell = uniform(&mut rng, config.seconds_per_message);
                for j in 0..dwell {
                    // the viewport center travels down the message with jitter
                    let progress = (f64::from(j) + 0.5) / f64::from(dwell);
                    let center = tops[m] + heights[m] * progress + (habit + rng.random_range(-0.2..0.2)) * vh;
                    let scroll = (center - vh / 2.0).clamp(0.0, (doc_height - vh).max(0.0)).round();
                    let mouse_y = rng.random_range(0.2..0.8) * vh;
                    em.at(s, "mouse_move", json!({"x": VIEWPORT_W / 2.0, "y": mouse_y}));
                    if j == 0 || rng.random_bool(0.3) {
                        em.at(s, "scroll", json!({"y": scroll}));
                    }
                    em.sample(s, scroll, vh, mouse_y, true);
                    let w = center_weights(&tops, &heights, scroll, vh);
                    let away = rng.random_bool(config.away_prob);
                    let read = (!away)
                        .then(|| {
                            w.iter()
                                .enumerate()
                                .filter(|(_, p)| **p > 0.0)
                                .map(|(i, p)| (i, p + noise.sample(&mut rng)))
                                .max_by(|a, b| a.1.total_cmp(&b.1))
                                .map(|(i, _)| i)
                        })
                        .flatten();
                    for i in 0..n {
                        labels.insert((s, i), if read == Some(i) { 1.0 } else { 0.0 });
                    }
                    s += 1;
                }
            }
            em.at(s, "close", json!({}));
            let records: Vec<LogRecord> = em
                .events
                .chunks(commtool_core::ingest::MAX_BATCH_EVENTS)
                .map(|c| parse_batch(&serde_json::to_vec(c).expect("serialize")))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .map(|event| LogRecord { recipient_id: Some(user.as_str().into()), event })
                .collect();
            let sessions = sessionize_log(&"dataset".into(), &records);
            for sess in sessions.values().flatten() {
                for f in build_features(sess)? {
                    if !f.active {
                        continue;
                    }
                    let i = ids.iter().position(|id| id.as_str() == f.section_id.as_str()).expect("known section");
                    let label = labels.get(&(f.t_s, i)).copied().unwrap_or(0.0);
                    rows.push(LabeledRow::from_features(&user, &session, &f, label));
                }
            }
        }
    }
    Ok((rows, words))
}
