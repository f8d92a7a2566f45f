//! Per-(section, second) interaction features and the three geometric
//! baselines.

use serde::{Deserialize, Serialize};

use crate::domain::SectionId;
use crate::error::{Error, Result};
use crate::ingest::{FrameSample, InteractionKind, LayoutSnapshot, ReadingSession};

pub const N_FEATURES: usize = 22;
/// Cap for "seconds since" features; also the encoding of "never".
pub const SECONDS_CAP: f64 = 600.0;
const WINDOWS_S: [f64; 3] = [2.0, 5.0, 10.0];

/// Column order of a feature vector, as used in datasets and model files.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "msg_center_offset",
    "msg_window_share",
    "secs_since_msg_click",
    "mouse_x_norm",
    "mouse_y_norm",
    "secs_since_any_click",
    "mouse_move_freq_2_h",
    "mouse_move_freq_5_h",
    "mouse_move_freq_10_h",
    "mouse_move_freq_inf_h",
    "mouse_move_freq_2_v",
    "mouse_move_freq_5_v",
    "mouse_move_freq_10_v",
    "mouse_move_freq_inf_v",
    "scroll_freq_2",
    "scroll_freq_5",
    "scroll_freq_10",
    "scroll_freq_inf",
    "frac_messages_clicked",
    "baseline_p1",
    "baseline_p2",
    "baseline_p3",
];

/// Message and user state at one second.
pub const MESSAGE_USER_FEATURES: std::ops::Range<usize> = 0..6;
/// Behavioral pattern features.
pub const PATTERN_FEATURES: std::ops::Range<usize> = 6..19;
pub const BASELINE_FEATURES: std::ops::Range<usize> = 19..22;

pub const IDX_CENTER_OFFSET: usize = 0;
pub const IDX_WINDOW_SHARE: usize = 1;
pub const IDX_SECS_SINCE_MSG_CLICK: usize = 2;
pub const IDX_SECS_SINCE_ANY_CLICK: usize = 5;
pub const IDX_MOVE_INF_H: usize = 9;
pub const IDX_MOVE_INF_V: usize = 13;
pub const IDX_SCROLL_FREQ_2: usize = 14;
pub const IDX_SCROLL_INF: usize = 17;
pub const IDX_FRAC_CLICKED: usize = 18;
pub const IDX_BASELINE_P1: usize = 19;

pub type FeatureVector = [f64; N_FEATURES];

/// Feature row for one section at one visible second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub section_id: SectionId,
    pub t_s: u32,
    /// Visible and not idle; only active rows count toward reading time.
    pub active: bool,
    pub values: FeatureVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    /// Share of the viewport the section covers.
    WindowShare,
    /// Window share damped by distance to the viewport center, normalized.
    CenterWeighted,
    /// The section nearest to the pointer.
    NearestMouse,
}

/// Where the viewport sits in document coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub scroll_y: f64,
    pub width: f64,
    pub height: f64,
    pub mouse_x: f64,
    pub mouse_y: f64,
    pub visible: bool,
}

impl Viewport {
    pub fn from_frame(frame: &FrameSample, layout: &LayoutSnapshot) -> Self {
        let (w, h) = if frame.viewport.0 > 0.0 && frame.viewport.1 > 0.0 { frame.viewport } else { (layout.vw, layout.vh) };
        Viewport { scroll_y: frame.scroll_y, width: w, height: h, mouse_x: frame.mouse.0, mouse_y: frame.mouse.1, visible: frame.visible }
    }

    fn center(&self) -> f64 {
        self.scroll_y + self.height / 2.0
    }
}

fn visible_height(top: f64, height: f64, vp: &Viewport) -> f64 {
    let lo = top.max(vp.scroll_y);
    let hi = (top + height).min(vp.scroll_y + vp.height);
    (hi - lo).max(0.0)
}

/// Section center's distance from the viewport center, in viewport heights.
fn center_distance(top: f64, height: f64, vp: &Viewport) -> f64 {
    ((top + height / 2.0) - vp.center()).abs() / vp.height
}

/// Reading probability per section (layout order) under a baseline.
/// Hidden frames give all zeros.
pub fn baseline_p(baseline: Baseline, vp: &Viewport, layout: &LayoutSnapshot) -> Vec<f64> {
    let n = layout.sections.len();
    if !vp.visible || vp.height <= 0.0 || n == 0 {
        return vec![0.0; n];
    }
    let share: Vec<f64> = layout.sections.iter().map(|b| (visible_height(b.top, b.height, vp) / vp.height).clamp(0.0, 1.0)).collect();
    match baseline {
        Baseline::WindowShare => share,
        Baseline::CenterWeighted => {
            let weights: Vec<f64> =
                layout.sections.iter().zip(&share).map(|(b, s)| s / (1.0 + center_distance(b.top, b.height, vp))).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter().map(|w| w / total).collect()
            } else {
                weights
            }
        }
        Baseline::NearestMouse => {
            let y = vp.scroll_y + vp.mouse_y;
            let mut best: Option<(usize, f64)> = None;
            for (i, b) in layout.sections.iter().enumerate() {
                let d = if y < b.top {
                    b.top - y
                } else if y >= b.top + b.height {
                    y - (b.top + b.height)
                } else {
                    0.0
                };
                // strict comparison keeps the earlier section on ties
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            let mut p = vec![0.0; n];
            if let Some((i, _)) = best {
                p[i] = 1.0;
            }
            p
        }
    }
}

/// Sorted timestamps of one interaction family.
struct Timeline(Vec<i64>);

impl Timeline {
    fn count_in(&self, from: i64, to: i64) -> usize {
        self.0.partition_point(|&t| t < to) - self.0.partition_point(|&t| t < from)
    }

    fn last_before(&self, to: i64) -> Option<i64> {
        let i = self.0.partition_point(|&t| t < to);
        (i > 0).then(|| self.0[i - 1])
    }
}

fn frequencies(line: &Timeline, session_start: i64, frame_end: i64, elapsed_s: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (slot, w) in WINDOWS_S.iter().enumerate() {
        let span = w.min(elapsed_s);
        let from = frame_end - (w * 1000.0) as i64;
        out[slot] = line.count_in(from, frame_end) as f64 / span;
    }
    out[3] = line.count_in(session_start, frame_end) as f64 / elapsed_s;
    out
}

fn seconds_since(ts: Option<i64>, now: i64) -> f64 {
    ts.map_or(SECONDS_CAP, |t| (((now - t) as f64) / 1000.0).clamp(0.0, SECONDS_CAP))
}

/// One feature row per (section, visible second) of the session.
pub fn build_features(session: &ReadingSession) -> Result<Vec<FrameFeatures>> {
    if session.layouts.is_empty() {
        return Err(Error::Feature(format!("session of {} at {} has no layout", session.recipient_id, session.start_ms)));
    }
    if session.frames.is_empty() {
        return Err(Error::Feature("session has no frames".into()));
    }
    let mut moves_h = Vec::new();
    let mut moves_v = Vec::new();
    let mut scrolls = Vec::new();
    for i in &session.interactions {
        match i.kind {
            InteractionKind::Scroll => scrolls.push(i.ts_ms),
            InteractionKind::MouseMove { horizontal, vertical } => {
                if horizontal {
                    moves_h.push(i.ts_ms);
                }
                if vertical {
                    moves_v.push(i.ts_ms);
                }
            }
            InteractionKind::Click => {}
        }
    }
    let (moves_h, moves_v, scrolls) = (Timeline(moves_h), Timeline(moves_v), Timeline(scrolls));
    let all_clicks = Timeline(session.clicks.iter().map(|c| c.ts_ms).collect());

    let mut rows = Vec::new();
    for frame in session.frames.iter().filter(|f| f.visible) {
        let frame_start = session.frame_start_ms(frame);
        let frame_end = frame_start + 1000;
        let layout = session.layout_at(frame_start).expect("layouts checked non-empty");
        let vp = Viewport::from_frame(frame, layout);
        let elapsed_s = f64::from(frame.ts_s + 1);
        let active = session.is_active(frame);

        let h = frequencies(&moves_h, session.start_ms, frame_end, elapsed_s);
        let v = frequencies(&moves_v, session.start_ms, frame_end, elapsed_s);
        let s = frequencies(&scrolls, session.start_ms, frame_end, elapsed_s);
        let clicked_sections =
            layout.sections.iter().filter(|b| session.clicks.iter().any(|c| c.section_id == b.id && c.ts_ms < frame_end)).count();
        let frac_clicked = if layout.sections.is_empty() { 0.0 } else { clicked_sections as f64 / layout.sections.len() as f64 };
        let since_any = seconds_since(all_clicks.last_before(frame_end), frame_end);
        let mouse_x = if vp.width > 0.0 { (vp.mouse_x / vp.width).clamp(0.0, 1.0) } else { 0.0 };
        let mouse_y = if vp.height > 0.0 { (vp.mouse_y / vp.height).clamp(0.0, 1.0) } else { 0.0 };

        let b1 = baseline_p(Baseline::WindowShare, &vp, layout);
        let b2 = baseline_p(Baseline::CenterWeighted, &vp, layout);
        let b3 = baseline_p(Baseline::NearestMouse, &vp, layout);

        for (m, b) in layout.sections.iter().enumerate() {
            let last_click = session.clicks.iter().filter(|c| c.section_id == b.id && c.ts_ms < frame_end).map(|c| c.ts_ms).max();
            let values: FeatureVector = [
                center_distance(b.top, b.height, &vp).min(1.0),
                b1[m],
                seconds_since(last_click, frame_end),
                mouse_x,
                mouse_y,
                since_any,
                h[0],
                h[1],
                h[2],
                h[3],
                v[0],
                v[1],
                v[2],
                v[3],
                s[0],
                s[1],
                s[2],
                s[3],
                frac_clicked,
                b1[m],
                b2[m],
                b3[m],
            ];
            rows.push(FrameFeatures { section_id: b.id.clone(), t_s: frame.ts_s, active, values });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{sessionize, EventKind, InteractionEvent, SamplePayload, SectionBox};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn layout(boxes: &[(f64, f64)], vh: f64) -> LayoutSnapshot {
        LayoutSnapshot {
            sections: boxes
                .iter()
                .enumerate()
                .map(|(i, &(top, height))| SectionBox { id: SectionId(format!("s{}", i + 1)), top, height })
                .collect(),
            doc_height: boxes.iter().map(|(t, h)| t + h).fold(0.0, f64::max),
            vw: 1000.0,
            vh,
        }
    }

    fn vp(scroll_y: f64, height: f64, mouse_y: f64) -> Viewport {
        Viewport { scroll_y, width: 1000.0, height, mouse_x: 500.0, mouse_y, visible: true }
    }

    #[test]
    fn full_viewport_section_has_share_one() {
        let l = layout(&[(0.0, 800.0), (800.0, 800.0)], 800.0);
        assert_eq!(baseline_p(Baseline::WindowShare, &vp(0.0, 800.0, 10.0), &l), vec![1.0, 0.0]);
        assert_eq!(baseline_p(Baseline::CenterWeighted, &vp(0.0, 800.0, 10.0), &l), vec![1.0, 0.0]);
    }

    #[test]
    fn two_half_sections_share_equally() {
        let l = layout(&[(0.0, 400.0), (400.0, 400.0), (800.0, 400.0)], 800.0);
        assert_eq!(baseline_p(Baseline::WindowShare, &vp(0.0, 800.0, 10.0), &l), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn center_weighting_prefers_the_centered_section() {
        // s2 straddles the viewport center, s1 and s3 are at the edges
        let l = layout(&[(0.0, 300.0), (300.0, 200.0), (500.0, 300.0)], 800.0);
        let p = baseline_p(Baseline::CenterWeighted, &vp(0.0, 800.0, 0.0), &l);
        let share = [300.0 / 800.0, 200.0 / 800.0, 300.0 / 800.0];
        // distances in viewport heights: |150-400|/800, 0, |650-400|/800
        let w = [share[0] / (1.0 + 250.0 / 800.0), share[1], share[2] / (1.0 + 250.0 / 800.0)];
        let total: f64 = w.iter().sum();
        for i in 0..3 {
            assert_abs_diff_eq!(p[i], w[i] / total, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_mouse_picks_containing_section() {
        let l = layout(&[(0.0, 400.0), (400.0, 400.0), (800.0, 400.0)], 800.0);
        assert_eq!(baseline_p(Baseline::NearestMouse, &vp(200.0, 800.0, 300.0), &l), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn nearest_mouse_ties_go_to_earlier_section() {
        // a 100px gap between s1 and s2; mouse exactly in the middle
        let l = layout(&[(0.0, 400.0), (500.0, 400.0)], 800.0);
        assert_eq!(baseline_p(Baseline::NearestMouse, &vp(0.0, 800.0, 450.0), &l), vec![1.0, 0.0]);
    }

    #[test]
    fn hidden_frame_gives_zeros() {
        let l = layout(&[(0.0, 800.0)], 800.0);
        let mut v = vp(0.0, 800.0, 10.0);
        v.visible = false;
        for b in [Baseline::WindowShare, Baseline::CenterWeighted, Baseline::NearestMouse] {
            assert_eq!(baseline_p(b, &v, &l), vec![0.0]);
        }
    }

    fn ev(ts_ms: i64, kind: EventKind) -> InteractionEvent {
        InteractionEvent { cid: Some(ts_ms as u64), ts_ms, kind }
    }

    fn sample(ts: i64, scroll_y: f64) -> InteractionEvent {
        ev(ts, EventKind::Sample(SamplePayload { scroll_y, vw: 1000.0, vh: 800.0, mouse_x: 250.0, mouse_y: 400.0, visible: true }))
    }

    fn session(extra: Vec<InteractionEvent>, seconds: i64) -> ReadingSession {
        let mut events = vec![ev(0, EventKind::Open), ev(1, EventKind::Layout(layout(&[(0.0, 800.0), (800.0, 800.0)], 800.0)))];
        events.extend((0..seconds).map(|s| sample(s * 1000, 0.0)));
        events.extend(extra);
        events.push(ev(seconds * 1000, EventKind::Close));
        sessionize(&"r".into(), &"c".into(), &events).remove(0)
    }

    #[test]
    fn stationary_reader_has_zero_frequencies() {
        let rows = build_features(&session(vec![], 10)).unwrap();
        assert_eq!(rows.len(), 20);
        for r in &rows {
            assert!(r.values[PATTERN_FEATURES.start..IDX_FRAC_CLICKED].iter().all(|&f| f == 0.0));
            assert_eq!(r.values[IDX_SECS_SINCE_ANY_CLICK], SECONDS_CAP);
        }
    }

    #[test]
    fn section_filling_viewport_geometry() {
        let rows = build_features(&session(vec![], 3)).unwrap();
        let s1 = rows.iter().find(|r| r.section_id.as_str() == "s1").unwrap();
        assert_eq!(s1.values[IDX_WINDOW_SHARE], 1.0);
        assert_eq!(s1.values[IDX_CENTER_OFFSET], 0.0);
        assert_eq!(s1.values[3], 0.25);
        assert_eq!(s1.values[4], 0.5);
        let s2 = rows.iter().find(|r| r.section_id.as_str() == "s2").unwrap();
        assert_eq!(s2.values[IDX_WINDOW_SHARE], 0.0);
        assert_eq!(s2.values[IDX_CENTER_OFFSET], 1.0);
    }

    #[test]
    fn two_scrolls_in_last_two_seconds() {
        let scrolls = vec![ev(3_200, EventKind::Scroll { y: None }), ev(4_700, EventKind::Scroll { y: None })];
        let rows = build_features(&session(scrolls, 10)).unwrap();
        // second 4 covers [4000, 5000); the 2 s window is [3000, 5000)
        let r = rows.iter().find(|r| r.t_s == 4 && r.section_id.as_str() == "s1").unwrap();
        assert_eq!(r.values[IDX_SCROLL_FREQ_2], 2.0 / 2.0);
        assert_eq!(r.values[IDX_SCROLL_FREQ_2 + 1], 2.0 / 5.0);
        assert_eq!(r.values[IDX_SCROLL_INF], 2.0 / 5.0);
        let later = rows.iter().find(|r| r.t_s == 9 && r.section_id.as_str() == "s1").unwrap();
        assert_eq!(later.values[IDX_SCROLL_FREQ_2], 0.0);
        assert_eq!(later.values[IDX_SCROLL_FREQ_2 + 2], 0.2);
    }

    #[test]
    fn click_features() {
        let clicks = vec![ev(2_500, EventKind::Click { section_id: "s2".into(), url: "u".into() })];
        let rows = build_features(&session(clicks, 6)).unwrap();
        let r = rows.iter().find(|r| r.t_s == 4 && r.section_id.as_str() == "s2").unwrap();
        assert_abs_diff_eq!(r.values[IDX_SECS_SINCE_MSG_CLICK], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.values[IDX_SECS_SINCE_ANY_CLICK], 2.5, epsilon = 1e-12);
        assert_eq!(r.values[IDX_FRAC_CLICKED], 0.5);
        let other = rows.iter().find(|r| r.t_s == 4 && r.section_id.as_str() == "s1").unwrap();
        assert_eq!(other.values[IDX_SECS_SINCE_MSG_CLICK], SECONDS_CAP);
        let before = rows.iter().find(|r| r.t_s == 1 && r.section_id.as_str() == "s2").unwrap();
        assert_eq!(before.values[IDX_FRAC_CLICKED], 0.0);
    }

    #[test]
    fn missing_layout_is_feature_error() {
        let events = vec![ev(0, EventKind::Open), sample(0, 0.0), ev(1000, EventKind::Close)];
        let s = sessionize(&"r".into(), &"c".into(), &events).remove(0);
        assert!(matches!(build_features(&s), Err(Error::Feature(_))));
    }

    #[test]
    fn fractions_stay_in_unit_interval() {
        let moves = (0..40).map(|i| ev(i * 250, EventKind::MouseMove { x: Some(i as f64), y: Some(2.0 * i as f64) })).collect();
        for r in build_features(&session(moves, 10)).unwrap() {
            for idx in [0, 1, 3, 4, 18, 19, 20, 21] {
                assert!((0.0..=1.0).contains(&r.values[idx]), "{} = {}", FEATURE_NAMES[idx], r.values[idx]);
            }
            assert!(r.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    fn arb_layout() -> impl Strategy<Value = (LayoutSnapshot, f64, f64)> {
        (prop::collection::vec((0.0f64..400.0, 0.0f64..1500.0), 1..12), 100.0f64..1200.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(
            |(pieces, vh, scroll_frac, mouse_frac)| {
                let mut top = 0.0;
                let mut boxes = Vec::new();
                for (gap, height) in pieces {
                    top += gap;
                    boxes.push((top, height));
                    top += height;
                }
                (layout(&boxes, vh), scroll_frac * top, mouse_frac * vh)
            },
        )
    }

    proptest! {
        #[test]
        fn baseline_probabilities_are_bounded((l, scroll, mouse) in arb_layout()) {
            let v = vp(scroll, l.vh, mouse);
            let b1 = baseline_p(Baseline::WindowShare, &v, &l);
            prop_assert!(b1.iter().sum::<f64>() <= 1.0 + 1e-9);
            let b2 = baseline_p(Baseline::CenterWeighted, &v, &l);
            prop_assert!(b2.iter().sum::<f64>() <= 1.0 + 1e-9);
            let b3 = baseline_p(Baseline::NearestMouse, &v, &l);
            prop_assert_eq!(b3.iter().filter(|&&p| p == 1.0).count(), 1);
            for p in b1.iter().chain(&b2).chain(&b3) {
                prop_assert!((0.0..=1.0).contains(p));
            }
        }
    }
}
