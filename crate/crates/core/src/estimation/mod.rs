//! Message-level reading-time estimation.
//!
//! Every (section, visible second) of a session gets a feature row; a model
//! turns each row into the probability the section is being read, and the
//! per-message reading time is the sum over active seconds.

pub mod dataset;
pub mod eval;
pub mod features;
pub mod model;
pub mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Section, SectionId};
use crate::error::{Error, Result};
use crate::ingest::ReadingSession;

pub use dataset::{LabeledMessage, LabeledRow, LabeledSession};
pub use eval::{cross_validate, evaluate_model, CvReport, EvalReport, FoldReport};
pub use features::{baseline_p, build_features, Baseline, FrameFeatures, FEATURE_NAMES, N_FEATURES};
pub use model::{predict_timestep, ModelSpec, Network, Variant};
pub use train::{train_model, TrainConfig, TrainOutcome};

/// Words per minute at or below which a message counts as read in detail.
pub const DETAIL_MAX_WPM: f64 = 200.0;
/// Words per minute at or below which a message counts as skimmed.
pub const SKIM_MAX_WPM: f64 = 400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReadLevel {
    Skip,
    Skim,
    Detail,
}

impl ReadLevel {
    pub const ALL: [ReadLevel; 3] = [ReadLevel::Skip, ReadLevel::Skim, ReadLevel::Detail];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_read(self) -> bool {
        self != ReadLevel::Skip
    }
}

pub fn classify_read_level(reading_time_s: f64, word_count: usize) -> Result<ReadLevel> {
    if !reading_time_s.is_finite() || reading_time_s < 0.0 {
        return Err(Error::Validation(format!("reading time {reading_time_s} is not a non-negative number")));
    }
    if reading_time_s == 0.0 {
        return Ok(ReadLevel::Skip);
    }
    // compare 60·w / t against the thresholds without dividing
    let words_per_min_x_t = 60.0 * word_count as f64;
    Ok(if words_per_min_x_t <= DETAIL_MAX_WPM * reading_time_s {
        ReadLevel::Detail
    } else if words_per_min_x_t <= SKIM_MAX_WPM * reading_time_s {
        ReadLevel::Skim
    } else {
        ReadLevel::Skip
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEstimate {
    pub section_id: SectionId,
    pub reading_time_s: f64,
    pub read_level: ReadLevel,
}

/// A reading time that classifies as `level` for a message of `words`; used
/// by the category model, which predicts the level directly.
fn representative_time(level: ReadLevel, words: usize, active_seconds: usize) -> f64 {
    match level {
        ReadLevel::Skip => 0.0,
        ReadLevel::Skim if words == 0 => 0.0,
        ReadLevel::Skim => 60.0 * words as f64 / (0.75 * SKIM_MAX_WPM),
        ReadLevel::Detail if words == 0 => active_seconds.max(1) as f64,
        ReadLevel::Detail => 60.0 * words as f64 / (0.75 * DETAIL_MAX_WPM),
    }
}

/// Reading-time estimates for `sections` over one session.
pub fn estimate_session(model: &ModelSpec, session: &ReadingSession, sections: &[Section]) -> Result<Vec<MessageEstimate>> {
    let zero = |s: &Section| MessageEstimate { section_id: s.section_id.clone(), reading_time_s: 0.0, read_level: ReadLevel::Skip };
    if !session.frames.iter().any(|f| session.is_active(f)) {
        return Ok(sections.iter().map(zero).collect());
    }
    let rows = match build_features(session) {
        Ok(rows) => rows,
        Err(Error::Feature(why)) => {
            log::warn!("no estimates for session: {why}");
            return Ok(sections.iter().map(zero).collect());
        }
        Err(e) => return Err(e),
    };
    let mut by_section: BTreeMap<&SectionId, Vec<&FrameFeatures>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.active) {
        by_section.entry(&r.section_id).or_default().push(r);
    }
    let net = if model.variant.is_baseline() { None } else { Some(model.network()?) };
    let mut out = Vec::with_capacity(sections.len());
    for s in sections {
        let rows = by_section.get(&s.section_id).map(Vec::as_slice).unwrap_or(&[]);
        let time = if rows.is_empty() {
            0.0
        } else if model.variant.is_per_timestep() {
            let mut t = 0.0;
            for r in rows {
                t += model::predict_row(model, net.as_ref(), &r.values)?;
            }
            t
        } else {
            let values: Vec<_> = rows.iter().map(|r| r.values).collect();
            let x = dataset::session_features(&values);
            let y = net.as_ref().expect("trainable").forward(&model.weights, &x)?;
            if model.variant == Variant::CategoryNN {
                let level = eval::argmax_level(&y);
                representative_time(level, s.word_count, rows.len())
            } else {
                y[0].max(0.0)
            }
        };
        out.push(MessageEstimate {
            section_id: s.section_id.clone(),
            reading_time_s: time,
            read_level: classify_read_level(time, s.word_count)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_level_table() {
        assert_eq!(classify_read_level(40.0, 100).unwrap(), ReadLevel::Detail);
        assert_eq!(classify_read_level(20.0, 100).unwrap(), ReadLevel::Skim);
        assert_eq!(classify_read_level(10.0, 100).unwrap(), ReadLevel::Skip);
        assert_eq!(classify_read_level(0.0, 100).unwrap(), ReadLevel::Skip);
        // 400 and 200 wpm exactly
        assert_eq!(classify_read_level(15.0, 100).unwrap(), ReadLevel::Skim);
        assert_eq!(classify_read_level(30.0, 100).unwrap(), ReadLevel::Detail);
        assert_eq!(classify_read_level(3.0, 0).unwrap(), ReadLevel::Detail);
        assert_eq!(classify_read_level(0.0, 0).unwrap(), ReadLevel::Skip);
    }

    #[test]
    fn bad_reading_time_rejected() {
        assert!(matches!(classify_read_level(-1.0, 10), Err(Error::Validation(_))));
        assert!(classify_read_level(f64::NAN, 10).is_err());
        assert!(classify_read_level(f64::INFINITY, 10).is_err());
    }

    #[test]
    fn read_level_monotone_in_time() {
        for words in [0usize, 1, 7, 100, 1234] {
            let mut prev = ReadLevel::Skip;
            for k in 0..2000 {
                let level = classify_read_level(k as f64 * 0.37, words).unwrap();
                assert!(level >= prev, "{words} words at {k}");
                prev = level;
            }
        }
    }

    #[test]
    fn representative_times_classify_back() {
        for words in [0usize, 1, 50, 400] {
            for level in ReadLevel::ALL {
                let t = representative_time(level, words, 12);
                let back = classify_read_level(t, words).unwrap();
                if words == 0 && level == ReadLevel::Skim {
                    assert_eq!(back, ReadLevel::Skip);
                } else {
                    assert_eq!(back, level, "{words} {level:?}");
                }
            }
        }
    }
}
