//! Scoring estimates against labeled sessions, and leave-one-user-out
//! cross-validation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{session_features, LabeledMessage, LabeledSession};
use super::model::{predict_row, ModelSpec, Network, Variant};
use super::train::{level_of_class, train_model, TrainConfig};
use super::{classify_read_level, ReadLevel};
use crate::error::{Error, Result};

/// Messages with at least this much true reading time are scored by
/// relative error, shorter ones by absolute error.
pub const PER_ERROR_MIN_TRUE_S: f64 = 10.0;

/// Absent fields had no qualifying messages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_error: Option<f64>,
    pub abs_error: Option<f64>,
    pub accuracy: Option<f64>,
    pub skim_precision: Option<f64>,
    pub skim_recall: Option<f64>,
    pub detail_precision: Option<f64>,
    pub detail_recall: Option<f64>,
    pub read_precision: Option<f64>,
    pub read_recall: Option<f64>,
}

impl EvalReport {
    pub fn fields(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("per_error", self.per_error),
            ("abs_error", self.abs_error),
            ("accuracy", self.accuracy),
            ("skim_precision", self.skim_precision),
            ("skim_recall", self.skim_recall),
            ("detail_precision", self.detail_precision),
            ("detail_recall", self.detail_recall),
            ("read_precision", self.read_precision),
            ("read_recall", self.read_recall),
        ]
    }

    fn from_fields(f: [Option<f64>; 9]) -> Self {
        EvalReport {
            per_error: f[0],
            abs_error: f[1],
            accuracy: f[2],
            skim_precision: f[3],
            skim_recall: f[4],
            detail_precision: f[5],
            detail_recall: f[6],
            read_precision: f[7],
            read_recall: f[8],
        }
    }
}

/// True and estimated outcome of one message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageOutcome {
    pub true_time_s: f64,
    /// Absent for models that predict the read level only.
    pub est_time_s: Option<f64>,
    /// Absent without a word count.
    pub true_level: Option<ReadLevel>,
    pub est_level: Option<ReadLevel>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

fn ratio(hit: usize, of: usize) -> Option<f64> {
    (of > 0).then(|| hit as f64 / of as f64)
}

pub fn score(outcomes: &[MessageOutcome]) -> EvalReport {
    let timed = || outcomes.iter().filter_map(|o| o.est_time_s.map(|e| (o.true_time_s, e)));
    let per_error = mean(timed().filter(|(t, _)| *t >= PER_ERROR_MIN_TRUE_S).map(|(t, e)| (t - e).abs() / t));
    let abs_error = mean(timed().filter(|(t, _)| *t < PER_ERROR_MIN_TRUE_S).map(|(t, e)| (t - e).abs()));
    let levels: Vec<(ReadLevel, ReadLevel)> = outcomes.iter().filter_map(|o| Some((o.true_level?, o.est_level?))).collect();
    let accuracy = ratio(levels.iter().filter(|(t, e)| t == e).count(), levels.len());
    let pr = |is: &dyn Fn(ReadLevel) -> bool| {
        let hit = levels.iter().filter(|(t, e)| is(*t) && is(*e)).count();
        let predicted = levels.iter().filter(|(_, e)| is(*e)).count();
        let actual = levels.iter().filter(|(t, _)| is(*t)).count();
        (ratio(hit, predicted), ratio(hit, actual))
    };
    let (skim_precision, skim_recall) = pr(&|l| l == ReadLevel::Skim);
    let (detail_precision, detail_recall) = pr(&|l| l == ReadLevel::Detail);
    let (read_precision, read_recall) = pr(&|l| l.is_read());
    EvalReport { per_error, abs_error, accuracy, skim_precision, skim_recall, detail_precision, detail_recall, read_precision, read_recall }
}

pub(crate) fn argmax_level(y: &[f64]) -> ReadLevel {
    let mut best = 0;
    for (i, v) in y.iter().enumerate() {
        if *v > y[best] {
            best = i;
        }
    }
    level_of_class(best)
}

fn outcome(model: &ModelSpec, net: Option<&Network>, m: &LabeledMessage) -> Result<MessageOutcome> {
    let true_level = m.word_count.map(|w| classify_read_level(m.true_time_s, w)).transpose()?;
    if model.variant == Variant::CategoryNN {
        let rows: Vec<_> = m.rows.iter().map(|(x, _)| *x).collect();
        let y = net.expect("trainable").forward(&model.weights, &session_features(&rows))?;
        return Ok(MessageOutcome { true_time_s: m.true_time_s, est_time_s: None, true_level, est_level: Some(argmax_level(&y)) });
    }
    let est = if model.variant.is_per_timestep() {
        let mut t = 0.0;
        for (x, _) in &m.rows {
            t += predict_row(model, net, x)?;
        }
        t
    } else {
        let rows: Vec<_> = m.rows.iter().map(|(x, _)| *x).collect();
        net.expect("trainable").forward(&model.weights, &session_features(&rows))?[0].max(0.0)
    };
    let est_level = m.word_count.map(|w| classify_read_level(est, w)).transpose()?;
    Ok(MessageOutcome { true_time_s: m.true_time_s, est_time_s: Some(est), true_level, est_level })
}

pub fn evaluate_model(model: &ModelSpec, sessions: &[LabeledSession]) -> Result<EvalReport> {
    let net = if model.variant.is_baseline() { None } else { Some(model.network()?) };
    let mut outcomes = Vec::new();
    for s in sessions {
        for m in &s.messages {
            outcomes.push(outcome(model, net.as_ref(), m)?);
        }
    }
    Ok(score(&outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub test_user: String,
    pub train_sessions: Vec<String>,
    pub validation_sessions: Vec<String>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Unweighted mean over the folds that have each field.
    pub mean: EvalReport,
}

/// Splits sessions 7:1 into train and validation after a seeded shuffle.
fn split_train_validation(mut sessions: Vec<&LabeledSession>, seed: u64) -> (Vec<&LabeledSession>, Vec<&LabeledSession>) {
    sessions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if sessions.len() >= 2 { (sessions.len() / 8).max(1) } else { 0 };
    let val = sessions.split_off(sessions.len() - n_val);
    (sessions, val)
}

/// Leave-one-user-out: each user's sessions are the test set once, and the
/// other users' sessions are split into train and validation. Folds train
/// in parallel.
pub fn cross_validate(spec: &ModelSpec, sessions: &[LabeledSession], config: &TrainConfig) -> Result<CvReport> {
    let users: Vec<&str> = sessions.iter().map(|s| s.user_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if users.len() < 2 {
        return Err(Error::CrossValidation(format!("need at least 2 users, got {}", users.len())));
    }
    let run_fold = |fold: usize, user: &str| -> Result<FoldReport> {
        let test: Vec<LabeledSession> = sessions.iter().filter(|s| s.user_id == user).cloned().collect();
        let rest: Vec<&LabeledSession> = sessions.iter().filter(|s| s.user_id != user).collect();
        let (train, val) = split_train_validation(rest, config.seed.wrapping_add(fold as u64));
        let model = if spec.variant.is_trainable() {
            let train: Vec<_> = train.iter().map(|s| (*s).clone()).collect();
            let val: Vec<_> = val.iter().map(|s| (*s).clone()).collect();
            train_model(spec, &train, &val, config)?.model
        } else {
            spec.clone()
        };
        Ok(FoldReport {
            test_user: user.to_string(),
            train_sessions: train.iter().map(|s| format!("{}/{}", s.user_id, s.session_id)).collect(),
            validation_sessions: val.iter().map(|s| format!("{}/{}", s.user_id, s.session_id)).collect(),
            report: evaluate_model(&model, &test)?,
        })
    };
    let folds: Vec<Result<FoldReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = users.iter().enumerate().map(|(i, u)| scope.spawn(move || run_fold(i, u))).collect();
        handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
    });
    let folds = folds.into_iter().collect::<Result<Vec<_>>>()?;
    let mut means = [None; 9];
    for (k, slot) in means.iter_mut().enumerate() {
        *slot = mean(folds.iter().filter_map(|f| f.report.fields()[k].1));
    }
    Ok(CvReport { mean: EvalReport::from_fields(means), folds })
}
