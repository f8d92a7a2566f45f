//! Labeled per-second datasets: CSV loading and grouping into sessions.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::features::{
    FeatureVector, FrameFeatures, FEATURE_NAMES, IDX_CENTER_OFFSET, IDX_FRAC_CLICKED, IDX_MOVE_INF_H, IDX_MOVE_INF_V, IDX_SCROLL_INF,
    IDX_SECS_SINCE_MSG_CLICK, IDX_WINDOW_SHARE, N_FEATURES, SECONDS_CAP,
};
use super::model::N_SESSION_FEATURES;
use crate::domain::SectionId;
use crate::error::{Error, Result};

/// One labeled (section, second): was the section being read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub user_id: String,
    pub session_id: String,
    pub t_s: u32,
    pub section_id: SectionId,
    pub label: f64,
    pub features: FeatureVector,
}

impl LabeledRow {
    pub fn from_features(user_id: &str, session_id: &str, f: &FrameFeatures, label: f64) -> Self {
        LabeledRow {
            user_id: user_id.to_string(),
            session_id: session_id.to_string(),
            t_s: f.t_s,
            section_id: f.section_id.clone(),
            label,
            features: f.values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMessage {
    pub section_id: SectionId,
    pub word_count: Option<usize>,
    /// Seconds with a positive label.
    pub true_time_s: f64,
    /// Feature rows with their labels, in time order.
    pub rows: Vec<(FeatureVector, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSession {
    pub user_id: String,
    pub session_id: String,
    pub messages: Vec<LabeledMessage>,
}

pub fn dataset_header() -> Vec<String> {
    ["user_id", "session_id", "t_s", "section_id", "label"].iter().chain(FEATURE_NAMES.iter()).map(|s| s.to_string()).collect()
}

pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Vec<LabeledRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != dataset_header() {
        return Err(Error::Validation(format!("dataset header must be {}", dataset_header().join(","))));
    }
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|_| Error::Validation(format!("line {line}: column {} is not a number", i + 1)))
        };
        let t_s = rec[2].trim().parse::<u32>().map_err(|_| Error::Validation(format!("line {line}: bad t_s")))?;
        let label = num(4)?;
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::Validation(format!("line {line}: label must be in [0, 1]")));
        }
        let mut features = [0.0; N_FEATURES];
        for (k, f) in features.iter_mut().enumerate() {
            *f = num(5 + k)?;
        }
        rows.push(LabeledRow {
            user_id: rec[0].to_string(),
            session_id: rec[1].to_string(),
            t_s,
            section_id: SectionId::new(&rec[3]),
            label,
            features,
        });
    }
    Ok(rows)
}

pub fn write_dataset_csv<W: Write>(writer: W, rows: &[LabeledRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset_header())?;
    for r in rows {
        let mut rec = vec![r.user_id.clone(), r.session_id.clone(), r.t_s.to_string(), r.section_id.to_string(), r.label.to_string()];
        rec.extend(r.features.iter().map(|f| f.to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar `section_id,word_count` file for read-level labels.
pub fn read_word_counts<R: Read>(reader: R) -> Result<BTreeMap<SectionId, usize>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != ["section_id", "word_count"] {
        return Err(Error::Validation("word count header must be section_id,word_count".into()));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let n = rec[1].trim().parse::<usize>().map_err(|_| Error::Validation(format!("bad word count for {}", &rec[0])))?;
        out.insert(SectionId::new(rec[0].trim()), n);
    }
    Ok(out)
}

/// Groups rows by (user, session) and then by section, in first-seen order.
pub fn group_sessions(rows: &[LabeledRow], word_counts: &BTreeMap<SectionId, usize>) -> Vec<LabeledSession> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut grouped: BTreeMap<(String, String), Vec<&LabeledRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.user_id.clone(), r.session_id.clone());
        if !grouped.contains_key(&key) {
            order.push(key.clone());
        }
        grouped.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let mut rows = grouped.remove(&key).unwrap_or_default();
            rows.sort_by_key(|r| r.t_s);
            let mut messages: Vec<LabeledMessage> = Vec::new();
            for r in rows {
                let idx = match messages.iter().position(|m| m.section_id == r.section_id) {
                    Some(i) => i,
                    None => {
                        messages.push(LabeledMessage {
                            section_id: r.section_id.clone(),
                            word_count: word_counts.get(&r.section_id).copied(),
                            true_time_s: 0.0,
                            rows: Vec::new(),
                        });
                        messages.len() - 1
                    }
                };
                messages[idx].true_time_s += r.label;
                messages[idx].rows.push((r.features, r.label));
            }
            LabeledSession { user_id: key.0, session_id: key.1, messages }
        })
        .collect()
}

/// Message-level summary of a message's rows for the sessional variants:
/// four message features then four reading-pattern features.
pub fn session_features(rows: &[FeatureVector]) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; N_SESSION_FEATURES];
    }
    let n = rows.len() as f64;
    let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / n;
    let clicked = rows.iter().any(|r| r[IDX_SECS_SINCE_MSG_CLICK] < SECONDS_CAP);
    let visible = rows.iter().filter(|r| r[IDX_WINDOW_SHARE] > 0.0).count() as f64;
    let frac_clicked = rows.iter().map(|r| r[IDX_FRAC_CLICKED]).fold(0.0, f64::max);
    vec![
        mean(IDX_WINDOW_SHARE),
        mean(IDX_CENTER_OFFSET),
        if clicked { 1.0 } else { 0.0 },
        visible,
        mean(IDX_MOVE_INF_H),
        mean(IDX_MOVE_INF_V),
        mean(IDX_SCROLL_INF),
        frac_clicked,
    ]
}
