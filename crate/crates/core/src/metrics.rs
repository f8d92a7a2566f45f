//! Email- and message-level metrics, cost, group interest, and the channel
//! reputation regression.
//!
//! Awareness metrics (open, click, read, reading time) count implicit
//! recipients only; relevance and comments count explicit recipients only.
//! A metric whose denominator is empty is `None`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::{Campaign, Channel, Group, Recipient, RecipientId, SectionId, SectionKind};
use crate::error::{Error, Result};
use crate::estimation::{classify_read_level, estimate_session, ModelSpec, ReadLevel};
use crate::feedback::{Author, FeedbackState};
use crate::ingest::{active_time, ReadingSession};

/// Seconds to open and decide on an email, charged per audience member.
pub const DECISION_OVERHEAD_S: f64 = 6.0;
/// Predecessor (open, click) pairs needed before reputation is forecast.
pub const MIN_REPUTATION_HISTORY: usize = 4;
pub const EMAIL_SCOPE_ID: &str = "__email__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmailMetrics {
    pub open_rate: Option<f64>,
    pub click_rate: Option<f64>,
    pub read_rate: Option<f64>,
    pub detail_rate: Option<f64>,
    pub relevance_rate: Option<f64>,
    /// Mean active time over implicit recipients who opened.
    pub reading_time_s: Option<f64>,
    pub estimated_cost_usd: Option<f64>,
    pub n_comments: usize,
    pub reputation_change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    Unit,
    JobCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupInterest {
    pub dimension: Dimension,
    pub bucket: String,
    pub interested: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageMetrics {
    pub section_id: SectionId,
    pub click_rate: Option<f64>,
    pub read_rate: Option<f64>,
    pub detail_rate: Option<f64>,
    pub relevance_rate: Option<f64>,
    /// Mean estimated time over implicit recipients who opened the email.
    pub reading_time_s: Option<f64>,
    pub estimated_cost_usd: Option<f64>,
    pub n_comments: usize,
    pub who_interested: Vec<GroupInterest>,
}

/// Summed reading-time estimate per recipient and section, across sessions.
pub type EstimateTable = BTreeMap<RecipientId, BTreeMap<SectionId, f64>>;

/// Everything the metric functions read about one campaign.
#[derive(Debug, Clone, Copy)]
pub struct CampaignData<'a> {
    pub campaign: &'a Campaign,
    pub channel: &'a Channel,
    pub recipients: &'a [Recipient],
    pub sessions: &'a BTreeMap<RecipientId, Vec<ReadingSession>>,
    pub estimates: &'a EstimateTable,
    pub feedback: &'a FeedbackState,
}

/// Runs `model` over every session and sums per recipient and section.
pub fn estimate_campaign(
    model: &ModelSpec,
    campaign: &Campaign,
    sessions: &BTreeMap<RecipientId, Vec<ReadingSession>>,
) -> Result<EstimateTable> {
    let mut table = EstimateTable::new();
    for (rid, list) in sessions {
        let entry = table.entry(rid.clone()).or_default();
        for s in list {
            for e in estimate_session(model, s, &campaign.sections)? {
                *entry.entry(e.section_id).or_insert(0.0) += e.reading_time_s;
            }
        }
    }
    Ok(table)
}

fn rate(hit: usize, of: usize) -> Option<f64> {
    (of > 0).then(|| hit as f64 / of as f64)
}

pub fn estimated_cost(
    avg_reading_time_s: f64,
    open_rate: f64,
    audience_size: u64,
    hourly_rate_usd: f64,
    include_decision_overhead: bool,
) -> f64 {
    let audience = audience_size as f64;
    let mut seconds = avg_reading_time_s * open_rate * audience;
    if include_decision_overhead {
        seconds += DECISION_OVERHEAD_S * audience;
    }
    seconds * hourly_rate_usd / 3600.0
}

/// Words per log-second; absent for zero reading time.
pub fn read_speed(word_count: usize, reading_time_s: f64) -> Option<f64> {
    (reading_time_s > 0.0).then(|| word_count as f64 / reading_time_s.ln_1p())
}

/// Per-recipient view of one campaign.
struct Behavior<'a> {
    recipient: &'a Recipient,
    opened: bool,
    active_s: u32,
    any_click: bool,
    clicked: BTreeSet<&'a SectionId>,
    levels: BTreeMap<&'a SectionId, ReadLevel>,
    times: BTreeMap<&'a SectionId, f64>,
}

fn content_sections(campaign: &Campaign) -> impl Iterator<Item = &crate::domain::Section> {
    campaign.sections.iter().filter(|s| s.kind == SectionKind::Content)
}

fn behaviors<'a>(d: &CampaignData<'a>) -> Result<Vec<Behavior<'a>>> {
    let mut out = Vec::new();
    for r in d.recipients {
        let sessions = d.sessions.get(&r.recipient_id).map(Vec::as_slice).unwrap_or(&[]);
        let estimates = d.estimates.get(&r.recipient_id);
        let mut b = Behavior {
            recipient: r,
            opened: !sessions.is_empty(),
            active_s: sessions.iter().map(active_time).sum(),
            any_click: sessions.iter().any(|s| !s.clicks.is_empty()),
            clicked: BTreeSet::new(),
            levels: BTreeMap::new(),
            times: BTreeMap::new(),
        };
        for s in &d.campaign.sections {
            if sessions.iter().flat_map(|x| &x.clicks).any(|c| c.section_id == s.section_id) {
                b.clicked.insert(&s.section_id);
            }
            let t = estimates.and_then(|e| e.get(&s.section_id)).copied().unwrap_or(0.0);
            b.times.insert(&s.section_id, t);
            b.levels.insert(&s.section_id, classify_read_level(t, s.word_count)?);
        }
        out.push(b);
    }
    Ok(out)
}

fn is_implicit(r: &Recipient) -> bool {
    r.group == Group::Implicit
}

fn explicit_comments<'a>(fb: &'a FeedbackState, section: Option<&'a SectionId>) -> impl Iterator<Item = &'a crate::feedback::Comment> {
    fb.comments.iter().filter(move |c| matches!(c.author, Author::ExplicitRecipient { .. }) && section.is_none_or(|s| &c.section_id == s))
}

fn open_rate_of(behaviors: &[Behavior]) -> Option<f64> {
    let implicit: Vec<_> = behaviors.iter().filter(|b| is_implicit(b.recipient)).collect();
    rate(implicit.iter().filter(|b| b.opened).count(), implicit.len())
}

/// Email-level metrics; `reputation_change` is supplied by the caller since
/// it depends on the channel's history.
pub fn compute_email_metrics(d: &CampaignData, reputation_change: f64) -> Result<EmailMetrics> {
    let all = behaviors(d)?;
    let implicit: Vec<&Behavior> = all.iter().filter(|b| is_implicit(b.recipient)).collect();
    let explicit: Vec<&Behavior> = all.iter().filter(|b| !is_implicit(b.recipient)).collect();
    let n = implicit.len();
    let content: Vec<&SectionId> = content_sections(d.campaign).map(|s| &s.section_id).collect();
    let read = |b: &Behavior, detail: bool| {
        content.iter().any(|s| {
            let l = b.levels[s];
            if detail {
                l == ReadLevel::Detail
            } else {
                l.is_read()
            }
        })
    };
    let openers: Vec<&&Behavior> = implicit.iter().filter(|b| b.opened).collect();
    let reading_time_s = (!openers.is_empty()).then(|| openers.iter().map(|b| f64::from(b.active_s)).sum::<f64>() / openers.len() as f64);
    let open_rate = rate(openers.len(), n);
    let relevant =
        explicit.iter().filter(|b| d.feedback.relevance.get(&b.recipient.recipient_id).is_some_and(|set| !set.is_empty())).count();
    Ok(EmailMetrics {
        open_rate,
        click_rate: rate(implicit.iter().filter(|b| b.any_click).count(), n),
        read_rate: rate(implicit.iter().filter(|b| read(b, false)).count(), n),
        detail_rate: rate(implicit.iter().filter(|b| read(b, true)).count(), n),
        relevance_rate: rate(relevant, explicit.len()),
        reading_time_s,
        estimated_cost_usd: open_rate
            .map(|o| estimated_cost(reading_time_s.unwrap_or(0.0), o, d.channel.audience_size, d.channel.hourly_rate_usd, true)),
        n_comments: explicit_comments(d.feedback, None).count(),
        reputation_change,
    })
}

/// Metrics for every Content section, in section order.
pub fn compute_message_metrics(d: &CampaignData) -> Result<Vec<MessageMetrics>> {
    let all = behaviors(d)?;
    let implicit: Vec<&Behavior> = all.iter().filter(|b| is_implicit(b.recipient)).collect();
    let n_explicit = all.len() - implicit.len();
    let open_rate = open_rate_of(&all);
    let openers: Vec<&&Behavior> = implicit.iter().filter(|b| b.opened).collect();
    let mut out = Vec::new();
    for s in content_sections(d.campaign) {
        let id = &s.section_id;
        let n = implicit.len();
        let reading_time_s = (!openers.is_empty()).then(|| openers.iter().map(|b| b.times[id]).sum::<f64>() / openers.len() as f64);
        let relevant =
            d.feedback.relevance.iter().filter(|(rid, set)| {
                set.contains(id) && all.iter().any(|b| &b.recipient.recipient_id == *rid && !is_implicit(b.recipient))
            });
        out.push(MessageMetrics {
            section_id: id.clone(),
            click_rate: rate(implicit.iter().filter(|b| b.clicked.contains(id)).count(), n),
            read_rate: rate(implicit.iter().filter(|b| b.levels[id].is_read()).count(), n),
            detail_rate: rate(implicit.iter().filter(|b| b.levels[id] == ReadLevel::Detail).count(), n),
            relevance_rate: rate(relevant.count(), n_explicit),
            reading_time_s,
            estimated_cost_usd: open_rate
                .map(|o| estimated_cost(reading_time_s.unwrap_or(0.0), o, d.channel.audience_size, d.channel.hourly_rate_usd, false)),
            n_comments: explicit_comments(d.feedback, Some(id)).count(),
            who_interested: interest_buckets(&all, d.feedback, id),
        });
    }
    Ok(out)
}

fn interested(b: &Behavior, fb: &FeedbackState, section: &SectionId) -> bool {
    if is_implicit(b.recipient) {
        b.clicked.contains(section) || b.levels.get(section).is_some_and(|l| l.is_read())
    } else {
        fb.is_relevant(&b.recipient.recipient_id, section)
    }
}

fn interest_buckets(all: &[Behavior], fb: &FeedbackState, section: &SectionId) -> Vec<GroupInterest> {
    let mut counts: BTreeMap<(Dimension, &str), (usize, usize)> = BTreeMap::new();
    for b in all {
        let hit = interested(b, fb, section);
        for key in [(Dimension::Unit, b.recipient.unit.as_str()), (Dimension::JobCategory, b.recipient.job_category.as_str())] {
            let c = counts.entry(key).or_default();
            c.1 += 1;
            if hit {
                c.0 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|((dimension, bucket), (interested, total))| GroupInterest { dimension, bucket: bucket.to_string(), interested, total })
        .collect()
}

/// Group interest in one section over all panel recipients.
pub fn who_interested(d: &CampaignData, section: &SectionId) -> Result<Vec<GroupInterest>> {
    if d.campaign.section(section).is_none() {
        return Err(Error::NotFound(format!("section {section}")));
    }
    Ok(interest_buckets(&behaviors(d)?, d.feedback, section))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReputationPoint {
    pub seq_index: u32,
    pub open_rate: f64,
    /// Next campaign's open rate minus this one's.
    pub reputation: f64,
}

/// `opens` is `(seq_index, open_rate)` for a channel's sent campaigns.
pub fn reputation_series(opens: &[(u32, f64)]) -> Vec<ReputationPoint> {
    let mut sorted = opens.to_vec();
    sorted.sort_by_key(|(t, _)| *t);
    sorted.windows(2).map(|w| ReputationPoint { seq_index: w[0].0, open_rate: w[0].1, reputation: w[1].1 - w[0].1 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub r_squared: f64,
    /// Residuals are zero; inference is degenerate.
    pub perfect_fit: bool,
}

/// Simple regression of `y` on `x` with a constant.
pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<RegressionResult> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!("x has {} values, y has {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Sample { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("x is constant".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let df = nf - 2.0;
    let scale: f64 = y.iter().map(|v| v * v).sum::<f64>().max(1.0);
    let perfect_fit = ssr <= 1e-24 * scale;
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    if perfect_fit {
        let flat = slope.abs() <= 1e-12 * (1.0 + intercept.abs());
        let slope = if flat { 0.0 } else { slope };
        return Ok(RegressionResult {
            n,
            slope,
            intercept,
            stderr: 0.0,
            t_stat: if flat { 0.0 } else { slope.signum() * f64::INFINITY },
            p_value: if flat { 1.0 } else { 0.0 },
            ci_low: slope,
            ci_high: slope,
            r_squared,
            perfect_fit: true,
        });
    }
    let stderr = (ssr / df / sxx).sqrt();
    let t_stat = slope / stderr;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t_stat.abs()))).clamp(0.0, 1.0);
    let t_crit = dist.inverse_cdf(0.975);
    Ok(RegressionResult {
        n,
        slope,
        intercept,
        stderr,
        t_stat,
        p_value,
        ci_low: slope - t_crit * stderr,
        ci_high: slope + t_crit * stderr,
        r_squared,
        perfect_fit: false,
    })
}

/// Forecast of next open rate minus this one. `history` holds
/// `(seq_index, open_rate, click_rate)` for the channel's sent campaigns;
/// pairs up to `current` whose successor is also at or before `current`
/// train a regression of reputation on click rate.
pub fn predict_reputation_change(history: &[(u32, f64, f64)], current: u32) -> f64 {
    let mut sorted: Vec<_> = history.iter().copied().filter(|(t, _, _)| *t <= current).collect();
    sorted.sort_by_key(|(t, _, _)| *t);
    let Some(&(_, open_t, click_t)) = sorted.last().filter(|(t, _, _)| *t == current) else {
        return 0.0;
    };
    let pairs: Vec<(f64, f64)> = sorted.windows(2).map(|w| (w[0].2, w[1].1 - w[0].1)).collect();
    if pairs.len() < MIN_REPUTATION_HISTORY {
        return 0.0;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    match ols_fit(&x, &y) {
        Ok(fit) => {
            let predicted = fit.intercept + fit.slope * click_t;
            predicted.clamp(-open_t, 1.0 - open_t)
        }
        Err(_) => 0.0,
    }
}

pub const METRICS_CSV_HEADER: [&str; 10] = [
    "scope",
    "section_id",
    "open_rate",
    "click_rate",
    "read_rate",
    "detail_rate",
    "relevance_rate",
    "reading_time_s",
    "cost_usd",
    "n_comments",
];

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One `email` row then one `message` row per Content section; absent
/// values are empty cells. Returns the number of data rows.
pub fn write_metrics_csv<W: Write>(out: W, email: &EmailMetrics, messages: &[MessageMetrics]) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_CSV_HEADER)?;
    w.write_record([
        "email".to_string(),
        EMAIL_SCOPE_ID.to_string(),
        cell(email.open_rate),
        cell(email.click_rate),
        cell(email.read_rate),
        cell(email.detail_rate),
        cell(email.relevance_rate),
        cell(email.reading_time_s),
        cell(email.estimated_cost_usd),
        email.n_comments.to_string(),
    ])?;
    for m in messages {
        w.write_record([
            "message".to_string(),
            m.section_id.to_string(),
            String::new(),
            cell(m.click_rate),
            cell(m.read_rate),
            cell(m.detail_rate),
            cell(m.relevance_rate),
            cell(m.reading_time_s),
            cell(m.estimated_cost_usd),
            m.n_comments.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(1 + messages.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cost_examples() {
        assert_eq!(estimated_cost(60.0, 0.5, 1000, 40.0, true), 400.0);
        assert_eq!(estimated_cost(0.0, 0.0, 600, 40.0, true), 40.0);
        assert_abs_diff_eq!(estimated_cost(9.0, 2.0 / 3.0, 900, 40.0, false), 60.0, epsilon = 1e-9);
    }

    #[test]
    fn read_speed_examples() {
        assert_abs_diff_eq!(read_speed(100, std::f64::consts::E - 1.0).unwrap(), 100.0, epsilon = 1e-12);
        assert_eq!(read_speed(100, 0.0), None);
        assert_eq!(read_speed(0, 10.0), Some(0.0));
    }

    #[test]
    fn reputation_examples() {
        let r = reputation_series(&[(0, 0.7), (1, 0.6), (2, 0.65)]);
        assert_eq!(r.len(), 2);
        assert_abs_diff_eq!(r[0].reputation, -0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1].reputation, 0.05, epsilon = 1e-15);
        assert!(reputation_series(&[(0, 0.5)]).is_empty());
        assert!(reputation_series(&[(0, 0.5), (1, 0.5), (2, 0.5)]).iter().all(|p| p.reputation == 0.0));
    }

    #[test]
    fn ols_hand_example() {
        let r = ols_fit(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0]).unwrap();
        assert_abs_diff_eq!(r.slope, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(r.intercept, 2.2, epsilon = 1e-12);
        // ssr = 2.4, s² = 0.8, se = sqrt(0.8 / 10)
        assert_abs_diff_eq!(r.stderr, 0.08f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.t_stat, 0.6 / 0.08f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(r.p_value, 0.124, epsilon = 1e-3);
        assert_abs_diff_eq!(r.ci_low, -0.3, epsilon = 1e-3);
        assert_abs_diff_eq!(r.ci_high, 1.5, epsilon = 1e-3);
        assert!(!r.perfect_fit);
    }

    #[test]
    fn ols_degenerate_cases() {
        let flat = ols_fit(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!((flat.slope, flat.p_value), (0.0, 1.0));
        let exact = ols_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!(exact.perfect_fit);
        assert_abs_diff_eq!(exact.slope, 2.0, epsilon = 1e-12);
        assert_eq!(exact.p_value, 0.0);
        assert!(matches!(ols_fit(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(matches!(ols_fit(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Sample { needed: 3, got: 2 })));
    }

    #[test]
    fn reputation_prediction() {
        assert_eq!(predict_reputation_change(&[(0, 0.5, 0.1), (1, 0.6, 0.2)], 1), 0.0);
        // reputation = 0.5 × click exactly over 4 pairs
        let clicks = [0.1, 0.3, 0.2, 0.4, 0.4];
        let mut opens = vec![0.3];
        for c in &clicks[..4] {
            let last = *opens.last().unwrap();
            opens.push(last + 0.5 * c);
        }
        let history: Vec<_> = (0..5).map(|t| (t as u32, opens[t], clicks[t])).collect();
        assert_abs_diff_eq!(predict_reputation_change(&history, 4), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn reputation_prediction_is_clamped() {
        let clicks = [0.1, 0.2, 0.3, 0.4, 0.9];
        let opens = [0.1, 0.15, 0.25, 0.4, 0.95];
        let history: Vec<_> = (0..5).map(|t| (t as u32, opens[t], clicks[t])).collect();
        let change = predict_reputation_change(&history, 4);
        assert_abs_diff_eq!(change, 0.05, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn cost_is_linear(t in 0.0f64..600.0, o in 0.0f64..1.0, a in 1u64..10_000, r in 1.0f64..200.0, k in 1u64..5) {
            let base = estimated_cost(t, o, a, r, true);
            prop_assert!((estimated_cost(t, o, a * k, r, true) - k as f64 * base).abs() <= 1e-9 * base.max(1.0) * k as f64);
            prop_assert!((estimated_cost(t, o, a, r * k as f64, true) - k as f64 * base).abs() <= 1e-9 * base.max(1.0) * k as f64);
        }

        #[test]
        fn ols_shift_changes_intercept_only(ys in prop::collection::vec(-10.0f64..10.0, 4..20), c in -50.0f64..50.0) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
            let a = ols_fit(&xs, &ys).unwrap();
            let shifted: Vec<f64> = ys.iter().map(|y| y + c).collect();
            let b = ols_fit(&xs, &shifted).unwrap();
            prop_assert!((a.slope - b.slope).abs() < 1e-9);
            prop_assert!((b.intercept - a.intercept - c).abs() < 1e-9);
        }
    }
}
