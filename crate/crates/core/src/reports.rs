//! Dashboards, share links, peer averages and the reminder schedule.

use std::collections::BTreeMap;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Duration, NaiveTime, TimeZone, Utc};
use chrono_tz::Tz;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::delivery::{OutboundMessage, Transport};
use crate::domain::{CampaignId, Channel, Group, SectionId, SectionKind};
use crate::error::{Error, Result};
use crate::feedback::{visible_comments, Comment, Viewer};
use crate::metrics::{compute_email_metrics, compute_message_metrics, CampaignData, EmailMetrics, MessageMetrics};
use crate::store::CampaignRecord;

/// Local wall-clock hour reminders go out at.
pub const REMINDER_HOUR: u32 = 9;
pub const REMINDER_DELAY_HOURS: i64 = 24;
const SHARE_TOKEN_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DashboardKind {
    Email,
    Message,
    Report,
}

impl DashboardKind {
    pub const ALL: [DashboardKind; 3] = [DashboardKind::Email, DashboardKind::Message, DashboardKind::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            DashboardKind::Email => "email",
            DashboardKind::Message => "message",
            DashboardKind::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        DashboardKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("dashboard kind must be email, message or report, got {s:?}")))
    }
}

/// Unweighted mean of each email metric over channels' latest campaigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerAverage {
    pub channels: usize,
    pub open_rate: Option<f64>,
    pub click_rate: Option<f64>,
    pub read_rate: Option<f64>,
    pub detail_rate: Option<f64>,
    pub relevance_rate: Option<f64>,
    pub reading_time_s: Option<f64>,
    pub estimated_cost_usd: Option<f64>,
    pub n_comments: Option<f64>,
    pub reputation_change: Option<f64>,
}

pub fn peer_average(latest: &[EmailMetrics]) -> Option<PeerAverage> {
    if latest.is_empty() {
        return None;
    }
    let avg = |f: &dyn Fn(&EmailMetrics) -> Option<f64>| {
        let vals: Vec<f64> = latest.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(PeerAverage {
        channels: latest.len(),
        open_rate: avg(&|m| m.open_rate),
        click_rate: avg(&|m| m.click_rate),
        read_rate: avg(&|m| m.read_rate),
        detail_rate: avg(&|m| m.detail_rate),
        relevance_rate: avg(&|m| m.relevance_rate),
        reading_time_s: avg(&|m| m.reading_time_s),
        estimated_cost_usd: avg(&|m| m.estimated_cost_usd),
        n_comments: avg(&|m| Some(m.n_comments as f64)),
        reputation_change: avg(&|m| Some(m.reputation_change)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmailPanel {
    pub metrics: EmailMetrics,
    pub peer_average: Option<PeerAverage>,
}

/// Per-message detail shown in the report dashboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub section_id: SectionId,
    pub heading_text: String,
    /// Implicit recipients who clicked a link in the message.
    pub clicks: usize,
    /// Explicit recipients who marked the message relevant.
    pub relevant: usize,
    pub metrics: MessageMetrics,
    pub comments: Vec<Comment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum DashboardPayload {
    Email(EmailPanel),
    Message(Vec<MessageMetrics>),
    Report(Vec<ReportSection>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dashboard {
    pub kind: DashboardKind,
    pub campaign_id: CampaignId,
    pub payload: DashboardPayload,
    pub metric_tips: BTreeMap<String, String>,
}

impl Dashboard {
    /// Canonical bytes: compact JSON with sorted tip keys.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("dashboard serializes")
    }
}

/// Tooltip text per metric name.
pub fn metric_tip(metric: &str) -> Option<&'static str> {
    Some(match metric {
        "open_rate" => "Share of regular recipients who opened this email at least once.",
        "click_rate" => "Share of regular recipients who followed a link (in this message, on the message view).",
        "read_rate" => "Share of regular recipients estimated to have at least skimmed a message (this message, on the message view).",
        "detail_rate" => "Share of regular recipients estimated to have read a message in detail (this message, on the message view).",
        "relevance_rate" => "Share of evaluation recipients who marked a message as relevant (this message, on the message view).",
        "reading_time_s" => {
            "Average seconds spent reading, over regular recipients who opened the email. Idle and hidden time is not counted."
        }
        "estimated_cost_usd" => {
            "Reading time times open rate times audience size, priced at the channel's hourly rate. The email figure adds 6 seconds per audience member to open and decide."
        }
        "n_comments" => "Comments left by evaluation recipients.",
        "reputation_change" => "Forecast of the next email's open rate minus this one's, from this channel's history of open and click rates.",
        "who_interested" => {
            "For each unit and job category: regular recipients who clicked or read the message, plus evaluation recipients who marked it relevant, out of everyone in that group."
        }
        "clicks" => "Regular recipients who clicked a link in the message.",
        "relevant" => "Evaluation recipients who marked the message relevant.",
        "peer_average" => "Mean of the same metrics over every channel's latest email.",
        _ => return None,
    })
}

fn tips(kind: DashboardKind) -> BTreeMap<String, String> {
    let names: &[&str] = match kind {
        DashboardKind::Email => &[
            "open_rate",
            "click_rate",
            "read_rate",
            "detail_rate",
            "relevance_rate",
            "reading_time_s",
            "estimated_cost_usd",
            "n_comments",
            "reputation_change",
            "peer_average",
        ],
        DashboardKind::Message => &[
            "click_rate",
            "read_rate",
            "detail_rate",
            "relevance_rate",
            "reading_time_s",
            "estimated_cost_usd",
            "n_comments",
            "who_interested",
        ],
        DashboardKind::Report => &[
            "clicks",
            "relevant",
            "click_rate",
            "read_rate",
            "detail_rate",
            "relevance_rate",
            "reading_time_s",
            "estimated_cost_usd",
            "n_comments",
            "who_interested",
        ],
    };
    names.iter().map(|n| (n.to_string(), metric_tip(n).expect("tip defined").to_string())).collect()
}

/// Builds a dashboard from already-loaded campaign data.
pub fn build_dashboard(data: &CampaignData, kind: DashboardKind, reputation_change: f64, peer: Option<PeerAverage>) -> Result<Dashboard> {
    let campaign = data.campaign;
    if !campaign.is_sent() {
        return Err(Error::State(format!("campaign {} has not been sent", campaign.campaign_id)));
    }
    let payload = match kind {
        DashboardKind::Email => {
            DashboardPayload::Email(EmailPanel { metrics: compute_email_metrics(data, reputation_change)?, peer_average: peer })
        }
        DashboardKind::Message => DashboardPayload::Message(compute_message_metrics(data)?),
        DashboardKind::Report => {
            let metrics = compute_message_metrics(data)?;
            let mut rows = Vec::new();
            for m in metrics {
                let section = campaign.section(&m.section_id).expect("metrics come from sections");
                debug_assert_eq!(section.kind, SectionKind::Content);
                let clicks = data
                    .recipients
                    .iter()
                    .filter(|r| r.group == Group::Implicit)
                    .filter(|r| {
                        data.sessions
                            .get(&r.recipient_id)
                            .is_some_and(|ss| ss.iter().flat_map(|s| &s.clicks).any(|c| c.section_id == m.section_id))
                    })
                    .count();
                let relevant = data
                    .recipients
                    .iter()
                    .filter(|r| r.group == Group::Explicit && data.feedback.is_relevant(&r.recipient_id, &m.section_id))
                    .count();
                let comments = visible_comments(&Viewer::Communicator, &campaign.campaign_id, Some(&m.section_id), data.feedback)?;
                rows.push(ReportSection {
                    section_id: m.section_id.clone(),
                    heading_text: section.heading_text.clone(),
                    clicks,
                    relevant,
                    metrics: m,
                    comments,
                });
            }
            DashboardPayload::Report(rows)
        }
    };
    Ok(Dashboard { kind, campaign_id: campaign.campaign_id.clone(), payload, metric_tips: tips(kind) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareReport {
    pub share_token: String,
    pub kind: DashboardKind,
    pub campaign_id: CampaignId,
    pub notes: String,
    pub created_at: DateTime<Utc>,
}

pub fn new_share_token() -> String {
    let mut bytes = [0u8; SHARE_TOKEN_BYTES];
    rand::rng().fill_bytes(&mut bytes);
    URL_SAFE_NO_PAD.encode(bytes)
}

pub fn share_dashboard(record: &mut CampaignRecord, kind: DashboardKind, notes: &str, now: DateTime<Utc>) -> Result<ShareReport> {
    if !record.campaign.is_sent() {
        return Err(Error::State(format!("campaign {} has not been sent", record.campaign.campaign_id)));
    }
    let share = ShareReport {
        share_token: new_share_token(),
        kind,
        campaign_id: record.campaign.campaign_id.clone(),
        notes: notes.to_string(),
        created_at: now,
    };
    record.shares.push(share.clone());
    Ok(share)
}

/// First local 09:00 at or after `sent_at` + 24 h.
pub fn next_reminder_time(sent_at: DateTime<Utc>, zone: Tz) -> DateTime<Utc> {
    let earliest = sent_at + Duration::hours(REMINDER_DELAY_HOURS);
    let mut date = earliest.with_timezone(&zone).date_naive();
    let nine = NaiveTime::from_hms_opt(REMINDER_HOUR, 0, 0).expect("valid time");
    loop {
        // a 09:00 that falls in a DST gap does not exist; try the next day
        if let Some(local) = zone.from_local_datetime(&date.and_time(nine)).earliest() {
            let at = local.with_timezone(&Utc);
            if at >= earliest {
                return at;
            }
        }
        date = date.succ_opt().expect("date in range");
    }
}

pub fn dashboard_url(base_url: &str, campaign: &CampaignId, kind: DashboardKind) -> String {
    format!("{}/api/campaigns/{}/dashboard?kind={}", base_url.trim_end_matches('/'), campaign, kind.as_str())
}

/// Sends the one reminder for a campaign once it is due. Returns the
/// message when one went out.
pub fn send_reminder(
    record: &mut CampaignRecord,
    channel: &Channel,
    base_url: &str,
    now: DateTime<Utc>,
    transport: &dyn Transport,
) -> Result<Option<OutboundMessage>> {
    let Some(sent_at) = record.campaign.sent_at else {
        return Ok(None);
    };
    if record.reminder_sent_at.is_some() || now < next_reminder_time(sent_at, channel.tz()) {
        return Ok(None);
    }
    let id = &record.campaign.campaign_id;
    let links: String = DashboardKind::ALL
        .iter()
        .map(|k| format!("<li><a href=\"{0}\">{1} dashboard</a></li>", dashboard_url(base_url, id, *k), k.as_str()))
        .collect();
    let message = OutboundMessage {
        recipient_id: None,
        to: channel.sender_identity.clone(),
        from: channel.sender_identity.clone(),
        subject: format!("Results are in: {}", record.campaign.subject),
        html_body: format!(
            "<html><body><p>Reader results for \"{}\" are ready.</p><ul>{links}</ul></body></html>",
            html_escape::encode_text(&record.campaign.subject)
        ),
    };
    transport.deliver(&message)?;
    record.reminder_sent_at = Some(now);
    Ok(Some(message))
}
