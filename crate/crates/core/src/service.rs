//! The operations the HTTP surface and the CLI share, on top of the store.
//!
//! Communicator calls carry the owner name they authenticated as; recipient
//! calls carry a tracking token; share calls carry a share token.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::delivery::{render_recipient_page, send_campaign, OutboundMessage, SendReport, Transport};
use crate::domain::{
    assign_groups_from, is_valid_id, parse_recipient_csv, Campaign, CampaignId, Channel, ChannelId, Group, Recipient, RecipientId,
    SectionId, DEFAULT_HOURLY_RATE_USD,
};
use crate::error::{Error, Result};
use crate::estimation::ModelSpec;
use crate::feedback::{fold_feedback, post_comment, set_relevance, CommentAuthor, FeedbackState};
use crate::ingest::{parse_batch, sessionize_log, EventKind, InteractionEvent, LogRecord, ReadingSession};
use crate::metrics::{
    compute_email_metrics, estimate_campaign, predict_reputation_change, write_metrics_csv, CampaignData, EmailMetrics, EstimateTable,
};
use crate::reports::{build_dashboard, peer_average, send_reminder, share_dashboard, Dashboard, DashboardKind, ShareReport};
use crate::splitter::{apply_edits, split_html, EditOp, MAX_HTML_BYTES};
use crate::store::{CampaignRecord, ChannelRecord, Store};
use crate::token::{mint_token, verify_token, SigningKey, TrackingToken};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Public origin used in tracked links and reminder emails.
    pub base_url: String,
    /// Zone for channels created without one.
    pub default_timezone: String,
    pub default_hourly_rate_usd: f64,
    /// Reading-time estimator behind every message metric.
    pub model: ModelSpec,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            base_url: "http://localhost:8080".into(),
            default_timezone: "UTC".into(),
            default_hourly_rate_usd: DEFAULT_HOURLY_RATE_USD,
            model: ModelSpec::new(crate::estimation::Variant::Baseline1, 0).expect("baseline spec"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NewChannel {
    #[serde(default)]
    pub channel_id: Option<String>,
    pub name: String,
    pub sender_identity: String,
    #[serde(default)]
    pub brand: Option<String>,
    pub audience_size: u64,
    #[serde(default)]
    pub timezone: Option<String>,
    #[serde(default)]
    pub hourly_rate_usd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub added: usize,
    pub updated: usize,
    pub total: usize,
    pub implicit: usize,
    pub explicit: usize,
}

/// Events of one campaign as held in memory, plus the dedupe index.
#[derive(Default)]
struct CampaignLog {
    records: Vec<LogRecord>,
    seen: HashSet<(RecipientId, u64)>,
}

impl CampaignLog {
    fn from_records(records: Vec<LogRecord>) -> Self {
        let seen = records.iter().filter_map(|r| Some((r.recipient_id.clone()?, r.event.cid?))).collect();
        CampaignLog { records, seen }
    }
}

/// Sessions, estimates and feedback derived from one campaign's log.
struct Derived {
    record: CampaignRecord,
    channel: ChannelRecord,
    sessions: BTreeMap<RecipientId, Vec<ReadingSession>>,
    estimates: EstimateTable,
    feedback: FeedbackState,
}

impl Derived {
    fn data(&self) -> CampaignData<'_> {
        CampaignData {
            campaign: &self.record.campaign,
            channel: &self.channel.channel,
            recipients: &self.channel.recipients,
            sessions: &self.sessions,
            estimates: &self.estimates,
            feedback: &self.feedback,
        }
    }
}

pub struct CommTool {
    store: Store,
    key: SigningKey,
    config: ServiceConfig,
    logs: Mutex<HashMap<CampaignId, Arc<Mutex<CampaignLog>>>>,
    /// Serializes read-modify-write of meta files.
    meta_lock: Mutex<()>,
}

fn random_id(prefix: &str) -> String {
    let mut bytes = [0u8; 6];
    rand::rng().fill_bytes(&mut bytes);
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    format!("{prefix}{hex}")
}

impl CommTool {
    pub fn new(store: Store, key: SigningKey, config: ServiceConfig) -> Self {
        CommTool { store, key, config, logs: Mutex::new(HashMap::new()), meta_lock: Mutex::new(()) }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn owned_channel(&self, owner: &str, id: &ChannelId) -> Result<ChannelRecord> {
        let record = self.store.load_channel(id)?;
        if record.channel.owner != owner {
            return Err(Error::Forbidden(format!("channel {id} belongs to another communicator")));
        }
        Ok(record)
    }

    fn owned_campaign(&self, owner: &str, id: &CampaignId) -> Result<(CampaignRecord, ChannelRecord)> {
        let record = self.store.load_campaign(id)?;
        let channel = self.owned_channel(owner, &record.campaign.channel_id)?;
        Ok((record, channel))
    }

    pub fn create_channel(&self, owner: &str, spec: NewChannel) -> Result<Channel> {
        let _guard = self.meta_lock.lock();
        let channel_id = ChannelId(spec.channel_id.unwrap_or_else(|| random_id("ch")));
        if self.store.channel_exists(&channel_id) {
            return Err(Error::State(format!("channel {channel_id} already exists")));
        }
        let channel = Channel {
            channel_id,
            brand: spec.brand.unwrap_or_else(|| spec.name.clone()),
            name: spec.name,
            sender_identity: spec.sender_identity,
            audience_size: spec.audience_size,
            timezone: spec.timezone.unwrap_or_else(|| self.config.default_timezone.clone()),
            hourly_rate_usd: spec.hourly_rate_usd.unwrap_or(self.config.default_hourly_rate_usd),
            owner: owner.to_string(),
        };
        channel.validate()?;
        self.store.save_channel(&ChannelRecord { channel: channel.clone(), recipients: Vec::new(), exclusions: Default::default() })?;
        Ok(channel)
    }

    pub fn channel(&self, owner: &str, id: &ChannelId) -> Result<ChannelRecord> {
        self.owned_channel(owner, id)
    }

    /// Adds or updates panel members from `email,unit,job_category` CSV.
    /// Known addresses keep their group; new ones are split so the two
    /// groups stay as even as possible.
    pub fn import_recipients(&self, owner: &str, id: &ChannelId, csv: &[u8], seed: u64) -> Result<ImportReport> {
        let _guard = self.meta_lock.lock();
        let mut record = self.owned_channel(owner, id)?;
        let rows = parse_recipient_csv(csv)?;
        let mut index: HashMap<RecipientId, usize> =
            record.recipients.iter().enumerate().map(|(i, r)| (r.recipient_id.clone(), i)).collect();
        let mut fresh: Vec<Recipient> = Vec::new();
        let mut fresh_index: HashMap<RecipientId, usize> = HashMap::new();
        let mut updated = 0;
        for row in rows {
            let rid = Recipient::id_for_email(&row.email);
            if let Some(&i) = index.get(&rid) {
                let r = &mut record.recipients[i];
                r.unit = row.unit;
                r.job_category = row.job_category;
                updated += 1;
            } else if let Some(&i) = fresh_index.get(&rid) {
                fresh[i].unit = row.unit;
                fresh[i].job_category = row.job_category;
            } else {
                fresh_index.insert(rid.clone(), fresh.len());
                fresh.push(Recipient {
                    recipient_id: rid,
                    email_address: row.email.trim().to_string(),
                    unit: row.unit,
                    job_category: row.job_category,
                    group: Group::Implicit,
                });
            }
        }
        let implicit = record.recipients.iter().filter(|r| r.group == Group::Implicit).count();
        let first = if implicit * 2 > record.recipients.len() { Group::Explicit } else { Group::Implicit };
        let ids: Vec<RecipientId> = fresh.iter().map(|r| r.recipient_id.clone()).collect();
        for (r, g) in fresh.iter_mut().zip(assign_groups_from(&ids, seed, first)) {
            r.group = g;
        }
        let added = fresh.len();
        for r in fresh {
            index.insert(r.recipient_id.clone(), record.recipients.len());
            record.recipients.push(r);
        }
        if record.recipients.len() as u64 > record.channel.audience_size {
            return Err(Error::Validation(format!(
                "panel of {} exceeds audience size {}",
                record.recipients.len(),
                record.channel.audience_size
            )));
        }
        self.store.save_channel(&record)?;
        let implicit = record.recipients.iter().filter(|r| r.group == Group::Implicit).count();
        Ok(ImportReport { added, updated, total: record.recipients.len(), implicit, explicit: record.recipients.len() - implicit })
    }

    pub fn create_campaign(
        &self,
        owner: &str,
        channel_id: &ChannelId,
        campaign_id: Option<&str>,
        subject: &str,
        html: &str,
    ) -> Result<Campaign> {
        if html.len() > MAX_HTML_BYTES {
            return Err(Error::Validation(format!("html exceeds {MAX_HTML_BYTES} bytes")));
        }
        let _guard = self.meta_lock.lock();
        self.owned_channel(owner, channel_id)?;
        let campaign_id = CampaignId(campaign_id.map(str::to_string).unwrap_or_else(|| random_id("c")));
        if !is_valid_id(campaign_id.as_str()) {
            return Err(Error::Validation(format!("invalid campaign id {campaign_id:?}")));
        }
        if self.store.campaign_exists(&campaign_id) {
            return Err(Error::State(format!("campaign {campaign_id} already exists")));
        }
        let campaign = Campaign {
            campaign_id,
            channel_id: channel_id.clone(),
            subject: subject.to_string(),
            raw_html: html.to_string(),
            sections: split_html(html),
            sent_at: None,
            seq_index: None,
        };
        self.store.save_campaign(&CampaignRecord { campaign: campaign.clone(), shares: Vec::new(), reminder_sent_at: None })?;
        Ok(campaign)
    }

    pub fn campaign(&self, owner: &str, id: &CampaignId) -> Result<Campaign> {
        Ok(self.owned_campaign(owner, id)?.0.campaign)
    }

    pub fn edit_sections(&self, owner: &str, id: &CampaignId, ops: &[EditOp]) -> Result<Campaign> {
        let _guard = self.meta_lock.lock();
        let (mut record, _) = self.owned_campaign(owner, id)?;
        if record.campaign.is_sent() {
            return Err(Error::State(format!("campaign {id} was already sent")));
        }
        record.campaign.sections = apply_edits(&record.campaign.sections, ops)?;
        self.store.save_campaign(&record)?;
        Ok(record.campaign)
    }

    pub fn send(&self, owner: &str, id: &CampaignId, transport: &dyn Transport, now: DateTime<Utc>) -> Result<SendReport> {
        let _guard = self.meta_lock.lock();
        let (mut record, channel) = self.owned_campaign(owner, id)?;
        let seq = self
            .store
            .list_campaigns(&channel.channel.channel_id)
            .iter()
            .filter(|c| *c != id)
            .filter_map(|c| self.store.load_campaign(c).ok())
            .filter(|r| r.campaign.is_sent())
            .count() as u32;
        let report = send_campaign(
            &mut record.campaign,
            &channel.channel,
            &channel.recipients,
            &channel.exclusions,
            &self.key,
            &self.config.base_url,
            transport,
            seq,
            now,
        )?;
        self.store.save_campaign(&record)?;
        Ok(report)
    }

    /// Token for one recipient, for tools that drive recipient endpoints
    /// without reading the delivered email.
    pub fn tracking_token(&self, owner: &str, campaign: &CampaignId, recipient: &RecipientId) -> Result<TrackingToken> {
        let (_, channel) = self.owned_campaign(owner, campaign)?;
        if !channel.recipients.iter().any(|r| &r.recipient_id == recipient) {
            return Err(Error::NotFound(format!("recipient {recipient}")));
        }
        mint_token(campaign, recipient, &self.key)
    }

    fn log(&self, id: &CampaignId) -> Result<Arc<Mutex<CampaignLog>>> {
        let mut logs = self.logs.lock();
        if let Some(l) = logs.get(id) {
            return Ok(l.clone());
        }
        let l = Arc::new(Mutex::new(CampaignLog::from_records(self.store.load_events(id)?)));
        logs.insert(id.clone(), l.clone());
        Ok(l)
    }

    /// Resolves a tracking token to a sent campaign and a current panel member.
    fn recipient_context(&self, token: &str) -> Result<(CampaignRecord, Recipient)> {
        let (cid, rid) = verify_token(token, &self.key)?;
        let not_live = || Error::Auth("tracking token does not match a sent campaign".into());
        let record = self.store.load_campaign(&cid).map_err(|_| not_live())?;
        if !record.campaign.is_sent() {
            return Err(not_live());
        }
        let channel = self.store.load_channel(&record.campaign.channel_id)?;
        let recipient = channel.recipients.into_iter().find(|r| r.recipient_id == rid).ok_or_else(not_live)?;
        Ok((record, recipient))
    }

    /// Checks a tracking token without doing anything else.
    pub fn verify_tracking(&self, token: &str) -> Result<()> {
        self.recipient_context(token).map(|_| ())
    }

    fn append(&self, campaign: &CampaignId, recipient: &Recipient, events: Vec<InteractionEvent>) -> Result<usize> {
        let log = self.log(campaign)?;
        let mut log = log.lock();
        let mut fresh = Vec::new();
        for event in events {
            if let Some(cid) = event.cid {
                if !log.seen.insert((recipient.recipient_id.clone(), cid)) {
                    continue;
                }
            }
            fresh.push(LogRecord { recipient_id: Some(recipient.recipient_id.clone()), event });
        }
        if fresh.is_empty() {
            return Ok(0);
        }
        if let Err(e) = self.store.append_events(campaign, &fresh) {
            for r in &fresh {
                if let Some(cid) = r.event.cid {
                    log.seen.remove(&(recipient.recipient_id.clone(), cid));
                }
            }
            return Err(e);
        }
        let n = fresh.len();
        log.records.extend(fresh);
        Ok(n)
    }

    /// Ingests a tracker batch. Returns how many events were new; repeated
    /// client ids are acknowledged and dropped.
    pub fn record_events(&self, token: &str, body: &[u8]) -> Result<usize> {
        let (record, recipient) = self.recipient_context(token)?;
        let events = parse_batch(body)?;
        let campaign = &record.campaign;
        for e in &events {
            match &e.kind {
                EventKind::RelevanceOn { section_id } | EventKind::RelevanceOff { section_id } => {
                    set_relevance(&recipient, campaign, section_id, true, e.ts_ms)?;
                }
                EventKind::Comment { section_id, text } => {
                    post_comment(CommentAuthor::Recipient(&recipient), campaign, section_id, text, false, e.ts_ms)?;
                }
                k if !k.is_client_kind() => {
                    return Err(Error::Validation(format!("`{}` events cannot come from a tracked page", k.wire_name())));
                }
                _ => {}
            }
        }
        self.append(&campaign.campaign_id, &recipient, events)
    }

    pub fn set_relevance(&self, token: &str, section: &SectionId, on: bool, ts_ms: i64) -> Result<()> {
        let (record, recipient) = self.recipient_context(token)?;
        let event = set_relevance(&recipient, &record.campaign, section, on, ts_ms)?;
        self.append(&record.campaign.campaign_id, &recipient, vec![event])?;
        Ok(())
    }

    pub fn recipient_comment(&self, token: &str, section: &SectionId, text: &str, ts_ms: i64) -> Result<()> {
        let (record, recipient) = self.recipient_context(token)?;
        let event = post_comment(CommentAuthor::Recipient(&recipient), &record.campaign, section, text, false, ts_ms)?;
        self.append(&record.campaign.campaign_id, &recipient, vec![event])?;
        Ok(())
    }

    /// The personal page behind a tracked link.
    pub fn recipient_page(&self, token: &str) -> Result<String> {
        let (record, recipient) = self.recipient_context(token)?;
        let id = &record.campaign.campaign_id;
        let feedback = {
            let log = self.log(id)?;
            let log = log.lock();
            fold_feedback(id, &log.records)
        };
        let token = TrackingToken { token: token.to_string(), campaign_id: id.clone(), recipient_id: recipient.recipient_id.clone() };
        render_recipient_page(&record.campaign, &recipient, &token, &feedback)
    }

    /// Every stored event of a campaign, in append order.
    pub fn events(&self, owner: &str, id: &CampaignId) -> Result<Vec<LogRecord>> {
        self.owned_campaign(owner, id)?;
        Ok(self.log(id)?.lock().records.clone())
    }

    fn derive(&self, record: CampaignRecord, channel: ChannelRecord) -> Result<Derived> {
        let id = record.campaign.campaign_id.clone();
        let (sessions, feedback) = {
            let log = self.log(&id)?;
            let log = log.lock();
            (sessionize_log(&id, &log.records), fold_feedback(&id, &log.records))
        };
        let estimates = estimate_campaign(&self.config.model, &record.campaign, &sessions)?;
        Ok(Derived { record, channel, sessions, estimates, feedback })
    }

    fn derive_id(&self, id: &CampaignId) -> Result<Derived> {
        let record = self.store.load_campaign(id)?;
        let channel = self.store.load_channel(&record.campaign.channel_id)?;
        self.derive(record, channel)
    }

    /// Forecast reputation change of a sent campaign from its channel's
    /// history of open and click rates.
    fn reputation_change(&self, campaign: &Campaign) -> Result<f64> {
        let Some(current) = campaign.seq_index else {
            return Ok(0.0);
        };
        let mut history = Vec::new();
        for c in self.store.list_campaigns(&campaign.channel_id) {
            let d = self.derive_id(&c)?;
            let Some(seq) = d.record.campaign.seq_index else { continue };
            let m = compute_email_metrics(&d.data(), 0.0)?;
            if let (Some(open), Some(click)) = (m.open_rate, m.click_rate) {
                history.push((seq, open, click));
            }
        }
        Ok(predict_reputation_change(&history, current))
    }

    fn email_metrics(&self, d: &Derived) -> Result<EmailMetrics> {
        compute_email_metrics(&d.data(), self.reputation_change(&d.record.campaign)?)
    }

    /// Latest sent campaign of every channel.
    fn latest_campaigns(&self) -> Result<Vec<CampaignId>> {
        let mut latest: BTreeMap<ChannelId, (u32, CampaignId)> = BTreeMap::new();
        for id in self.store.all_campaigns() {
            let record = self.store.load_campaign(&id)?;
            if let Some(seq) = record.campaign.seq_index {
                let slot = latest.entry(record.campaign.channel_id.clone()).or_insert((seq, id.clone()));
                if seq > slot.0 {
                    *slot = (seq, id);
                }
            }
        }
        Ok(latest.into_values().map(|(_, id)| id).collect())
    }

    fn dashboard_for(&self, d: &Derived, kind: DashboardKind) -> Result<Dashboard> {
        let (reputation, peer) = if kind == DashboardKind::Email {
            let mut peers = Vec::new();
            for id in self.latest_campaigns()? {
                peers.push(self.email_metrics(&self.derive_id(&id)?)?);
            }
            (self.reputation_change(&d.record.campaign)?, peer_average(&peers))
        } else {
            (0.0, None)
        };
        build_dashboard(&d.data(), kind, reputation, peer)
    }

    pub fn dashboard(&self, owner: &str, id: &CampaignId, kind: DashboardKind) -> Result<Dashboard> {
        let (record, channel) = self.owned_campaign(owner, id)?;
        self.dashboard_for(&self.derive(record, channel)?, kind)
    }

    pub fn share(&self, owner: &str, id: &CampaignId, kind: DashboardKind, notes: &str, now: DateTime<Utc>) -> Result<ShareReport> {
        let _guard = self.meta_lock.lock();
        let (mut record, _) = self.owned_campaign(owner, id)?;
        let share = share_dashboard(&mut record, kind, notes, now)?;
        self.store.save_campaign(&record)?;
        Ok(share)
    }

    pub fn find_share(&self, share_token: &str) -> Result<ShareReport> {
        for id in self.store.all_campaigns() {
            let record = self.store.load_campaign(&id)?;
            if let Some(s) = record.shares.iter().find(|s| crate::token::constant_time_eq(s.share_token.as_bytes(), share_token.as_bytes()))
            {
                return Ok(s.clone());
            }
        }
        Err(Error::NotFound("share link".into()))
    }

    /// The shared dashboard, exactly as its kind and campaign were fixed
    /// when the link was made.
    pub fn resolve_share(&self, share_token: &str) -> Result<(ShareReport, Dashboard)> {
        let share = self.find_share(share_token)?;
        let d = self.derive_id(&share.campaign_id)?;
        let dashboard = self.dashboard_for(&d, share.kind)?;
        Ok((share, dashboard))
    }

    /// A comment from a share-link holder, shown as coming from the sender.
    pub fn share_comment(&self, share_token: &str, section: &SectionId, text: &str, pinned: bool, ts_ms: i64) -> Result<()> {
        let share = self.find_share(share_token)?;
        let record = self.store.load_campaign(&share.campaign_id)?;
        let event = post_comment(CommentAuthor::Sender, &record.campaign, section, text, pinned, ts_ms)?;
        let log = self.log(&share.campaign_id)?;
        let mut log = log.lock();
        let r = LogRecord { recipient_id: None, event };
        self.store.append_event(&share.campaign_id, &r)?;
        log.records.push(r);
        Ok(())
    }

    /// Writes the metrics CSV; returns the number of data rows.
    pub fn export_csv<W: Write>(&self, owner: &str, id: &CampaignId, out: W) -> Result<usize> {
        let (record, channel) = self.owned_campaign(owner, id)?;
        if !record.campaign.is_sent() {
            return Err(Error::State(format!("campaign {id} has not been sent")));
        }
        let d = self.derive(record, channel)?;
        let email = self.email_metrics(&d)?;
        let messages = crate::metrics::compute_message_metrics(&d.data())?;
        write_metrics_csv(out, &email, &messages)
    }

    /// One scheduler pass: sends every reminder that is due.
    pub fn run_reminders(&self, now: DateTime<Utc>, transport: &dyn Transport) -> Result<Vec<OutboundMessage>> {
        let _guard = self.meta_lock.lock();
        let mut sent = Vec::new();
        for id in self.store.all_campaigns() {
            let mut record = self.store.load_campaign(&id)?;
            let channel = self.store.load_channel(&record.campaign.channel_id)?;
            match send_reminder(&mut record, &channel.channel, &self.config.base_url, now, transport) {
                Ok(Some(m)) => {
                    self.store.save_campaign(&record)?;
                    sent.push(m);
                }
                Ok(None) => {}
                Err(e) => log::warn!("reminder for {id} failed: {e}"),
            }
        }
        Ok(sent)
    }
}
