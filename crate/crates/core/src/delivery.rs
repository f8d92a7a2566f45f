//! Recipient pages, outbound emails and the send step.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use html_escape::{encode_double_quoted_attribute, encode_text};
use serde::{Deserialize, Serialize};

use crate::domain::{Campaign, Channel, Group, Recipient, RecipientId};
use crate::error::{Error, Result};
use crate::feedback::{visible_comments, Author, FeedbackState, Viewer};
use crate::token::{mint_token, SigningKey, TrackingToken};

pub const TRACKER_SRC: &str = "/static/tracker.js";
/// Markers delimiting the newsletter body inside a rendered page.
pub const BODY_OPEN_MARKER: &str = "<!--ct:body-->";
pub const BODY_CLOSE_MARKER: &str = "<!--/ct:body-->";
pub const SECTION_CLOSE: &str = "</div><!--/ct-section-->";

/// Renders the page a recipient sees when following their personal link.
///
/// Every section is wrapped in one element with a stable id so the tracker
/// can report geometry. Explicit recipients additionally get a relevance
/// toggle and a comment box under each survey section, along with the
/// comments they are allowed to see.
pub fn render_recipient_page(
    campaign: &Campaign,
    recipient: &Recipient,
    token: &TrackingToken,
    feedback: &FeedbackState,
) -> Result<String> {
    if token.campaign_id != campaign.campaign_id || token.recipient_id != recipient.recipient_id {
        return Err(Error::Auth("token does not belong to this page".into()));
    }
    let group = match recipient.group {
        Group::Implicit => "implicit",
        Group::Explicit => "explicit",
    };
    let mut page = String::with_capacity(campaign.raw_html.len() + 1024);
    let _ = write!(
        page,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\
         <meta name=\"viewport\" content=\"width=device-width, initial-scale=1\">\
         <title>{}</title></head>\n<body data-ct-group=\"{group}\" data-ct-token=\"{}\">\n{BODY_OPEN_MARKER}",
        encode_text(&campaign.subject),
        encode_double_quoted_attribute(&token.token),
    );
    let viewer = Viewer::Recipient { recipient_id: recipient.recipient_id.clone(), campaign_id: campaign.campaign_id.clone() };
    for section in &campaign.sections {
        let id = encode_double_quoted_attribute(section.section_id.as_str());
        let _ = write!(page, "<div class=\"ct-section\" id=\"ct-{id}\" data-ct-section=\"{id}\">");
        page.push_str(&section.body_html);
        if recipient.group == Group::Explicit && section.survey_enabled {
            let pressed = feedback.is_relevant(&recipient.recipient_id, &section.section_id);
            let _ = write!(
                page,
                "<div class=\"ct-survey\" data-ct-section=\"{id}\">\
                 <button type=\"button\" class=\"ct-relevance\" data-ct-section=\"{id}\" aria-pressed=\"{pressed}\">Relevant to me</button>"
            );
            let mut comments = visible_comments(&viewer, &campaign.campaign_id, Some(&section.section_id), feedback)?;
            comments.sort_by_key(|c| (!c.pinned, c.ts_ms));
            if !comments.is_empty() {
                page.push_str("<ul class=\"ct-comments\">");
                for c in comments {
                    let class = match c.author {
                        Author::Sender => "ct-comment-item ct-from-sender",
                        Author::ExplicitRecipient { .. } => "ct-comment-item",
                    };
                    let label = match &c.author {
                        Author::Sender => c.author.label().to_owned(),
                        Author::ExplicitRecipient { .. } => "you".to_owned(),
                    };
                    let _ = write!(
                        page,
                        "<li class=\"{class}\"><span class=\"ct-comment-author\">{}</span> {}</li>",
                        encode_text(&label),
                        encode_text(&c.text)
                    );
                }
                page.push_str("</ul>");
            }
            let _ =
                write!(page, "<textarea class=\"ct-comment\" data-ct-section=\"{id}\" placeholder=\"Leave a comment\"></textarea></div>");
        }
        page.push_str(SECTION_CLOSE);
    }
    let _ = write!(page, "{BODY_CLOSE_MARKER}\n<script src=\"{TRACKER_SRC}\" defer></script>\n</body></html>\n");
    Ok(page)
}

/// An email ready to be handed to a transport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundMessage {
    pub recipient_id: Option<RecipientId>,
    pub to: String,
    pub from: String,
    pub subject: String,
    pub html_body: String,
}

impl OutboundMessage {
    /// Headers, a blank line, then the html body.
    pub fn to_eml(&self) -> String {
        format!(
            "From: {}\r\nTo: {}\r\nSubject: {}\r\nMIME-Version: 1.0\r\nContent-Type: text/html; charset=utf-8\r\n\r\n{}",
            self.from, self.to, self.subject, self.html_body
        )
    }
}

/// Case-insensitive set of addresses that must not receive a campaign.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionList(BTreeSet<String>);

impl ExclusionList {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(emails: I) -> Self {
        Self(emails.into_iter().map(|e| e.as_ref().trim().to_ascii_lowercase()).collect())
    }

    pub fn contains(&self, email: &str) -> bool {
        self.0.contains(&email.trim().to_ascii_lowercase())
    }
}

pub fn tracked_link(base_url: &str, token: &TrackingToken) -> String {
    format!("{}/t/{}", base_url.trim_end_matches('/'), token.token)
}

/// Builds the personal email for one recipient: the campaign's subject,
/// the channel's sender identity, and a single tracked link.
pub fn build_outbound_email(
    campaign: &Campaign,
    channel: &Channel,
    recipient: &Recipient,
    key: &SigningKey,
    base_url: &str,
    exclusions: &ExclusionList,
) -> Result<(OutboundMessage, TrackingToken)> {
    if exclusions.contains(&recipient.email_address) {
        return Err(Error::Forbidden(format!("{} is excluded", recipient.recipient_id)));
    }
    let token = mint_token(&campaign.campaign_id, &recipient.recipient_id, key)?;
    let link = tracked_link(base_url, &token);
    let html_body = format!(
        "<!DOCTYPE html>\n<html><body>\n<p>{}</p>\n<h1>{}</h1>\n<p><a href=\"{}\">Open this email</a></p>\n</body></html>\n",
        encode_text(&channel.brand),
        encode_text(&campaign.subject),
        encode_double_quoted_attribute(&link),
    );
    let message = OutboundMessage {
        recipient_id: Some(recipient.recipient_id.clone()),
        to: recipient.email_address.clone(),
        from: channel.sender_identity.clone(),
        subject: campaign.subject.clone(),
        html_body,
    };
    Ok((message, token))
}

/// Something that can deliver an email.
pub trait Transport: Send + Sync {
    fn deliver(&self, message: &OutboundMessage) -> Result<()>;
}

/// Writes one `.eml` file per message into a directory.
#[derive(Debug, Clone)]
pub struct FileDropTransport {
    dir: PathBuf,
}

impl FileDropTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &std::path::Path {
        &self.dir
    }
}

impl Transport for FileDropTransport {
    fn deliver(&self, message: &OutboundMessage) -> Result<()> {
        let stem = match &message.recipient_id {
            Some(rid) => rid.to_string(),
            None => {
                let safe: String = message.to.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
                format!("to-{safe}")
            }
        };
        let mut path = self.dir.join(format!("{stem}.eml"));
        let mut n = 1;
        while path.exists() {
            path = self.dir.join(format!("{stem}-{n}.eml"));
            n += 1;
        }
        std::fs::write(path, message.to_eml())?;
        Ok(())
    }
}

/// Plain SMTP relay, e.g. a local MTA or a test sink. TLS is left to the
/// relay.
pub struct SmtpTransport {
    inner: lettre::SmtpTransport,
}

impl SmtpTransport {
    pub fn new(host: &str, port: u16) -> Self {
        Self { inner: lettre::SmtpTransport::builder_dangerous(host).port(port).build() }
    }
}

impl Transport for SmtpTransport {
    fn deliver(&self, message: &OutboundMessage) -> Result<()> {
        use lettre::message::header::ContentType;
        use lettre::Transport as _;
        let parse =
            |addr: &str| addr.parse::<lettre::message::Mailbox>().map_err(|e| Error::Transport(format!("bad address {addr:?}: {e}")));
        let email = lettre::Message::builder()
            .from(parse(&message.from)?)
            .to(parse(&message.to)?)
            .subject(&message.subject)
            .header(ContentType::TEXT_HTML)
            .body(message.html_body.clone())
            .map_err(|e| Error::Transport(e.to_string()))?;
        self.inner.send(&email).map_err(|e| Error::Transport(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedDelivery {
    pub recipient_id: RecipientId,
    pub reason: String,
}

/// Outcome of a send.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendReport {
    pub campaign_id: crate::domain::CampaignId,
    pub sent_at: DateTime<Utc>,
    pub sent: Vec<RecipientId>,
    pub failed: Vec<FailedDelivery>,
    pub excluded: Vec<RecipientId>,
}

/// Sends a campaign once. Individual delivery failures are recorded in the
/// report; a second send is refused.
#[allow(clippy::too_many_arguments)]
pub fn send_campaign(
    campaign: &mut Campaign,
    channel: &Channel,
    recipients: &[Recipient],
    exclusions: &ExclusionList,
    key: &SigningKey,
    base_url: &str,
    transport: &dyn Transport,
    seq_index: u32,
    now: DateTime<Utc>,
) -> Result<SendReport> {
    if campaign.is_sent() {
        return Err(Error::State(format!("campaign {} was already sent", campaign.campaign_id)));
    }
    if campaign.sections.is_empty() {
        return Err(Error::State(format!("campaign {} has no sections", campaign.campaign_id)));
    }
    let mut ordered: Vec<&Recipient> = recipients.iter().collect();
    ordered.sort_by(|a, b| a.recipient_id.cmp(&b.recipient_id));
    let mut report =
        SendReport { campaign_id: campaign.campaign_id.clone(), sent_at: now, sent: Vec::new(), failed: Vec::new(), excluded: Vec::new() };
    for recipient in ordered {
        let message = match build_outbound_email(campaign, channel, recipient, key, base_url, exclusions) {
            Ok((message, _)) => message,
            Err(Error::Forbidden(_)) => {
                report.excluded.push(recipient.recipient_id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        match transport.deliver(&message) {
            Ok(()) => report.sent.push(recipient.recipient_id.clone()),
            Err(e) => {
                log::warn!("delivery to {} failed: {e}", recipient.recipient_id);
                report.failed.push(FailedDelivery { recipient_id: recipient.recipient_id.clone(), reason: e.to_string() });
            }
        }
    }
    campaign.sent_at = Some(now);
    campaign.seq_index = Some(seq_index);
    Ok(report)
}
