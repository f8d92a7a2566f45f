//! Relevance marks, comments and who may see them.
//!
//! Feedback is never stored separately: it is folded from the campaign's
//! event log, so a replay always reproduces it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::{Campaign, CampaignId, Group, Recipient, RecipientId, SectionId};
use crate::error::{Error, Result};
use crate::ingest::{EventKind, InteractionEvent, LogRecord};

pub const SENDER_LABEL: &str = "from sender";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Author {
    ExplicitRecipient { alias: String },
    Sender,
}

impl Author {
    pub fn label(&self) -> &str {
        match self {
            Author::ExplicitRecipient { alias } => alias,
            Author::Sender => SENDER_LABEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub comment_id: String,
    pub campaign_id: CampaignId,
    pub section_id: SectionId,
    pub author: Author,
    pub text: String,
    pub pinned: bool,
    pub ts_ms: i64,
    /// Internal link to the author, never serialized.
    #[serde(skip)]
    pub author_recipient: Option<RecipientId>,
}

/// Relevance marks and comments of one campaign.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackState {
    pub relevance: BTreeMap<RecipientId, BTreeSet<SectionId>>,
    pub comments: Vec<Comment>,
}

impl FeedbackState {
    pub fn is_relevant(&self, recipient: &RecipientId, section: &SectionId) -> bool {
        self.relevance.get(recipient).is_some_and(|s| s.contains(section))
    }

    /// Comments left by recipients (sender comments excluded).
    pub fn recipient_comments(&self) -> impl Iterator<Item = &Comment> {
        self.comments.iter().filter(|c| c.author != Author::Sender)
    }
}

/// Folds relevance toggles (last write by timestamp wins, ties broken by log
/// order) and comments out of a campaign log.
pub fn fold_feedback(campaign_id: &CampaignId, records: &[LogRecord]) -> FeedbackState {
    let mut toggles: Vec<(i64, usize, &RecipientId, &SectionId, bool)> = Vec::new();
    let mut state = FeedbackState::default();
    let mut aliases: HashMap<&RecipientId, String> = HashMap::new();
    for (idx, rec) in records.iter().enumerate() {
        let ts = rec.event.ts_ms;
        match (&rec.event.kind, &rec.recipient_id) {
            (EventKind::RelevanceOn { section_id }, Some(rid)) => toggles.push((ts, idx, rid, section_id, true)),
            (EventKind::RelevanceOff { section_id }, Some(rid)) => toggles.push((ts, idx, rid, section_id, false)),
            (EventKind::Comment { section_id, text }, Some(rid)) => {
                let next = aliases.len() + 1;
                let alias = aliases.entry(rid).or_insert_with(|| format!("participant-{next}")).clone();
                state.comments.push(Comment {
                    comment_id: format!("cm{idx}"),
                    campaign_id: campaign_id.clone(),
                    section_id: section_id.clone(),
                    author: Author::ExplicitRecipient { alias },
                    text: text.clone(),
                    pinned: false,
                    ts_ms: ts,
                    author_recipient: Some(rid.clone()),
                });
            }
            (EventKind::SenderComment { section_id, text, pinned }, _) => state.comments.push(Comment {
                comment_id: format!("cm{idx}"),
                campaign_id: campaign_id.clone(),
                section_id: section_id.clone(),
                author: Author::Sender,
                text: text.clone(),
                pinned: *pinned,
                ts_ms: ts,
                author_recipient: None,
            }),
            _ => {}
        }
    }
    toggles.sort_by_key(|&(ts, idx, ..)| (ts, idx));
    for (_, _, rid, section, on) in toggles {
        let marks = state.relevance.entry(rid.clone()).or_default();
        if on {
            marks.insert(section.clone());
        } else {
            marks.remove(section);
        }
    }
    state.relevance.retain(|_, marks| !marks.is_empty());
    state
}

fn survey_section<'a>(campaign: &'a Campaign, section_id: &SectionId) -> Result<&'a crate::domain::Section> {
    let section = campaign.section(section_id).ok_or_else(|| Error::NotFound(format!("section {section_id}")))?;
    if !section.survey_enabled {
        return Err(Error::Validation(format!("section {section_id} has no survey")));
    }
    Ok(section)
}

/// Builds the log event for a relevance toggle after checking that the
/// recipient is in the explicit group.
pub fn set_relevance(recipient: &Recipient, campaign: &Campaign, section_id: &SectionId, on: bool, ts_ms: i64) -> Result<InteractionEvent> {
    if recipient.group != Group::Explicit {
        return Err(Error::Forbidden("only explicit recipients mark relevance".into()));
    }
    survey_section(campaign, section_id)?;
    let kind = if on {
        EventKind::RelevanceOn { section_id: section_id.clone() }
    } else {
        EventKind::RelevanceOff { section_id: section_id.clone() }
    };
    Ok(InteractionEvent { cid: None, ts_ms, kind })
}

/// Who is writing a comment.
#[derive(Debug, Clone, Copy)]
pub enum CommentAuthor<'a> {
    Recipient(&'a Recipient),
    /// The communicator or a share-link client.
    Sender,
}

/// Builds the log event for a new comment.
pub fn post_comment(
    author: CommentAuthor<'_>,
    campaign: &Campaign,
    section_id: &SectionId,
    text: &str,
    pinned: bool,
    ts_ms: i64,
) -> Result<InteractionEvent> {
    if let CommentAuthor::Recipient(r) = author {
        if r.group != Group::Explicit {
            return Err(Error::Forbidden("only explicit recipients comment".into()));
        }
        if pinned {
            return Err(Error::Forbidden("only senders pin comments".into()));
        }
    }
    if text.trim().is_empty() {
        return Err(Error::Validation("comment text is empty".into()));
    }
    let kind = match author {
        CommentAuthor::Recipient(_) => {
            survey_section(campaign, section_id)?;
            EventKind::Comment { section_id: section_id.clone(), text: text.to_owned() }
        }
        CommentAuthor::Sender => {
            campaign.section(section_id).ok_or_else(|| Error::NotFound(format!("section {section_id}")))?;
            EventKind::SenderComment { section_id: section_id.clone(), text: text.to_owned(), pinned }
        }
    };
    let event = InteractionEvent { cid: None, ts_ms, kind };
    crate::ingest::validate_event(&event)?;
    Ok(event)
}

/// Someone looking at comments.
#[derive(Debug, Clone)]
pub enum Viewer {
    Communicator,
    /// A share-link client, bound to the campaign its link was minted for.
    ShareClient {
        campaign_id: CampaignId,
    },
    Recipient {
        recipient_id: RecipientId,
        campaign_id: CampaignId,
    },
}

/// Comments on one section that `viewer` may read. Recipients only ever see
/// sender comments and their own.
pub fn visible_comments(
    viewer: &Viewer,
    campaign_id: &CampaignId,
    section_id: Option<&SectionId>,
    state: &FeedbackState,
) -> Result<Vec<Comment>> {
    let own: Option<&RecipientId> = match viewer {
        Viewer::Communicator => None,
        Viewer::ShareClient { campaign_id: c } | Viewer::Recipient { campaign_id: c, .. } if c != campaign_id => {
            return Err(Error::Forbidden("viewer is bound to another campaign".into()))
        }
        Viewer::ShareClient { .. } => None,
        Viewer::Recipient { recipient_id, .. } => Some(recipient_id),
    };
    Ok(state
        .comments
        .iter()
        .filter(|c| &c.campaign_id == campaign_id)
        .filter(|c| section_id.is_none_or(|s| &c.section_id == s))
        .filter(|c| match own {
            None => true,
            Some(me) => c.author == Author::Sender || c.author_recipient.as_ref() == Some(me),
        })
        .cloned()
        .collect())
}
