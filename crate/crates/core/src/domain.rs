//! Channels, recipients, campaigns and their sections.

use std::fmt;
use std::io::Read;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default hourly rate used to dollarize recipient time.
pub const DEFAULT_HOURLY_RATE_USD: f64 = 40.0;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(ChannelId);
string_id!(CampaignId);
string_id!(RecipientId);
string_id!(SectionId);

/// Returns true when `id` is safe to use as a path component in the data
/// directory and inside tracking tokens.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// A recurring sender identity whose emails recipients recognize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub channel_id: ChannelId,
    pub name: String,
    /// The FROM field used on every outbound email.
    pub sender_identity: String,
    pub brand: String,
    /// Size of the real mailing list; costs scale with this, not the panel.
    pub audience_size: u64,
    /// IANA zone name, e.g. `America/Chicago`.
    pub timezone: String,
    pub hourly_rate_usd: f64,
    /// Communicator that owns the channel.
    #[serde(default)]
    pub owner: String,
}

impl Channel {
    pub fn validate(&self) -> Result<()> {
        if !is_valid_id(self.channel_id.as_str()) {
            return Err(Error::Validation(format!("invalid channel id {:?}", self.channel_id.as_str())));
        }
        if !(self.hourly_rate_usd > 0.0 && self.hourly_rate_usd.is_finite()) {
            return Err(Error::Validation("hourly_rate_usd must be > 0".into()));
        }
        self.timezone.parse::<chrono_tz::Tz>().map_err(|_| Error::Validation(format!("unknown timezone {:?}", self.timezone)))?;
        Ok(())
    }

    pub fn tz(&self) -> chrono_tz::Tz {
        self.timezone.parse().unwrap_or(chrono_tz::UTC)
    }
}

/// Which half of the panel a recipient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Reads the email as they normally would; feeds awareness metrics.
    Implicit,
    /// Marks relevance and leaves comments.
    Explicit,
}

impl Group {
    fn other(self) -> Group {
        match self {
            Group::Implicit => Group::Explicit,
            Group::Explicit => Group::Implicit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipient {
    pub recipient_id: RecipientId,
    pub email_address: String,
    pub unit: String,
    pub job_category: String,
    pub group: Group,
}

impl Recipient {
    /// Stable id derived from the normalized email address.
    pub fn id_for_email(email: &str) -> RecipientId {
        let digest = Sha256::digest(email.trim().to_ascii_lowercase().as_bytes());
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        RecipientId(format!("r{hex}"))
    }
}

/// Splits recipients into the two groups with a seeded Fisher-Yates shuffle
/// followed by alternating assignment. The result is aligned with `ids`.
pub fn assign_groups(ids: &[RecipientId], seed: u64) -> Vec<Group> {
    assign_groups_from(ids, seed, Group::Implicit)
}

/// Same as [`assign_groups`], but the alternation starts with `first`. Used
/// when topping up a panel whose existing groups are unbalanced.
pub fn assign_groups_from(ids: &[RecipientId], seed: u64, first: Group) -> Vec<Group> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut groups = vec![first; ids.len()];
    for (position, &idx) in order.iter().enumerate() {
        groups[idx] = if position % 2 == 0 { first } else { first.other() };
    }
    groups
}

/// One row of the recipient import file.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct RecipientRow {
    pub email: String,
    pub unit: String,
    pub job_category: String,
}

/// Parses the `email,unit,job_category` import format.
pub fn parse_recipient_csv<R: Read>(input: R) -> Result<Vec<RecipientRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let expected = ["email", "unit", "job_category"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Validation(format!(
            "recipient csv header must be `email,unit,job_category`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: RecipientRow = record?;
        if !row.email.contains('@') {
            return Err(Error::Validation(format!("invalid email {:?}", row.email)));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Title,
    Content,
}

/// One message (or bare heading) inside a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub section_id: SectionId,
    pub kind: SectionKind,
    pub heading_text: String,
    pub body_html: String,
    pub plain_text: String,
    pub word_count: usize,
    pub survey_enabled: bool,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: CampaignId,
    pub channel_id: ChannelId,
    pub subject: String,
    pub raw_html: String,
    pub sections: Vec<Section>,
    pub sent_at: Option<DateTime<Utc>>,
    /// Position of this campaign among the channel's sent campaigns.
    pub seq_index: Option<u32>,
}

impl Campaign {
    pub fn section(&self, id: &SectionId) -> Option<&Section> {
        self.sections.iter().find(|s| &s.section_id == id)
    }

    /// Sections that collect metrics and feedback.
    pub fn survey_sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| s.survey_enabled)
    }

    pub fn is_sent(&self) -> bool {
        self.sent_at.is_some()
    }
}
