//! Stateless, MAC-signed tracking tokens.
//!
//! A token carries its own `(campaign, recipient)` pair plus an HMAC-SHA256
//! tag over both, so recipients can open their personal link on any device
//! without a server-side session table.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::domain::{is_valid_id, CampaignId, RecipientId};
use crate::error::{Error, Result};

type HmacSha256 = Hmac<Sha256>;

pub const MIN_KEY_LEN: usize = 32;

const TOKEN_DOMAIN: &[u8] = b"commtool/link/v1";

/// Secret used to sign tracking tokens.
#[derive(Clone)]
pub struct SigningKey(Vec<u8>);

impl SigningKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.len() < MIN_KEY_LEN {
            return Err(Error::Config(format!("signing key must be at least {MIN_KEY_LEN} bytes, got {}", bytes.len())));
        }
        Ok(Self(bytes))
    }

    fn mac(&self, campaign: &str, recipient: &str) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(TOKEN_DOMAIN);
        mac.update(&[0]);
        mac.update(campaign.as_bytes());
        mac.update(&[0]);
        mac.update(recipient.as_bytes());
        mac
    }
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackingToken {
    pub token: String,
    pub campaign_id: CampaignId,
    pub recipient_id: RecipientId,
}

/// Mints the personal link token for one recipient of one campaign.
pub fn mint_token(campaign_id: &CampaignId, recipient_id: &RecipientId, key: &SigningKey) -> Result<TrackingToken> {
    for id in [campaign_id.as_str(), recipient_id.as_str()] {
        if !is_valid_id(id) {
            return Err(Error::Validation(format!("id {id:?} cannot be tokenized")));
        }
    }
    let tag = key.mac(campaign_id.as_str(), recipient_id.as_str()).finalize().into_bytes();
    let payload = format!("{campaign_id}.{recipient_id}");
    let token = format!("{}.{}", URL_SAFE_NO_PAD.encode(payload.as_bytes()), URL_SAFE_NO_PAD.encode(tag));
    Ok(TrackingToken { token, campaign_id: campaign_id.clone(), recipient_id: recipient_id.clone() })
}

/// Checks the signature and returns the ids the token was minted for.
///
/// Campaign existence is checked by the caller that owns the store; this
/// function only fails with [`Error::Auth`].
pub fn verify_token(token: &str, key: &SigningKey) -> Result<(CampaignId, RecipientId)> {
    let bad = || Error::Auth("invalid tracking token".into());
    let (payload_b64, tag_b64) = token.split_once('.').ok_or_else(bad)?;
    let payload = URL_SAFE_NO_PAD.decode(payload_b64).map_err(|_| bad())?;
    let tag = URL_SAFE_NO_PAD.decode(tag_b64).map_err(|_| bad())?;
    let payload = String::from_utf8(payload).map_err(|_| bad())?;
    let (campaign, recipient) = payload.split_once('.').ok_or_else(bad)?;
    if !is_valid_id(campaign) || !is_valid_id(recipient) {
        return Err(bad());
    }
    key.mac(campaign, recipient).verify_slice(&tag).map_err(|_| bad())?;
    Ok((CampaignId::new(campaign), RecipientId::new(recipient)))
}

/// Equality that takes the same time wherever the inputs differ.
pub fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    use subtle::ConstantTimeEq;
    a.len() == b.len() && bool::from(a.ct_eq(b))
}
