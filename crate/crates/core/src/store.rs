//! Flat-file persistence.
//!
//! ```text
//! {data_dir}/{channel_id}/meta.json                  channel + panel
//! {data_dir}/{channel_id}/{campaign_id}/meta.json    campaign + shares
//! {data_dir}/{channel_id}/{campaign_id}/events.jsonl append-only log
//! ```
//!
//! Each campaign log has exactly one writer at a time; readers see complete
//! lines only.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::delivery::ExclusionList;
use crate::domain::{is_valid_id, Campaign, CampaignId, Channel, ChannelId, Recipient};
use crate::error::{Error, Result};
use crate::ingest::LogRecord;
use crate::reports::ShareReport;

pub const DATA_DIR_ENV: &str = "COMMTOOL_DATA_DIR";
const META_FILE: &str = "meta.json";
const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub channel: Channel,
    pub recipients: Vec<Recipient>,
    #[serde(default)]
    pub exclusions: ExclusionList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRecord {
    pub campaign: Campaign,
    #[serde(default)]
    pub shares: Vec<ShareReport>,
    #[serde(default)]
    pub reminder_sent_at: Option<DateTime<Utc>>,
}

struct LogWriter {
    file: File,
    next_offset: u64,
}

impl LogWriter {
    /// Opens a log for appending. A torn final line left by a crash is cut
    /// off so new lines start on a clean boundary.
    fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let mut content = Vec::new();
        file.read_to_end(&mut content)?;
        let complete = content.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < content.len() {
            log::warn!("{}: dropping torn trailing line ({} bytes)", path.display(), content.len() - complete);
            file.set_len(complete as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        let next_offset = content[..complete].iter().filter(|&&b| b == b'\n').count() as u64;
        Ok(Self { file, next_offset })
    }

    fn append(&mut self, records: &[LogRecord]) -> Result<Vec<u64>> {
        let mut buf = String::new();
        for rec in records {
            buf.push_str(&rec.to_json_line());
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.sync_data()?;
        let first = self.next_offset;
        self.next_offset += records.len() as u64;
        Ok((first..self.next_offset).collect())
    }
}

pub struct Store {
    root: PathBuf,
    campaign_index: RwLock<HashMap<CampaignId, ChannelId>>,
    writers: Mutex<HashMap<CampaignId, Arc<Mutex<LogWriter>>>>,
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec_pretty(value)?;
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn checked(id: &str) -> Result<&str> {
    if is_valid_id(id) {
        Ok(id)
    } else {
        Err(Error::Validation(format!("invalid id {id:?}")))
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut index = HashMap::new();
        for channel_dir in fs::read_dir(&root)? {
            let channel_dir = channel_dir?;
            if !channel_dir.file_type()?.is_dir() {
                continue;
            }
            let channel_id = ChannelId(channel_dir.file_name().to_string_lossy().into_owned());
            for campaign_dir in fs::read_dir(channel_dir.path())? {
                let campaign_dir = campaign_dir?;
                if campaign_dir.file_type()?.is_dir() && campaign_dir.path().join(META_FILE).exists() {
                    let campaign_id = CampaignId(campaign_dir.file_name().to_string_lossy().into_owned());
                    index.insert(campaign_id, channel_id.clone());
                }
            }
        }
        Ok(Self { root, campaign_index: RwLock::new(index), writers: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn channel_dir(&self, id: &ChannelId) -> Result<PathBuf> {
        Ok(self.root.join(checked(id.as_str())?))
    }

    fn campaign_dir(&self, id: &CampaignId) -> Result<PathBuf> {
        let channel = self.channel_of(id)?;
        Ok(self.channel_dir(&channel)?.join(checked(id.as_str())?))
    }

    pub fn channel_of(&self, campaign: &CampaignId) -> Result<ChannelId> {
        self.campaign_index.read().get(campaign).cloned().ok_or_else(|| Error::NotFound(format!("campaign {campaign}")))
    }

    pub fn channel_exists(&self, id: &ChannelId) -> bool {
        self.channel_dir(id).is_ok_and(|d| d.join(META_FILE).exists())
    }

    pub fn campaign_exists(&self, id: &CampaignId) -> bool {
        self.campaign_index.read().contains_key(id)
    }

    pub fn save_channel(&self, record: &ChannelRecord) -> Result<()> {
        let dir = self.channel_dir(&record.channel.channel_id)?;
        fs::create_dir_all(&dir)?;
        write_json_atomic(&dir.join(META_FILE), record)
    }

    pub fn load_channel(&self, id: &ChannelId) -> Result<ChannelRecord> {
        let path = self.channel_dir(id)?.join(META_FILE);
        if !path.exists() {
            return Err(Error::NotFound(format!("channel {id}")));
        }
        read_json(&path)
    }

    pub fn list_channels(&self) -> Result<Vec<ChannelId>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() && entry.path().join(META_FILE).exists() {
                ids.push(ChannelId(entry.file_name().to_string_lossy().into_owned()));
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn save_campaign(&self, record: &CampaignRecord) -> Result<()> {
        let campaign = &record.campaign;
        if !self.channel_exists(&campaign.channel_id) {
            return Err(Error::NotFound(format!("channel {}", campaign.channel_id)));
        }
        let dir = self.channel_dir(&campaign.channel_id)?.join(checked(campaign.campaign_id.as_str())?);
        fs::create_dir_all(&dir)?;
        write_json_atomic(&dir.join(META_FILE), record)?;
        self.campaign_index.write().insert(campaign.campaign_id.clone(), campaign.channel_id.clone());
        Ok(())
    }

    pub fn load_campaign(&self, id: &CampaignId) -> Result<CampaignRecord> {
        read_json(&self.campaign_dir(id)?.join(META_FILE))
    }

    /// Campaigns of a channel in id order.
    pub fn list_campaigns(&self, channel: &ChannelId) -> Vec<CampaignId> {
        let mut ids: Vec<CampaignId> = self.campaign_index.read().iter().filter(|(_, ch)| *ch == channel).map(|(c, _)| c.clone()).collect();
        ids.sort();
        ids
    }

    /// Every known campaign in id order.
    pub fn all_campaigns(&self) -> Vec<CampaignId> {
        let mut ids: Vec<CampaignId> = self.campaign_index.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn writer(&self, campaign: &CampaignId) -> Result<Arc<Mutex<LogWriter>>> {
        let mut writers = self.writers.lock();
        if let Some(w) = writers.get(campaign) {
            return Ok(w.clone());
        }
        let path = self.campaign_dir(campaign)?.join(EVENTS_FILE);
        let w = Arc::new(Mutex::new(LogWriter::open(&path)?));
        writers.insert(campaign.clone(), w.clone());
        Ok(w)
    }

    /// Appends a batch with one write and one fsync; returns the offsets.
    pub fn append_events(&self, campaign: &CampaignId, records: &[LogRecord]) -> Result<Vec<u64>> {
        let writer = self.writer(campaign)?;
        let mut guard = writer.lock();
        guard.append(records)
    }

    pub fn append_event(&self, campaign: &CampaignId, record: &LogRecord) -> Result<u64> {
        Ok(self.append_events(campaign, std::slice::from_ref(record))?[0])
    }

    /// All complete events in append order. A torn trailing line is skipped
    /// with a warning; a corrupt line in the middle is an error.
    pub fn load_events(&self, campaign: &CampaignId) -> Result<Vec<LogRecord>> {
        let path = self.campaign_dir(campaign)?.join(EVENTS_FILE);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut reader = BufReader::new(file);
        let mut records = Vec::new();
        let mut line = String::new();
        let mut line_no = 0usize;
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                log::warn!("{}: skipping torn trailing line {line_no}", path.display());
                break;
            }
            let rec = LogRecord::from_json_line(line.trim_end())
                .map_err(|e| Error::Validation(format!("{}: corrupt line {line_no}: {e}", path.display())))?;
            records.push(rec);
        }
        Ok(records)
    }
}
