//! Command-line surface. Every command works directly on the data
//! directory, so nothing needs the server running except `serve` itself.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use commtool_core::delivery::{FileDropTransport, SmtpTransport, Transport};
use commtool_core::domain::{CampaignId, ChannelId, DEFAULT_HOURLY_RATE_USD};
use commtool_core::estimation::dataset::{group_sessions, read_dataset_csv, read_word_counts, write_dataset_csv};
use commtool_core::estimation::{cross_validate, CvReport, EvalReport, ModelSpec, TrainConfig, Variant};
use commtool_core::metrics::{EmailMetrics, MessageMetrics};
use commtool_core::reports::{Dashboard, DashboardKind, DashboardPayload};
use commtool_core::service::{CommTool, NewChannel, ServiceConfig};
use commtool_core::store::Store;
use commtool_core::token::SigningKey;
use commtool_core::{Error, Result};

use crate::sim::{simulate_campaign, simulate_dataset, DatasetConfig, Profile, SimRecipient};

#[derive(Debug, Parser)]
#[command(name = "commtool", version, about = "Evaluate organizational newsletters", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    #[arg(long, global = true, env = "COMMTOOL_DATA_DIR", default_value = "./data")]
    pub data_dir: PathBuf,
    /// Owner the commands act as.
    #[arg(long, global = true, default_value = commtool_api::DEFAULT_OWNER)]
    pub owner: String,
    /// Token signing secret, at least 32 bytes.
    #[arg(long, global = true, env = "COMMTOOL_SECRET", hide_env_values = true)]
    pub secret: Option<String>,
    /// Public origin written into tracked links.
    #[arg(long, global = true, env = "COMMTOOL_BASE_URL", default_value = "http://localhost:8080")]
    pub base_url: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Channel(ChannelCmd),
    #[command(subcommand)]
    Recipients(RecipientsCmd),
    #[command(subcommand)]
    Campaign(CampaignCmd),
    /// Print a dashboard.
    Report {
        campaign: String,
        #[arg(long, default_value = "email")]
        kind: String,
        /// Canonical JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write the metrics CSV.
    Export {
        campaign: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Leave-one-user-out evaluation of an estimator on a labeled dataset.
    Eval {
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: PathBuf,
        /// `section_id,word_count` file; defaults to `<dataset>.words.csv`.
        #[arg(long)]
        words: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        positive_weight: Option<f64>,
    },
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Run the HTTP server.
    Serve {
        #[arg(long, env = "COMMTOOL_PORT", default_value_t = commtool_api::DEFAULT_PORT)]
        port: u16,
        /// `token` or `owner:token,owner:token`.
        #[arg(long, env = "COMMTOOL_BEARER", hide_env_values = true)]
        bearer: String,
        #[arg(long, env = "COMMTOOL_TZ", default_value = "UTC")]
        timezone: String,
        #[arg(long, env = "COMMTOOL_HOURLY_RATE", default_value_t = DEFAULT_HOURLY_RATE_USD)]
        hourly_rate: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum ChannelCmd {
    New {
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        name: String,
        #[arg(long)]
        sender: String,
        #[arg(long)]
        audience: u64,
        #[arg(long)]
        brand: Option<String>,
        #[arg(long)]
        timezone: Option<String>,
        #[arg(long)]
        hourly_rate: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum RecipientsCmd {
    /// Import `email,unit,job_category` rows into a channel's panel.
    Import {
        #[arg(long)]
        channel: String,
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    File,
    Smtp,
}

#[derive(Debug, Subcommand)]
pub enum CampaignCmd {
    New {
        #[arg(long)]
        channel: String,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        html: PathBuf,
    },
    Send {
        campaign: String,
        #[arg(long, value_enum, default_value = "file")]
        transport: TransportKind,
        /// Drop directory for the file transport; defaults to `<data-dir>/outbox`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "localhost")]
        smtp_host: String,
        #[arg(long, default_value_t = 25)]
        smtp_port: u16,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimulateCmd {
    /// Synthetic panel behavior for a sent campaign, ingested into its log.
    Campaign {
        campaign: String,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write ground-truth reading times as CSV.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Labeled estimator dataset plus its word-count sidecar.
    Dataset {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        users: usize,
        #[arg(long, default_value_t = 6)]
        sessions: usize,
        /// Messages per session as `min,max`.
        #[arg(long, value_delimiter = ',', default_values_t = [DatasetConfig::default().messages[0], DatasetConfig::default().messages[1]])]
        messages: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Global {
    fn tool(&self) -> Result<CommTool> {
        let secret = self.secret.as_deref().ok_or_else(|| Error::Config("set --secret or COMMTOOL_SECRET".into()))?;
        let config = ServiceConfig { base_url: self.base_url.clone(), ..ServiceConfig::default() };
        Ok(CommTool::new(Store::open(&self.data_dir)?, SigningKey::new(secret.as_bytes().to_vec())?, config))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `<stem>.words.csv` next to the dataset.
pub fn words_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("words.csv")
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Channel(ChannelCmd::New { id, name, sender, audience, brand, timezone, hourly_rate }) => {
            let spec = NewChannel {
                channel_id: id,
                name,
                sender_identity: sender,
                brand,
                audience_size: audience,
                timezone,
                hourly_rate_usd: hourly_rate,
            };
            let ch = g.tool()?.create_channel(&g.owner, spec)?;
            writeln!(out, "{}", ch.channel_id)?;
        }
        Command::Recipients(RecipientsCmd::Import { channel, file, seed }) => {
            let csv = std::fs::read(&file)?;
            let r = g.tool()?.import_recipients(&g.owner, &ChannelId::new(channel), &csv, seed)?;
            writeln!(out, "added {} updated {} total {} (implicit {}, explicit {})", r.added, r.updated, r.total, r.implicit, r.explicit)?;
        }
        Command::Campaign(CampaignCmd::New { channel, id, subject, html }) => {
            let html = std::fs::read_to_string(&html)?;
            let c = g.tool()?.create_campaign(&g.owner, &ChannelId::new(channel), id.as_deref(), &subject, &html)?;
            writeln!(out, "{}", c.campaign_id)?;
            for s in &c.sections {
                writeln!(out, "  {}  {:?}  {} words  {}", s.section_id, s.kind, s.word_count, s.heading_text)?;
            }
        }
        Command::Campaign(CampaignCmd::Send { campaign, transport, out: drop_dir, smtp_host, smtp_port }) => {
            let transport: Box<dyn Transport> = match transport {
                TransportKind::File => Box::new(FileDropTransport::new(drop_dir.unwrap_or_else(|| g.data_dir.join("outbox")))?),
                TransportKind::Smtp => Box::new(SmtpTransport::new(&smtp_host, smtp_port)),
            };
            let r = g.tool()?.send(&g.owner, &CampaignId::new(campaign), transport.as_ref(), Utc::now())?;
            writeln!(out, "sent {} failed {} excluded {}", r.sent.len(), r.failed.len(), r.excluded.len())?;
            for f in &r.failed {
                writeln!(out, "  failed {}: {}", f.recipient_id, f.reason)?;
            }
        }
        Command::Report { campaign, kind, json } => {
            let d = g.tool()?.dashboard(&g.owner, &CampaignId::new(campaign), DashboardKind::parse(&kind)?)?;
            if json {
                out.write_all(&d.canonical_json())?;
                writeln!(out)?;
            } else {
                print_dashboard(&d, out)?;
            }
        }
        Command::Export { campaign, out: path } => {
            let tool = g.tool()?;
            let id = CampaignId::new(campaign);
            match path {
                Some(p) => {
                    let n = tool.export_csv(&g.owner, &id, create(&p)?)?;
                    writeln!(out, "wrote {n} rows to {}", p.display())?;
                }
                None => {
                    tool.export_csv(&g.owner, &id, &mut *out)?;
                }
            }
        }
        Command::Eval { model, dataset, words, seed, max_epochs, positive_weight } => {
            let variant = Variant::parse(&model)?;
            let rows = read_dataset_csv(File::open(&dataset)?)?;
            let words = read_word_counts(File::open(words.unwrap_or_else(|| words_path(&dataset)))?)?;
            let sessions = group_sessions(&rows, &words);
            let mut config = TrainConfig { seed, ..TrainConfig::default() };
            if let Some(e) = max_epochs {
                config.max_epochs = e;
            }
            if let Some(w) = positive_weight {
                config.positive_weight = w;
            }
            let report = cross_validate(&ModelSpec::new(variant, seed)?, &sessions, &config)?;
            print_eval(variant, &report, out)?;
        }
        Command::Simulate(SimulateCmd::Campaign { campaign, profile, seed, truth }) => {
            let profile = match profile {
                Some(p) => serde_json::from_slice::<Profile>(&std::fs::read(p)?)?,
                None => Profile::default(),
            };
            let tool = g.tool()?;
            let id = CampaignId::new(campaign);
            let c = tool.campaign(&g.owner, &id)?;
            let sent_at = c.sent_at.ok_or_else(|| Error::State(format!("campaign {id} has not been sent")))?;
            let panel = tool.channel(&g.owner, &c.channel_id)?.recipients;
            let recipients: Vec<SimRecipient> =
                panel.iter().map(|r| SimRecipient { recipient_id: r.recipient_id.to_string(), group: r.group }).collect();
            let start = (sent_at + Duration::hours(1)).timestamp_millis();
            let sim = simulate_campaign(&c.sections, &recipients, &profile, seed, start);
            let mut ingested = 0;
            for log in &sim.logs {
                let token = tool.tracking_token(&g.owner, &id, &log.recipient_id.as_str().into())?;
                for batch in log.batches() {
                    ingested += tool.record_events(&token.token, &batch)?;
                }
            }
            if let Some(p) = truth {
                let mut w = csv::Writer::from_writer(create(&p)?);
                for row in &sim.truth {
                    w.serialize(row)?;
                }
                w.flush()?;
            }
            let opened = sim.logs.iter().filter(|l| !l.events.is_empty()).count();
            writeln!(out, "{opened} of {} recipients opened; {ingested} events ingested", recipients.len())?;
        }
        Command::Simulate(SimulateCmd::Dataset { out: path, users, sessions, messages, seed }) => {
            let [lo, hi] = messages[..] else {
                return Err(Error::Validation("--messages takes min,max".into()));
            };
            let cfg = DatasetConfig { users, sessions_per_user: sessions, messages: [lo, hi], seed, ..DatasetConfig::default() };
            let (rows, words) = simulate_dataset(&cfg)?;
            write_dataset_csv(create(&path)?, &rows)?;
            let mut w = csv::Writer::from_writer(create(&words_path(&path))?);
            w.write_record(["section_id", "word_count"])?;
            for (id, n) in &words {
                w.write_record([id.as_str(), &n.to_string()])?;
            }
            w.flush()?;
            writeln!(out, "{} rows, {} messages", rows.len(), words.len())?;
        }
        Command::Serve { port, bearer, timezone, hourly_rate } => {
            timezone.parse::<chrono_tz::Tz>().map_err(|_| Error::Config(format!("unknown timezone {timezone:?}")))?;
            let secret = g.secret.clone().ok_or_else(|| Error::Config("set --secret or COMMTOOL_SECRET".into()))?;
            let config = commtool_api::Config {
                port,
                data_dir: g.data_dir.clone(),
                secret: secret.into_bytes(),
                bearers: commtool_api::parse_bearers(&bearer)?,
                timezone,
                hourly_rate_usd: hourly_rate,
                base_url: format!("http://localhost:{port}"),
            };
            let tool = config.tool()?;
            let transport: Arc<dyn Transport> = Arc::new(FileDropTransport::new(g.data_dir.join("outbox"))?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(commtool_api::serve(config, tool, transport))?;
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn email_rows(m: &EmailMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("open_rate", fmt_opt(m.open_rate, 3)),
        ("click_rate", fmt_opt(m.click_rate, 3)),
        ("read_rate", fmt_opt(m.read_rate, 3)),
        ("detail_rate", fmt_opt(m.detail_rate, 3)),
        ("relevance_rate", fmt_opt(m.relevance_rate, 3)),
        ("reading_time_s", fmt_opt(m.reading_time_s, 1)),
        ("estimated_cost_usd", fmt_opt(m.estimated_cost_usd, 2)),
        ("n_comments", m.n_comments.to_string()),
        ("reputation_change", format!("{:+.3}", m.reputation_change)),
    ]
}

fn message_table(rows: &[MessageMetrics], out: &mut dyn Write) -> io::Result<()> {
    writeln!(
        out,
        "{:<14} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9} {:>8}",
        "section", "click", "read", "detail", "relevance", "time_s", "cost_usd", "comments"
    )?;
    for m in rows {
        writeln!(
            out,
            "{:<14} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9} {:>8}",
            m.section_id.as_str(),
            fmt_opt(m.click_rate, 3),
            fmt_opt(m.read_rate, 3),
            fmt_opt(m.detail_rate, 3),
            fmt_opt(m.relevance_rate, 3),
            fmt_opt(m.reading_time_s, 1),
            fmt_opt(m.estimated_cost_usd, 2),
            m.n_comments
        )?;
    }
    Ok(())
}

pub fn print_dashboard(d: &Dashboard, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{} dashboard for {}", d.kind.as_str(), d.campaign_id)?;
    match &d.payload {
        DashboardPayload::Email(panel) => {
            let peer: BTreeMap<&str, String> = panel
                .peer_average
                .as_ref()
                .map(|p| {
                    [
                        ("open_rate", fmt_opt(p.open_rate, 3)),
                        ("click_rate", fmt_opt(p.click_rate, 3)),
                        ("read_rate", fmt_opt(p.read_rate, 3)),
                        ("detail_rate", fmt_opt(p.detail_rate, 3)),
                        ("relevance_rate", fmt_opt(p.relevance_rate, 3)),
                        ("reading_time_s", fmt_opt(p.reading_time_s, 1)),
                    ]
                    .into_iter()
                    .collect()
                })
                .unwrap_or_default();
            writeln!(out, "{:<20} {:>10} {:>10}", "metric", "value", "peers")?;
            for (name, value) in email_rows(&panel.metrics) {
                writeln!(out, "{:<20} {:>10} {:>10}", name, value, peer.get(name).map_or("", |s| s.as_str()))?;
            }
        }
        DashboardPayload::Message(rows) => message_table(rows, out)?,
        DashboardPayload::Report(sections) => {
            for s in sections {
                writeln!(out, "\n{} {}", s.section_id, s.heading_text)?;
                writeln!(out, "  clicks {}  relevant {}  time_s {}", s.clicks, s.relevant, fmt_opt(s.metrics.reading_time_s, 1))?;
                for gi in &s.metrics.who_interested {
                    writeln!(out, "  {:?} {}: {}/{}", gi.dimension, gi.bucket, gi.interested, gi.total)?;
                }
                for c in &s.comments {
                    writeln!(out, "  > {}", c.text)?;
                }
            }
        }
    }
    Ok(())
}

pub fn print_eval(variant: Variant, report: &CvReport, out: &mut dyn Write) -> io::Result<()> {
    let header: Vec<&str> = EvalReport::default().fields().iter().map(|(n, _)| *n).collect();
    write!(out, "{:<10}", "fold")?;
    for h in &header {
        write!(out, " {h:>16}")?;
    }
    writeln!(out)?;
    let line = |out: &mut dyn Write, label: &str, r: &EvalReport| -> io::Result<()> {
        write!(out, "{label:<10}")?;
        for (_, v) in r.fields() {
            write!(out, " {:>16}", fmt_opt(v, 4))?;
        }
        writeln!(out)
    };
    for f in &report.folds {
        line(out, &f.test_user, &f.report)?;
    }
    line(out, "mean", &report.mean)?;
    writeln!(out, "model {variant:?}")
}
