//! Subcommands that compose runs: mode comparison, export and deploy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use dsm_cloud::{export_dataset, write_export, SessionFilter};
use dsm_core::ProcessingMode;
use dsm_quality::SessionRecord;
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, Result};
use crate::report::{Latency, RunReport, Traffic};
use crate::run::{run_session, write_json, RunOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: u8,
    /// Data traffic of every node.
    pub data: Traffic,
    /// Everything the nodes sent, control traffic included.
    pub total: Traffic,
    /// Values per data message, by channel.
    pub values_per_message: BTreeMap<String, f64>,
    /// Data traffic by channel.
    pub channels: BTreeMap<String, Traffic>,
    pub gateway_records_processed: u64,
    pub latency: Option<Latency>,
}

pub fn mode_row(mode: u8, r: &RunReport) -> ModeRow {
    let mut channels = BTreeMap::new();
    for n in r.nodes.values() {
        for (c, t) in &n.data_by_channel {
            channels.insert(c.clone(), t.clone());
        }
    }
    let mut data = Traffic::default();
    for t in r.data_by_mode.values() {
        data.messages += t.messages;
        data.values += t.values;
        data.wire_bytes += t.wire_bytes;
        data.envelope_bytes += t.envelope_bytes;
        data.cpu += t.cpu;
        data.radio += t.radio;
    }
    ModeRow {
        mode,
        values_per_message: channels
            .iter()
            .filter(|(_, t)| t.messages > 0)
            .map(|(c, t)| (c.clone(), t.values as f64 / t.messages as f64))
            .collect(),
        channels,
        data,
        total: r.total(),
        gateway_records_processed: r.pipeline.records_processed,
        latency: r.gateway.values().find(|g| g.latency.count > 0).map(|g| g.latency.clone()),
    }
}

/// Runs the same seeded scenario once per processing mode.
pub fn compare_modes(scenario: &Path, nodes: &Path, graph: &Path, o: &Overrides, out: &Path) -> Result<Vec<ModeRow>> {
    let mut rows = Vec::new();
    for mode in ProcessingMode::ALL {
        let ov = Overrides {
            mode: Some(mode),
            ..o.clone()
        };
        let cfg = RunConfig::load(scenario, nodes, graph, &ov)?;
        let m = mode.as_u8();
        let rep = run_session(
            &cfg,
            &RunOptions {
                out: out.join(format!("mode{m}")),
                session: Some(format!("{}-m{m}", cfg.session_id())),
                ..RunOptions::default()
            },
        )?
        .report;
        rows.push(mode_row(m, &rep));
    }
    write_json(&out.join("compare.json"), &rows)?;
    Ok(rows)
}

pub fn render_modes(rows: &[ModeRow]) -> String {
    let mut s = String::new();
    // The channel with the most values per message in raw mode is the one
    // the modes differ on most.
    let widest = rows
        .iter()
        .find(|r| r.mode == 1)
        .and_then(|r| {
            r.values_per_message
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(c, _)| c.clone())
        });
    let col = widest.clone().unwrap_or_else(|| "-".into());
    let _ = writeln!(
        s,
        "{:<5} {:>9} {:>10} {:>12} {:>12} {:>10} {:>12} {:>12} {:>12} {:>10}",
        "mode", "messages", "values", format!("{col}/msg"), "wire bytes", "ratio", "cpu", "radio", "gw records", "p50 ms"
    );
    let base = rows.iter().find(|r| r.mode == 2).map(|r| r.total.wire_bytes as f64);
    for r in rows {
        let per = widest
            .as_ref()
            .and_then(|c| r.values_per_message.get(c))
            .map_or("-".to_string(), |v| format!("{v:.0}"));
        let ratio = base.map_or("-".to_string(), |b| format!("{:.2}", r.total.wire_bytes as f64 / b));
        let p50 = r.latency.as_ref().map_or("-".to_string(), |l| format!("{:.1}", l.p50_us as f64 / 1e3));
        let _ = writeln!(
            s,
            "{:<5} {:>9} {:>10} {:>12} {:>12} {:>10} {:>12.1} {:>12.1} {:>12} {:>10}",
            r.mode, r.data.messages, r.data.values, per, r.total.wire_bytes, ratio, r.total.cpu, r.total.radio, r.gateway_records_processed, p50
        );
    }
    s
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(10)))
        .http_status_as_error(false)
        .build()
        .into()
}

fn base_url(addr: &str) -> String {
    if addr.starts_with("http://") || addr.starts_with("https://") {
        addr.trim_end_matches('/').to_string()
    } else {
        format!("http://{addr}")
    }
}

#[derive(Deserialize)]
struct ExportBody {
    records: Vec<SessionRecord>,
}

pub enum ExportFrom {
    Sink(String),
    Store(PathBuf),
}

pub fn export(from: &ExportFrom, session: Option<String>, out: &Path) -> Result<usize> {
    let records = match from {
        ExportFrom::Store(root) => export_dataset(root, &SessionFilter(session)).map_err(CliError::runtime)?,
        ExportFrom::Sink(addr) => {
            let url = format!("{}/v1/export", base_url(addr));
            let mut req = agent().get(&url);
            if let Some(s) = &session {
                req = req.query("session", s);
            }
            let mut resp = req
                .call()
                .map_err(|e| CliError::Runtime(format!("sink unreachable: {e}")))?;
            let status = resp.status();
            let text = resp.body_mut().read_to_string().map_err(CliError::runtime)?;
            if !status.is_success() {
                return Err(CliError::Runtime(format!("sink answered {status}: {text}")));
            }
            serde_json::from_str::<ExportBody>(&text).map_err(CliError::runtime)?.records
        }
    };
    if let Some(d) = out.parent() {
        std::fs::create_dir_all(d)?;
    }
    let f = std::fs::File::create(out)?;
    let mut w = std::io::BufWriter::new(f);
    write_export(&records, &mut w)?;
    w.flush()?;
    Ok(records.len())
}

#[derive(Deserialize)]
struct VersionBody {
    version: String,
}

/// Uploads a model file to a running gateway and confirms the active version.
pub fn deploy(model: &Path, gateway: &str) -> Result<String> {
    let body = std::fs::read(model).map_err(|e| CliError::Config(format!("{}: {e}", model.display())))?;
    let url = format!("{}/v1/model", base_url(gateway));
    let a = agent();
    let mut resp = a
        .post(&url)
        .header("Content-Type", "application/json")
        .send(&body[..])
        .map_err(|e| CliError::Runtime(format!("gateway unreachable: {e}")))?;
    let status = resp.status();
    let text = resp.body_mut().read_to_string().map_err(CliError::runtime)?;
    if status.as_u16() == 400 {
        return Err(CliError::Config(format!("gateway rejected the model: {text}")));
    }
    if !status.is_success() {
        return Err(CliError::Runtime(format!("gateway answered {status}: {text}")));
    }
    let deployed: VersionBody = serde_json::from_str(&text).map_err(CliError::runtime)?;
    let mut resp = a
        .get(&url)
        .call()
        .map_err(|e| CliError::Runtime(format!("gateway unreachable: {e}")))?;
    let text = resp.body_mut().read_to_string().map_err(CliError::runtime)?;
    let active: VersionBody = serde_json::from_str(&text).map_err(CliError::runtime)?;
    if let Ok(m) = dsm_quality::parse_model(&body) {
        if m.version != active.version {
            return Err(CliError::Runtime(format!("gateway runs {} instead of {}", active.version, m.version)));
        }
    }
    if active.version != deployed.version {
        return Err(CliError::Runtime(format!(
            "gateway runs {} after deploying {}",
            active.version, deployed.version
        )));
    }
    Ok(active.version)
}
