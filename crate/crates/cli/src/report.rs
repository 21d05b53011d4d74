//! Run reports. A report is computed from the files a run left behind and
//! nothing else, so `dsm report` on an old directory reproduces it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use dsm_cloud::{CloudRecord, Store};
use dsm_node::LogRow;
use dsm_sim::{CommandOrigin, LabelRow, ScenarioConfig};
use dsm_wires::{WireRecord, STAMP_TAG};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::read_json;
use crate::error::{CliError, Result};
use crate::machine::MachineEvent;
use crate::run::Manifest;

/// Alarms count as timely when one of this many windows starting at or
/// after an episode's onset raises them.
pub const DETECTION_WINDOWS: usize = 2;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    pub messages: u64,
    pub values: u64,
    /// MQTT PUBLISH frame bytes.
    pub wire_bytes: u64,
    pub envelope_bytes: u64,
    pub cpu: f64,
    pub radio: f64,
}

impl Traffic {
    fn add(&mut self, r: &LogRow) {
        self.messages += 1;
        self.values += r.values as u64;
        self.wire_bytes += r.frame_bytes as u64;
        self.envelope_bytes += r.envelope_bytes as u64;
        self.cpu += r.cpu;
        self.radio += r.radio;
    }

    pub fn energy(&self) -> f64 {
        self.cpu + self.radio
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    /// Everything the node transmitted: data, sync, acks and events.
    pub total: Traffic,
    /// Data messages by processing mode (`"1"`, `"2"`, `"3"`).
    pub data_by_mode: BTreeMap<String, Traffic>,
    /// Data messages by channel.
    pub data_by_channel: BTreeMap<String, Traffic>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub count: usize,
    pub p50_us: i64,
    pub p90_us: i64,
    pub p99_us: i64,
    pub max_us: i64,
}

/// Nearest-rank percentiles.
pub fn latency(mut xs: Vec<i64>) -> Latency {
    if xs.is_empty() {
        return Latency::default();
    }
    xs.sort_unstable();
    let n = xs.len();
    let rank = |p: f64| xs[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    Latency {
        count: n,
        p50_us: rank(0.5),
        p90_us: rank(0.9),
        p99_us: rank(0.99),
        max_us: xs[n - 1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayLog {
    pub records: usize,
    /// Acquisition of the window's first sample to arrival at the logger.
    pub latency: Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub severity: f64,
    /// Index of the first alarmed window at or after onset, if any.
    pub first_alarm_window: Option<usize>,
    pub detected: bool,
    /// First alarm minus onset, seconds. Negative values are leads.
    pub alarm_lag_s: Option<f64>,
    pub windows: usize,
    pub alarmed_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarms {
    pub scored_windows: usize,
    pub alarmed_windows: usize,
    /// Alarms on windows outside every episode.
    pub outside_episodes: usize,
    pub episodes: Vec<EpisodeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandReport {
    pub t_us: i64,
    pub origin: CommandOrigin,
    pub req_id: Option<String>,
    pub spindle_rpm: f64,
    pub feed_mm_s: f64,
    pub risk_before: Option<f64>,
    pub risk_after: f64,
    /// `(before - after) / before`.
    pub risk_reduction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub consumed: u64,
    pub emitted: u64,
    pub dropped: u64,
    pub dead_lettered: u64,
    pub conserved: bool,
    /// Records taken in by all stages: the gateway's CPU proxy.
    pub records_processed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub seconds: usize,
    pub positives: usize,
    pub mean_p: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SinkSummary {
    pub feature_records: usize,
    pub label_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub session: String,
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub mode: Option<u8>,
    pub model_version: Option<String>,
    /// Data traffic of all nodes by processing mode.
    pub data_by_mode: BTreeMap<String, Traffic>,
    pub nodes: BTreeMap<String, NodeReport>,
    pub gateway: BTreeMap<String, GatewayLog>,
    pub pipeline: PipelineSummary,
    pub alarms: Option<Alarms>,
    pub commands: Vec<CommandReport>,
    pub labels: LabelSummary,
    pub sink: Option<SinkSummary>,
}

impl RunReport {
    /// Everything every node sent.
    pub fn total(&self) -> Traffic {
        let mut t = Traffic::default();
        for n in self.nodes.values() {
            t.messages += n.total.messages;
            t.values += n.total.values;
            t.wire_bytes += n.total.wire_bytes;
            t.envelope_bytes += n.total.envelope_bytes;
            t.cpu += n.total.cpu;
            t.radio += n.total.radio;
        }
        t
    }
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    Ok(v)
}

fn nodes(dir: &Path) -> Result<BTreeMap<String, NodeReport>> {
    let mut out = BTreeMap::new();
    for p in sorted_entries(&dir.join("nodes"), "ndjson")? {
        let rows: Vec<LogRow> = read_ndjson(&p)?;
        let id = p.file_stem().expect("file").to_string_lossy().into_owned();
        let mut n = NodeReport::default();
        for r in &rows {
            n.total.add(r);
            if r.kind == "data" {
                if let Some(m) = r.mode {
                    n.data_by_mode.entry(m.to_string()).or_default().add(r);
                }
                if let Some(c) = &r.channel {
                    n.data_by_channel.entry(c.clone()).or_default().add(r);
                }
            }
        }
        out.insert(id, n);
    }
    Ok(out)
}

const NON_GATEWAY: [&str; 2] = ["machine", "labels"];

fn gateway_logs(dir: &Path) -> Result<BTreeMap<String, Vec<WireRecord>>> {
    let mut out = BTreeMap::new();
    for p in sorted_entries(dir, "ndjson")? {
        let stem = p.file_stem().expect("file").to_string_lossy().into_owned();
        if NON_GATEWAY.contains(&stem.as_str()) {
            continue;
        }
        out.insert(stem, read_ndjson(&p)?);
    }
    Ok(out)
}

fn alarms(sc: &ScenarioConfig, logs: &BTreeMap<String, Vec<WireRecord>>) -> Option<Alarms> {
    let mut scored: Vec<(i64, bool)> = logs
        .values()
        .find(|recs| recs.iter().any(|r| r.values.contains_key("risk_alarm")))?
        .iter()
        .filter_map(|r| r.values.get("risk_alarm").map(|a| (r.t_us, *a >= 0.5)))
        .collect();
    scored.sort_by_key(|(t, _)| *t);
    let t_s = |t: i64| (t - sc.start_epoch_us) as f64 / 1e6;
    let in_any = |t: i64| {
        let s = t_s(t);
        sc.defect_episodes.iter().any(|e| e.t_start_s <= s && s < e.t_end_s)
    };
    let episodes = sc
        .defect_episodes
        .iter()
        .map(|e| {
            let onset_us = sc.start_epoch_us + (e.t_start_s * 1e6).round() as i64;
            let end_us = sc.start_epoch_us + (e.t_end_s * 1e6).round() as i64;
            let after: Vec<&(i64, bool)> = scored.iter().filter(|(t, _)| *t >= onset_us).collect();
            let first = after.iter().position(|(_, a)| *a);
            let during: Vec<&&(i64, bool)> = after.iter().filter(|(t, _)| *t < end_us).collect();
            EpisodeReport {
                t_start_s: e.t_start_s,
                t_end_s: e.t_end_s,
                severity: e.severity,
                first_alarm_window: first,
                detected: first.is_some_and(|i| i < DETECTION_WINDOWS),
                alarm_lag_s: first.map(|i| (after[i].0 - onset_us) as f64 / 1e6),
                windows: during.len(),
                alarmed_windows: during.iter().filter(|(_, a)| *a).count(),
            }
        })
        .collect();
    Some(Alarms {
        scored_windows: scored.len(),
        alarmed_windows: scored.iter().filter(|(_, a)| *a).count(),
        outside_episodes: scored.iter().filter(|(t, a)| *a && !in_any(*t)).count(),
        episodes,
    })
}

fn commands(events: &[MachineEvent]) -> Vec<CommandReport> {
    events
        .iter()
        .filter_map(|e| match e {
            MachineEvent::Change {
                t_us,
                origin,
                req_id,
                state,
                risk_before,
                risk,
            } if matches!(origin, CommandOrigin::Operator | CommandOrigin::Auto) => Some(CommandReport {
                t_us: *t_us,
                origin: *origin,
                req_id: req_id.clone(),
                spindle_rpm: state.spindle_rpm,
                feed_mm_s: state.feed_mm_s,
                risk_before: *risk_before,
                risk_after: *risk,
                risk_reduction: risk_before.filter(|b| *b > 0.0).map(|b| (b - risk) / b),
            }),
            _ => None,
        })
        .collect()
}

fn sink(dir: &Path, session: &str) -> Result<Option<SinkSummary>> {
    let p = Store::session_path(&dir.join("sink"), session);
    if !p.exists() {
        return Ok(None);
    }
    let recs: Vec<CloudRecord> = read_ndjson(&p)?;
    let labels = recs.iter().filter(|r| r.is_label()).count();
    Ok(Some(SinkSummary {
        feature_records: recs.len() - labels,
        label_records: labels,
    }))
}

#[derive(Deserialize)]
struct PipelineFile {
    consumed: u64,
    emitted: u64,
    dropped: u64,
    dead_lettered: u64,
    stages: BTreeMap<String, dsm_wires::StageStats>,
}

pub fn build_report(dir: &Path) -> Result<RunReport> {
    let m: Manifest = read_json(&dir.join("run.json"))?;
    let sc: ScenarioConfig = read_json(&dir.join("scenario.json"))?;
    let nodes = nodes(dir)?;
    let mut data_by_mode: BTreeMap<String, Traffic> = BTreeMap::new();
    for n in nodes.values() {
        for (k, t) in &n.data_by_mode {
            let e = data_by_mode.entry(k.clone()).or_default();
            e.messages += t.messages;
            e.values += t.values;
            e.wire_bytes += t.wire_bytes;
            e.envelope_bytes += t.envelope_bytes;
            e.cpu += t.cpu;
            e.radio += t.radio;
        }
    }
    let logs = gateway_logs(dir)?;
    let gateway = logs
        .iter()
        .map(|(k, recs)| {
            let lat: Vec<i64> = recs
                .iter()
                .filter_map(|r| r.tags.get(STAMP_TAG)?.parse::<i64>().ok().map(|g| g - r.t_us))
                .collect();
            (
                k.clone(),
                GatewayLog {
                    records: recs.len(),
                    latency: latency(lat),
                },
            )
        })
        .collect();
    let pf: PipelineFile = read_json(&dir.join("pipeline.json"))?;
    let pipeline = PipelineSummary {
        consumed: pf.consumed,
        emitted: pf.emitted,
        dropped: pf.dropped,
        dead_lettered: pf.dead_lettered,
        conserved: pf.consumed == pf.emitted + pf.dropped + pf.dead_lettered,
        records_processed: pf.stages.values().map(|s| s.records_in).sum(),
    };
    let events: Vec<MachineEvent> = read_ndjson(&dir.join("machine.ndjson"))?;
    let labels: Vec<LabelRow> = read_ndjson(&dir.join("labels.ndjson"))?;
    let label_summary = LabelSummary {
        seconds: labels.len(),
        positives: labels.iter().filter(|l| l.label == 1).count(),
        mean_p: if labels.is_empty() {
            0.0
        } else {
            labels.iter().map(|l| l.p).sum::<f64>() / labels.len() as f64
        },
    };
    Ok(RunReport {
        sink: sink(dir, &m.session)?,
        session: m.session,
        scenario: m.scenario,
        seed: m.seed,
        duration_s: m.duration_s,
        mode: m.mode,
        model_version: m.model_version,
        data_by_mode,
        nodes,
        gateway,
        pipeline,
        alarms: alarms(&sc, &logs),
        commands: commands(&events),
        labels: label_summary,
    })
}

pub fn render(r: &RunReport) -> String {
    let mut s = String::new();
    let mode = r.mode.map_or("per channel".to_string(), |m| m.to_string());
    let _ = writeln!(s, "session {}  scenario {}  seed {}  {} s  mode {}", r.session, r.scenario, r.seed, r.duration_s, mode);
    if let Some(v) = &r.model_version {
        let _ = writeln!(s, "model {v}");
    }
    let _ = writeln!(s, "\ndata traffic by mode");
    let _ = writeln!(s, "  {:<5} {:>9} {:>10} {:>12} {:>12} {:>12}", "mode", "messages", "values", "wire bytes", "cpu", "radio");
    for (m, t) in &r.data_by_mode {
        let _ = writeln!(s, "  {:<5} {:>9} {:>10} {:>12} {:>12.1} {:>12.1}", m, t.messages, t.values, t.wire_bytes, t.cpu, t.radio);
    }
    let _ = writeln!(s, "\nnodes (all traffic)");
    for (id, n) in &r.nodes {
        let t = &n.total;
        let _ = writeln!(s, "  {:<10} {:>9} msgs {:>12} bytes  energy {:.1} (cpu {:.1}, radio {:.1})", id, t.messages, t.wire_bytes, t.energy(), t.cpu, t.radio);
    }
    let _ = writeln!(s, "\ngateway");
    let p = &r.pipeline;
    let _ = writeln!(s, "  consumed {} = emitted {} + dropped {} + dead-lettered {} ({})", p.consumed, p.emitted, p.dropped, p.dead_lettered, if p.conserved { "conserved" } else { "NOT conserved" });
    let _ = writeln!(s, "  records processed {}", p.records_processed);
    for (k, g) in &r.gateway {
        let l = &g.latency;
        if l.count > 0 {
            let _ = writeln!(s, "  {k}: {} records, latency p50 {:.1} ms p90 {:.1} ms p99 {:.1} ms max {:.1} ms", g.records, l.p50_us as f64 / 1e3, l.p90_us as f64 / 1e3, l.p99_us as f64 / 1e3, l.max_us as f64 / 1e3);
        } else {
            let _ = writeln!(s, "  {k}: {} records", g.records);
        }
    }
    if let Some(a) = &r.alarms {
        let _ = writeln!(s, "\nalarms: {} of {} windows, {} outside episodes", a.alarmed_windows, a.scored_windows, a.outside_episodes);
        for e in &a.episodes {
            let lag = e.alarm_lag_s.map_or("none".to_string(), |l| format!("{l:.3} s"));
            let _ = writeln!(s, "  episode {}-{} s severity {}: {} ({} of {} windows alarmed, lag {lag})", e.t_start_s, e.t_end_s, e.severity, if e.detected { "detected" } else { "missed" }, e.alarmed_windows, e.windows);
        }
    }
    if !r.commands.is_empty() {
        let _ = writeln!(s, "\nparameter changes");
        for c in &r.commands {
            let red = c.risk_reduction.map_or(String::new(), |x| format!(", {:.0}% lower", x * 100.0));
            let before = c.risk_before.map_or("?".to_string(), |b| format!("{b:.3}"));
            let _ = writeln!(s, "  {:?} {}: rpm {} feed {} risk {before} -> {:.3}{red}", c.origin, c.req_id.as_deref().unwrap_or("-"), c.spindle_rpm, c.feed_mm_s, c.risk_after);
        }
    }
    let l = &r.labels;
    let _ = writeln!(s, "\nlabels: {} seconds, {} defective, mean p {:.3}", l.seconds, l.positives, l.mean_p);
    if let Some(k) = &r.sink {
        let _ = writeln!(s, "sink: {} feature records, {} labels", k.feature_records, k.label_records);
    }
    s
}
