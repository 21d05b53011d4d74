//! Phase one: record a campaign of sessions, export them as a labeled
//! dataset, and fit the quality model.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use dsm_cloud::{export_dataset, write_export, CloudSink, SessionFilter};
use dsm_quality::{fit, save_model, FitOptions, FitReport, QualityError, SessionRecord, TrainConfig};
use dsm_sim::DefectEpisode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::config::{load_graph_file, load_nodes, load_scenario, set_duration, Overrides, RunConfig};
use crate::error::{CliError, Result};
use crate::report::read_ndjson;
use crate::run::{run_session, write_json, RunOptions, SinkMode};

pub const DEFAULT_FEATURES: [&str; 4] = [
    "params.feed_mm_s",
    "params.tool_wear",
    "params.chip_load",
    "airflow.mean",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    #[serde(default = "default_features")]
    pub features: Vec<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_features() -> Vec<String> {
    DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect()
}
fn default_threshold() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    TrainConfig::default().lr
}
fn default_l2() -> f64 {
    TrainConfig::default().l2
}
fn default_epochs() -> usize {
    TrainConfig::default().epochs
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            features: default_features(),
            threshold: default_threshold(),
            lr: default_lr(),
            l2: default_l2(),
            epochs: default_epochs(),
        }
    }
}

/// A recording campaign. Paths are relative to the campaign file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Campaign {
    pub scenario: PathBuf,
    pub nodes: PathBuf,
    pub graph: PathBuf,
    pub sessions: usize,
    pub duration_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub hyper: Hyper,
}

/// Operating point of one campaign session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionDesign {
    pub spindle_rpm: f64,
    pub feed_mm_s: f64,
    pub tool_wear: f64,
    pub episode: Option<DefectEpisode>,
}

/// Two-level factorial design over feed, spindle speed, tool wear and
/// defect presence. The first 16 sessions cover every corner once, later
/// ones pick corners at random. Levels are drawn inside each corner's band.
pub fn design(sessions: usize, duration_s: f64, seed: u64) -> Vec<SessionDesign> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sessions)
        .map(|i| {
            let corner = if i < 16 { i } else { rng.random_range(0..16) };
            let bit = |k: usize| corner >> k & 1 == 1;
            let feed = if bit(0) { rng.random_range(25.0..50.0) } else { rng.random_range(1.0..5.0) };
            let rpm = if bit(1) { rng.random_range(3000.0..8000.0) } else { rng.random_range(15000.0..24000.0) };
            let wear = if bit(2) { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.2) };
            let episode = bit(3).then(|| {
                let start: f64 = rng.random_range(1.0..(duration_s * 0.6).max(1.5));
                let len: f64 = rng.random_range(2.0..4.0);
                DefectEpisode {
                    t_start_s: start,
                    t_end_s: (start + len).min(duration_s),
                    severity: 1.0,
                }
            });
            SessionDesign {
                spindle_rpm: rpm,
                feed_mm_s: feed,
                tool_wear: wear,
                episode,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_version: String,
    pub feature_names: Vec<String>,
    pub w: Vec<f64>,
    pub b: f64,
    pub sessions: usize,
    pub records: usize,
    pub labeled: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub final_loss: f64,
    pub dropped: Vec<String>,
    pub test_sessions: Vec<String>,
}

/// Records every campaign session into one sink under `out/campaign`, then
/// exports the labeled dataset to `out/dataset.ndjson`.
pub fn record_campaign(campaign_path: &Path, out: &Path) -> Result<(Campaign, Vec<SessionRecord>)> {
    let c: Campaign = crate::config::read_json(campaign_path)?;
    if c.sessions == 0 || !(c.duration_s > 0.0) {
        return Err(CliError::Config("campaign needs sessions and a positive duration".into()));
    }
    let dir = campaign_path.parent().unwrap_or(Path::new("."));
    let base = load_scenario(&dir.join(&c.scenario), &Overrides::default())?;
    let nodes = load_nodes(&dir.join(&c.nodes))?;
    let graph = load_graph_file(&dir.join(&c.graph))?;
    let root = out.join("campaign");
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    let sink = CloudSink::start(root.join("sink"), "127.0.0.1:0").map_err(CliError::runtime)?;
    for (i, d) in design(c.sessions, c.duration_s, c.seed).into_iter().enumerate() {
        let mut sc = base.clone();
        sc.seed = c.seed.wrapping_mul(1000).wrapping_add(i as u64);
        sc.schedule.clear();
        sc.defect_episodes = d.episode.into_iter().collect();
        set_duration(&mut sc, c.duration_s);
        sc.machine.spindle_rpm = d.spindle_rpm;
        sc.machine.feed_mm_s = d.feed_mm_s;
        sc.machine.tool_wear = d.tool_wear;
        sc.validate().map_err(CliError::config)?;
        let cfg = RunConfig {
            scenario: sc,
            nodes: nodes.clone(),
            graph: graph.clone(),
            mode: None,
        };
        cfg.check()?;
        let session = format!("{}-c{i:02}", base.name);
        log::info!("campaign session {session}");
        run_session(
            &cfg,
            &RunOptions {
                out: root.join(&session),
                session: Some(session),
                sink: SinkMode::Remote(sink.url()),
                ..RunOptions::default()
            },
        )?;
    }
    sink.stop();
    let records = export_dataset(&root.join("sink"), &SessionFilter::all()).map_err(CliError::runtime)?;
    let f = fs::File::create(out.join("dataset.ndjson"))?;
    write_export(&records, std::io::BufWriter::new(f))?;
    Ok((c, records))
}

fn rfc3339(t_us: i64) -> String {
    OffsetDateTime::from_unix_timestamp_nanos(t_us as i128 * 1000)
        .ok()
        .and_then(|t| t.format(&Rfc3339).ok())
        .unwrap_or_else(|| "1970-01-01T00:00:00Z".into())
}

/// Fits a model. Version and timestamp derive from the data and settings,
/// so retraining on the same inputs writes an identical file.
pub fn train_records(records: &[SessionRecord], h: &Hyper, seed: u64) -> Result<(FitReport, TrainSummary)> {
    let mut digest = Sha256::new();
    for r in records {
        digest.update(serde_json::to_vec(r).expect("serializable"));
        digest.update(b"\n");
    }
    digest.update(serde_json::to_vec(h).expect("serializable"));
    digest.update(seed.to_le_bytes());
    let version = format!("q-{}", &hex::encode(digest.finalize())[..12]);
    let sessions: BTreeSet<&str> = records.iter().map(|r| r.session_id.as_str()).collect();
    let last = records.iter().map(|r| r.t_us).max().unwrap_or(0);
    let opts = FitOptions {
        train: TrainConfig {
            lr: h.lr,
            l2: h.l2,
            epochs: h.epochs,
        },
        threshold: h.threshold,
        split_seed: seed,
        feature_names: Some(h.features.clone()),
        version: version.clone(),
        trained_on: format!("{} sessions, {} records", sessions.len(), records.len()),
        created_at: rfc3339(last),
    };
    let rep = fit(records, &opts).map_err(|e| {
        let msg = format!("training failed: {e}");
        match e {
            QualityError::MissingFeature(_)
            | QualityError::SingleClass
            | QualityError::TooFewRecords(_)
            | QualityError::NoFeatures
            | QualityError::BadHyperparameter(_) => CliError::Config(msg),
            _ => CliError::Runtime(msg),
        }
    })?;
    let summary = TrainSummary {
        model_version: version,
        feature_names: rep.model.feature_names.clone(),
        w: rep.model.w.clone(),
        b: rep.model.b,
        sessions: sessions.len(),
        records: records.len(),
        labeled: records.iter().filter(|r| r.label.is_some()).count(),
        train_rows: rep.train_rows,
        test_rows: rep.test_rows,
        auc: rep.auc,
        accuracy: rep.accuracy,
        final_loss: rep.trace.last().copied().unwrap_or(f64::NAN),
        dropped: rep.dropped.clone(),
        test_sessions: rep.test_sessions.clone(),
    };
    Ok((rep, summary))
}

pub fn load_dataset(path: &Path) -> Result<Vec<SessionRecord>> {
    read_ndjson(path).map_err(|e| match e {
        CliError::Runtime(m) => CliError::Config(m),
        other => other,
    })
}

/// Writes `model.json` and `train.json` into `out`.
pub fn write_training(out: &Path, rep: &FitReport, summary: &TrainSummary) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join("model.json");
    save_model(&rep.model, &path).map_err(CliError::runtime)?;
    write_json(&out.join("train.json"), summary)?;
    Ok(path)
}
