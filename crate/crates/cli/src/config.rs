//! Loading and cross-checking the files a run is assembled from.

use std::fs;
use std::path::{Path, PathBuf};

use dsm_core::ProcessingMode;
use dsm_node::NodeConfig;
use dsm_sim::{ChannelFeed, ScenarioConfig};
use dsm_wires::{validate_graph, GraphDoc, GraphSpec, Registry, MACHINE_NODE};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Command-line overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub mode: Option<ProcessingMode>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub nodes: Vec<NodeConfig>,
    pub graph: GraphSpec,
    pub mode: Option<ProcessingMode>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_scenario(path: &Path, o: &Overrides) -> Result<ScenarioConfig> {
    let mut s: ScenarioConfig = read_json(path)?;
    if let Some(seed) = o.seed {
        s.seed = seed;
    }
    if let Some(d) = o.duration_s {
        set_duration(&mut s, d);
    }
    s.validate().map_err(CliError::config)?;
    Ok(s)
}

/// Shortens or extends a scenario. Episodes past the new end are dropped and
/// one that straddles it is cut short.
pub fn set_duration(s: &mut ScenarioConfig, d: f64) {
    s.duration_s = d;
    s.defect_episodes.retain(|e| e.t_start_s < d);
    for e in &mut s.defect_episodes {
        e.t_end_s = e.t_end_s.min(d);
    }
    s.schedule.retain(|c| c.t_s < d);
}

/// Every `*.json` in `dir`, in file-name order.
pub fn load_nodes(dir: &Path) -> Result<Vec<NodeConfig>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("{}: no node configs", dir.display())));
    }
    let mut nodes = Vec::new();
    for p in paths {
        let n: NodeConfig = read_json(&p)?;
        n.validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        nodes.push(n);
    }
    Ok(nodes)
}

/// Parses and validates a graph. Relative `model_path`s of score stages are
/// resolved against the graph file's directory; everything else written by
/// stages lands in the run's output directory.
pub fn load_graph_file(path: &Path) -> Result<GraphSpec> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let doc: GraphDoc = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: parse error: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    graph_from_doc(doc, &std::path::absolute(dir)?)
}

pub fn graph_from_doc(mut doc: GraphDoc, dir: &Path) -> Result<GraphSpec> {
    for s in doc.stages.iter_mut().filter(|s| s.kind == "score") {
        if let Some(Value::String(p)) = s.params.get_mut("model_path") {
            let resolved = dir.join(&*p);
            if Path::new(p).is_relative() {
                *p = resolved.to_string_lossy().into_owned();
            }
        }
    }
    validate_graph(doc, &Registry::builtin()).map_err(|v| {
        let lines: Vec<String> = v.iter().map(|x| format!("  - {x}")).collect();
        CliError::Config(format!("graph has {} violation(s):\n{}", v.len(), lines.join("\n")))
    })
}

impl RunConfig {
    pub fn load(scenario: &Path, nodes_dir: &Path, graph: &Path, o: &Overrides) -> Result<RunConfig> {
        let cfg = RunConfig {
            scenario: load_scenario(scenario, o)?,
            nodes: load_nodes(nodes_dir)?,
            graph: load_graph_file(graph)?,
            mode: o.mode,
        };
        cfg.check()?;
        Ok(cfg.with_mode())
    }

    fn with_mode(mut self) -> Self {
        if let Some(m) = self.mode {
            for n in &mut self.nodes {
                n.mode = Some(m);
            }
        }
        self
    }

    /// Cross-file consistency: sites agree and every node channel has a
    /// plant signal behind it.
    pub fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut ids: Vec<&str> = self.nodes.iter().map(|n| n.node_id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            errs.push("two node configs share a node_id".to_string());
        }
        for n in &self.nodes {
            if n.node_id == MACHINE_NODE {
                errs.push(format!("node id {MACHINE_NODE} is reserved for the machine"));
            }
            if n.site != self.scenario.site {
                errs.push(format!("node {} is on site {}, scenario on {}", n.node_id, n.site, self.scenario.site));
            }
            for c in &n.channels {
                let ch = c.descriptor.channel();
                if !self.scenario.signals.iter().any(|s| s.node_id == n.node_id && s.channel == ch) {
                    errs.push(format!("{}/{ch} has no signal in the scenario", n.node_id));
                }
            }
        }
        if let Some(m) = self.mode {
            for n in &self.nodes {
                let mut n = n.clone();
                n.mode = Some(m);
                if let Err(e) = n.validate() {
                    errs.push(format!("{} cannot run in mode {}: {e}", n.node_id, m.as_u8()));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs.join("; ")))
        }
    }

    /// Simulator feeds in (node, channel) order, matching [`RunConfig::feed_targets`].
    pub fn feeds(&self) -> Vec<ChannelFeed> {
        self.feed_targets()
            .into_iter()
            .map(|(ni, ch)| {
                let n = &self.nodes[ni];
                let d = &n.channels.iter().find(|c| c.descriptor.channel() == ch).expect("checked").descriptor;
                let spec = self
                    .scenario
                    .signals
                    .iter()
                    .find(|s| s.node_id == n.node_id && s.channel == ch)
                    .expect("checked")
                    .clone();
                ChannelFeed { spec, fs_hz: d.fs_hz }
            })
            .collect()
    }

    pub fn feed_targets(&self) -> Vec<(usize, String)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.channels.iter().map(move |c| (i, c.descriptor.channel().to_owned())))
            .collect()
    }

    /// Longest publish period of any channel, µs.
    pub fn max_period_us(&self) -> i64 {
        self.nodes
            .iter()
            .flat_map(|n| &n.channels)
            .filter_map(|c| c.descriptor.period_us())
            .max()
            .unwrap_or(1_000_000)
    }

    pub fn session_id(&self) -> String {
        format!("{}-{}", self.scenario.name, self.scenario.seed)
    }
}
