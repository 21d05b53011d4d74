//! Graph documents and their validation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::record::RecordType;
use crate::registry::{OutType, PortSpec, Registry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDoc {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    /// `stage_id.port`
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub stages: Vec<StageDoc>,
    #[serde(default)]
    pub edges: Vec<EdgeDoc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ParseError(String),
    DuplicateId(String),
    BadStageId(String),
    UnknownStageKind { stage: String, kind: String },
    BadParams { stage: String, reason: String },
    DanglingEdge { edge: String, reason: String },
    CycleDetected(Vec<String>),
    TypeMismatch { edge: String, from: RecordType, to: RecordType },
    UnconnectedInput { stage: String, port: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ParseError(e) => write!(f, "parse error: {e}"),
            Violation::DuplicateId(id) => write!(f, "duplicate stage id {id}"),
            Violation::BadStageId(id) => write!(f, "stage id {id:?} must match [A-Za-z0-9_-]+"),
            Violation::UnknownStageKind { stage, kind } => write!(f, "stage {stage}: unknown kind {kind}"),
            Violation::BadParams { stage, reason } => write!(f, "stage {stage}: {reason}"),
            Violation::DanglingEdge { edge, reason } => write!(f, "edge {edge}: {reason}"),
            Violation::CycleDetected(path) => write!(f, "cycle: {}", path.join(" -> ")),
            Violation::TypeMismatch { edge, from, to } => {
                write!(f, "edge {edge}: {from:?} records cannot enter a {to:?} port")
            }
            Violation::UnconnectedInput { stage, port } => write!(f, "stage {stage}: input {port} has no edge"),
        }
    }
}

/// Edge resolved to stage and port indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub from_port: usize,
    pub to: usize,
    pub to_port: usize,
}

/// A validated graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub doc: GraphDoc,
    pub ports: Vec<PortSpec>,
    pub edges: Vec<Edge>,
    /// Stage indices in topological order.
    pub order: Vec<usize>,
    /// Resolved record type of every output port.
    pub out_types: Vec<Vec<RecordType>>,
}

impl GraphSpec {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.doc.stages.iter().position(|s| s.id == id)
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn split_endpoint(s: &str) -> Option<(&str, &str)> {
    let (a, b) = s.rsplit_once('.')?;
    (!a.is_empty() && !b.is_empty()).then_some((a, b))
}

pub fn load_graph(doc: &str, registry: &Registry) -> Result<GraphSpec, Vec<Violation>> {
    let doc: GraphDoc = serde_json::from_str(doc).map_err(|e| vec![Violation::ParseError(e.to_string())])?;
    validate_graph(doc, registry)
}

/// Reports every violation found, not just the first.
pub fn validate_graph(doc: GraphDoc, registry: &Registry) -> Result<GraphSpec, Vec<Violation>> {
    let mut v = Vec::new();
    let mut seen = BTreeSet::new();
    let mut ports: Vec<Option<PortSpec>> = Vec::new();
    for s in &doc.stages {
        if !valid_id(&s.id) {
            v.push(Violation::BadStageId(s.id.clone()));
        }
        if !seen.insert(s.id.as_str()) {
            v.push(Violation::DuplicateId(s.id.clone()));
        }
        let p = match registry.get(&s.kind) {
            None => {
                v.push(Violation::UnknownStageKind {
                    stage: s.id.clone(),
                    kind: s.kind.clone(),
                });
                None
            }
            Some(f) => match f.ports(&s.params) {
                Ok(p) => Some(p),
                Err(reason) => {
                    v.push(Violation::BadParams {
                        stage: s.id.clone(),
                        reason,
                    });
                    None
                }
            },
        };
        ports.push(p);
    }
    let index = |id: &str| doc.stages.iter().position(|s| s.id == id);
    let n = doc.stages.len();
    let mut edges = Vec::new();
    // Edges whose endpoints exist, even if a port could not be checked.
    let mut links: Vec<(usize, usize)> = Vec::new();
    for e in &doc.edges {
        let name = format!("{} -> {}", e.from, e.to);
        let dangling = |reason: String| Violation::DanglingEdge {
            edge: name.clone(),
            reason,
        };
        let (Some((fs, fp)), Some((ts, tp))) = (split_endpoint(&e.from), split_endpoint(&e.to)) else {
            v.push(dangling("endpoints must be written stage.port".into()));
            continue;
        };
        let (Some(fi), Some(ti)) = (index(fs), index(ts)) else {
            let missing = if index(fs).is_none() { fs } else { ts };
            v.push(dangling(format!("no stage {missing}")));
            continue;
        };
        links.push((fi, ti));
        let (Some(fport), Some(tport)) = (&ports[fi], &ports[ti]) else {
            continue;
        };
        let Some(from_port) = fport.output(fp) else {
            v.push(dangling(format!("stage {fs} has no output {fp}")));
            continue;
        };
        let Some(to_port) = tport.input(tp) else {
            v.push(dangling(format!("stage {ts} has no input {tp}")));
            continue;
        };
        edges.push(Edge {
            from: fi,
            from_port,
            to: ti,
            to_port,
        });
    }
    let order = topo_order(n, &links);
    if order.len() < n {
        v.push(Violation::CycleDetected(find_cycle(n, &links, &order, &doc)));
    }
    for (i, p) in ports.iter().enumerate() {
        let Some(p) = p else { continue };
        for (k, (name, _)) in p.inputs.iter().enumerate() {
            if !edges.iter().any(|e| e.to == i && e.to_port == k) {
                v.push(Violation::UnconnectedInput {
                    stage: doc.stages[i].id.clone(),
                    port: name.clone(),
                });
            }
        }
    }
    // Types are resolved in topological order; stages on a cycle stay unresolved.
    let mut out_types: Vec<Option<Vec<RecordType>>> = vec![None; n];
    for &i in &order {
        let Some(p) = &ports[i] else { continue };
        let incoming: Vec<&Edge> = edges.iter().filter(|e| e.to == i).collect();
        let mut first_input: Option<RecordType> = None;
        for e in &incoming {
            let Some(Some(from_t)) = out_types[e.from].as_ref().map(|t| t.get(e.from_port).copied()) else {
                continue;
            };
            let to_t = p.inputs[e.to_port].1;
            if !from_t.flows_into(to_t) {
                v.push(Violation::TypeMismatch {
                    edge: format!(
                        "{}.{} -> {}.{}",
                        doc.stages[e.from].id,
                        ports[e.from].as_ref().map(|p| p.outputs[e.from_port].0.as_str()).unwrap_or("?"),
                        doc.stages[i].id,
                        p.inputs[e.to_port].0
                    ),
                    from: from_t,
                    to: to_t,
                });
            }
            if e.to_port == 0 {
                first_input = Some(match first_input {
                    None => from_t,
                    Some(t) if t == from_t => t,
                    Some(t) if t.flows_into(RecordType::Features) && from_t.flows_into(RecordType::Features) => {
                        RecordType::Features
                    }
                    Some(_) => RecordType::Any,
                });
            }
        }
        out_types[i] = Some(
            p.outputs
                .iter()
                .map(|(_, t)| match t {
                    OutType::Fixed(t) => *t,
                    OutType::SameAsInput => first_input.unwrap_or(RecordType::Any),
                })
                .collect(),
        );
    }
    if !v.is_empty() {
        return Err(v);
    }
    Ok(GraphSpec {
        ports: ports.into_iter().map(|p| p.expect("checked")).collect(),
        out_types: out_types.into_iter().map(|t| t.expect("acyclic")).collect(),
        doc,
        edges,
        order,
    })
}

/// Kahn's algorithm with lowest-index tie-breaking. Returns fewer than `n`
/// indices when the graph has a cycle.
fn topo_order(n: usize, links: &[(usize, usize)]) -> Vec<usize> {
    let mut indeg = vec![0usize; n];
    for &(_, b) in links {
        indeg[b] += 1;
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut out = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        out.push(i);
        for &(a, b) in links {
            if a == i {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    ready.insert(b);
                }
            }
        }
    }
    out
}

/// Walks successors among the stages Kahn could not order until one repeats.
fn find_cycle(n: usize, links: &[(usize, usize)], order: &[usize], doc: &GraphDoc) -> Vec<String> {
    let ordered: BTreeSet<usize> = order.iter().copied().collect();
    let left: Vec<usize> = (0..n).filter(|i| !ordered.contains(i)).collect();
    // Every remaining stage has a remaining predecessor, so walking
    // predecessors must revisit a stage.
    let mut path = vec![left[0]];
    loop {
        let cur = *path.last().expect("nonempty");
        let prev = links
            .iter()
            .find(|(a, b)| *b == cur && !ordered.contains(a))
            .map(|(a, _)| *a)
            .expect("remaining stage has a remaining predecessor");
        if let Some(pos) = path.iter().position(|&p| p == prev) {
            let mut cyc: Vec<usize> = path[pos..].to_vec();
            cyc.reverse();
            return cyc.into_iter().map(|i| doc.stages[i].id.clone()).collect();
        }
        path.push(prev);
    }
}
