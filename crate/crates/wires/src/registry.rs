//! Stage kinds are looked up by name in a [`Registry`] of factories, so new
//! kinds can be added without touching the runtime.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use dsm_broker::Broker;
use dsm_cloud::BatchTransport;
use dsm_core::clock::{Clock, SystemClock};
use serde_json::Value;

use crate::record::RecordType;
use crate::stage::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutType {
    Fixed(RecordType),
    /// Pass-through ports carry whatever arrived on the first input.
    SameAsInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PortSpec {
    pub inputs: Vec<(String, RecordType)>,
    pub outputs: Vec<(String, OutType)>,
}

impl PortSpec {
    pub fn input(&self, name: &str) -> Option<usize> {
        self.inputs.iter().position(|(n, _)| n == name)
    }

    pub fn output(&self, name: &str) -> Option<usize> {
        self.outputs.iter().position(|(n, _)| n == name)
    }
}

pub type TransportFactory = Arc<dyn Fn() -> Box<dyn BatchTransport> + Send + Sync>;

/// Everything a factory may need to build a stage.
#[derive(Clone)]
pub struct BuildContext {
    pub broker: Option<Broker>,
    pub clock: Arc<dyn Clock>,
    pub site: String,
    /// Tag attached to records leaving for the cloud.
    pub session: String,
    /// Relative paths in stage params resolve against this directory.
    pub base_dir: PathBuf,
    pub sink_url: Option<String>,
    /// Overrides the HTTP uplink, for fault injection.
    pub cloud_transport: Option<TransportFactory>,
}

impl Default for BuildContext {
    fn default() -> Self {
        BuildContext {
            broker: None,
            clock: Arc::new(SystemClock),
            site: "plant1".into(),
            session: "session".into(),
            base_dir: PathBuf::from("."),
            sink_url: None,
            cloud_transport: None,
        }
    }
}

impl BuildContext {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }
}

pub trait StageFactory: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Checks the parameters and declares the ports they imply.
    fn ports(&self, params: &Value) -> Result<PortSpec, String>;

    /// Builds a ready-to-run stage. Failures abort pipeline startup.
    fn build(&self, id: &str, params: &Value, ctx: &BuildContext) -> Result<Box<dyn Stage>, String>;
}

#[derive(Clone, Default)]
pub struct Registry {
    factories: BTreeMap<String, Arc<dyn StageFactory>>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    /// All built-in stage kinds.
    pub fn builtin() -> Self {
        let mut r = Registry::empty();
        for f in crate::stages::builtin_factories() {
            r.register(f);
        }
        r
    }

    pub fn register(&mut self, f: Arc<dyn StageFactory>) {
        self.factories.insert(f.kind().to_owned(), f);
    }

    pub fn get(&self, kind: &str) -> Option<&Arc<dyn StageFactory>> {
        self.factories.get(kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

/// Deserializes stage params, mapping errors to a readable reason.
pub fn parse_params<T: serde::de::DeserializeOwned>(params: &Value) -> Result<T, String> {
    let v = if params.is_null() {
        Value::Object(Default::default())
    } else {
        params.clone()
    };
    serde_json::from_value(v).map_err(|e| e.to_string())
}
