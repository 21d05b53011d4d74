use std::collections::BTreeSet;

use dsm_core::dsp::{dominant_frequency, window_features};
use serde::Deserialize;
use serde_json::Value;

use crate::record::{RecordType, WireRecord, WINDOW_LEN};
use crate::registry::{parse_params, BuildContext, OutType, PortSpec, StageFactory};
use crate::stage::{Outbox, Stage};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    #[serde(default)]
    names: Option<Vec<String>>,
}

pub struct FeatureFactory;

impl StageFactory for FeatureFactory {
    fn kind(&self) -> &'static str {
        "feature"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        let p: Params = parse_params(params)?;
        if p.names.as_ref().is_some_and(|n| n.is_empty()) {
            return Err("names must not be empty".into());
        }
        Ok(PortSpec {
            inputs: vec![("in".into(), RecordType::Measurement)],
            outputs: vec![("out".into(), OutType::Fixed(RecordType::Features))],
        })
    }

    fn build(&self, _id: &str, params: &Value, _ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        let p: Params = parse_params(params)?;
        Ok(Box::new(Feature {
            names: p.names.map(|n| n.into_iter().collect()),
        }))
    }
}

/// Turns measurements into feature records. Node-computed features pass
/// through; raw samples are summarized here.
struct Feature {
    names: Option<BTreeSet<String>>,
}

pub(crate) fn compute(rec: &WireRecord) -> Option<dsm_core::FeatureMap> {
    match rec.samples.len() {
        0 => None,
        1 => Some([("mean".to_owned(), rec.samples[0])].into_iter().collect()),
        _ => {
            let mut f = window_features(&rec.samples).ok()?;
            if let Some(fs) = rec.fs_hz() {
                f.dom_freq_hz = dominant_frequency(&rec.samples, fs).ok();
            }
            Some(f.to_map())
        }
    }
}

impl Stage for Feature {
    fn on_record(&mut self, _port: usize, mut rec: WireRecord, out: &mut Outbox) {
        if !rec.has_features() {
            match compute(&rec) {
                Some(f) => rec.values.extend(f),
                None => {
                    out.drop_weight(rec.weight);
                    return;
                }
            }
        }
        rec.samples.clear();
        rec.values.remove(WINDOW_LEN);
        if let Some(names) = &self.names {
            rec.values.retain(|k, _| names.contains(k));
        }
        if rec.values.is_empty() {
            out.drop_weight(rec.weight);
            return;
        }
        out.emit(0, rec);
    }
}
