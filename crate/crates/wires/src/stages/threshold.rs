use serde::Deserialize;
use serde_json::Value;

use crate::record::{RecordType, WireRecord};
use crate::registry::{parse_params, BuildContext, OutType, PortSpec, StageFactory};
use crate::stage::{Outbox, Stage};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    field: String,
    level: f64,
}

pub struct ThresholdFactory;

impl StageFactory for ThresholdFactory {
    fn kind(&self) -> &'static str {
        "threshold"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        let p: Params = parse_params(params)?;
        if !p.level.is_finite() {
            return Err("level must be finite".into());
        }
        Ok(PortSpec {
            inputs: vec![("in".into(), RecordType::Features)],
            outputs: vec![("out".into(), OutType::SameAsInput)],
        })
    }

    fn build(&self, _id: &str, params: &Value, _ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        let p: Params = parse_params(params)?;
        Ok(Box::new(Threshold {
            flag: format!("{}_above", p.field),
            field: p.field,
            level: p.level,
        }))
    }
}

/// Adds `<field>_above` = 1 when the field exceeds `level`, else 0.
struct Threshold {
    field: String,
    flag: String,
    level: f64,
}

impl Stage for Threshold {
    fn on_record(&mut self, _port: usize, mut rec: WireRecord, out: &mut Outbox) {
        if let Some(&v) = rec.values.get(&self.field) {
            let above = if v > self.level { 1.0 } else { 0.0 };
            rec.values.insert(self.flag.clone(), above);
        }
        out.emit(0, rec);
    }
}
