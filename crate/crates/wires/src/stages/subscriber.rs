use dsm_broker::{Delivery, TopicFilter};
use dsm_core::decode_message;
use serde::Deserialize;
use serde_json::Value;

use crate::record::{RecordType, WireRecord};
use crate::registry::{parse_params, BuildContext, OutType, PortSpec, StageFactory};
use crate::stage::{Outbox, Stage};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    filter: String,
}

pub struct SubscriberFactory;

impl StageFactory for SubscriberFactory {
    fn kind(&self) -> &'static str {
        "subscriber"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        let p: Params = parse_params(params)?;
        TopicFilter::parse(&p.filter).map_err(|e| format!("filter: {e}"))?;
        Ok(PortSpec {
            inputs: vec![],
            outputs: vec![("out".into(), OutType::Fixed(RecordType::Measurement))],
        })
    }

    fn build(&self, id: &str, params: &Value, _ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        let p: Params = parse_params(params)?;
        Ok(Box::new(Subscriber {
            id: id.to_owned(),
            filter: p.filter,
        }))
    }
}

/// Decodes measurement envelopes; anything undecodable is dead-lettered.
struct Subscriber {
    id: String,
    filter: String,
}

impl Stage for Subscriber {
    fn on_record(&mut self, _port: usize, rec: WireRecord, out: &mut Outbox) {
        out.emit(0, rec);
    }

    fn on_delivery(&mut self, d: Delivery, out: &mut Outbox) {
        match decode_message(&d.payload) {
            Ok(m) => out.emit(0, WireRecord::from_message(&m)),
            Err(e) => {
                log::warn!("{}: dead-lettering message on {}: {e}", self.id, d.topic);
                out.dead_letter(1);
            }
        }
    }

    fn subscription(&self) -> Option<String> {
        Some(self.filter.clone())
    }
}
