use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::sync::Arc;

use dsm_core::clock::Clock;
use serde::Deserialize;
use serde_json::Value;

use crate::record::{RecordType, WireRecord};
use crate::registry::{parse_params, BuildContext, OutType, PortSpec, StageFactory};
use crate::stage::{Outbox, Stage};

pub const STAMP_TAG: &str = "t_gateway_us";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    path: String,
    #[serde(default)]
    append: bool,
    /// Tags each record with `t_gateway_us`, the gateway clock at logging time.
    #[serde(default)]
    stamp: bool,
}

pub struct LoggerFactory;

impl StageFactory for LoggerFactory {
    fn kind(&self) -> &'static str {
        "logger"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        parse_params::<Params>(params)?;
        Ok(PortSpec {
            inputs: vec![("in".into(), RecordType::Any)],
            outputs: vec![("out".into(), OutType::SameAsInput)],
        })
    }

    fn build(&self, _id: &str, params: &Value, ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        let p: Params = parse_params(params)?;
        let path = ctx.resolve(&p.path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(p.append)
            .truncate(!p.append)
            .open(&path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Box::new(Logger {
            out: BufWriter::new(f),
            clock: p.stamp.then(|| ctx.clock.clone()),
        }))
    }
}

/// Appends each record as one NDJSON line and passes it on.
struct Logger {
    out: BufWriter<File>,
    clock: Option<Arc<dyn Clock>>,
}

impl Stage for Logger {
    fn on_record(&mut self, _port: usize, mut rec: WireRecord, out: &mut Outbox) {
        if let Some(c) = &self.clock {
            rec.tags.insert(STAMP_TAG.into(), c.now_us().to_string());
        }
        match serde_json::to_string(&rec) {
            Ok(line) => {
                if let Err(e) = writeln!(self.out, "{line}") {
                    log::error!("logger write failed: {e}");
                }
            }
            Err(e) => log::error!("logger could not encode record: {e}"),
        }
        out.emit(0, rec);
    }

    fn on_watermark(&mut self, _w: i64, _out: &mut Outbox) {
        let _ = self.out.flush();
    }

    fn finish(&mut self, _out: &mut Outbox) {
        if let Err(e) = self.out.flush() {
            log::error!("logger flush failed: {e}");
        }
    }
}
