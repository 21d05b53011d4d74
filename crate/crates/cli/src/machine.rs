//! The trimming machine as seen from the broker: it takes `set_params`
//! commands, acknowledges them, and publishes its parameters.

use std::collections::BTreeMap;
use std::io::Write;

use dsm_broker::{Broker, LocalClient, LocalOptions, QoS};
use dsm_core::{build_topic, encode_message, MeasurementMessage, Payload, ProcessingMode, TopicKind, TopicPath, Unit};
use dsm_node::Ack;
use dsm_sim::{CommandOrigin, MachineState, ParamChange, Simulator, StepOutput};
use dsm_wires::MACHINE_NODE;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const PARAMS_CHANNEL: &str = "params";
/// Prefix of request ids generated by the gateway's auto-apply path.
pub const AUTO_PREFIX: &str = "auto-";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MachineCommand {
    cmd: String,
    #[serde(default)]
    req_id: Option<String>,
    #[serde(default)]
    args: ParamChange,
}

/// One line of `machine.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MachineEvent {
    Change {
        t_us: i64,
        origin: CommandOrigin,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req_id: Option<String>,
        state: MachineState,
        /// Ground-truth risk just before a commanded change took effect.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        risk_before: Option<f64>,
        risk: f64,
    },
    Rejected {
        t_us: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req_id: Option<String>,
        reason: String,
    },
}

pub struct Machine {
    client: LocalClient,
    params_topic: String,
    cmd_topic: String,
    events_topic: String,
    seq: u64,
    next_periodic_us: i64,
    risk_before: BTreeMap<String, f64>,
    log: Box<dyn Write + Send>,
}

impl Machine {
    pub fn new(broker: &Broker, site: &str, log: Box<dyn Write + Send>) -> Result<Machine> {
        let node_topic = |k| {
            TopicPath::node(site, MACHINE_NODE, k)
                .map(|t| t.render())
                .map_err(CliError::config)
        };
        let cmd_topic = node_topic(TopicKind::Cmd)?;
        let client = broker
            .local_client(MACHINE_NODE, LocalOptions::default())
            .map_err(CliError::runtime)?;
        client.subscribe(&cmd_topic, QoS::AtLeastOnce).map_err(CliError::runtime)?;
        Ok(Machine {
            client,
            params_topic: build_topic(site, MACHINE_NODE, PARAMS_CHANNEL, TopicKind::Features)
                .map_err(CliError::config)?
                .render(),
            cmd_topic,
            events_topic: node_topic(TopicKind::Events)?,
            seq: 0,
            next_periodic_us: i64::MIN,
            risk_before: BTreeMap::new(),
            log,
        })
    }

    /// Queues every command received so far on the simulator; each is
    /// acknowledged at once and takes effect at the next step.
    pub fn drain_commands(&mut self, sim: &mut Simulator) -> Result<()> {
        while let Some(d) = self.client.try_recv() {
            if d.topic != self.cmd_topic {
                continue;
            }
            let (req_id, outcome) = match serde_json::from_slice::<MachineCommand>(&d.payload) {
                Err(e) => (None, Err(format!("malformed command: {e}"))),
                Ok(c) if c.cmd != "set_params" => (c.req_id, Err(format!("unknown command {}", c.cmd))),
                Ok(c) if c.req_id.is_none() => (None, Err("missing req_id".into())),
                Ok(c) => {
                    let id = c.req_id.expect("checked");
                    let origin = if id.starts_with(AUTO_PREFIX) {
                        CommandOrigin::Auto
                    } else {
                        CommandOrigin::Operator
                    };
                    let r = sim
                        .apply_command(c.args, origin, Some(id.clone()))
                        .map_err(|e| e.to_string());
                    if r.is_ok() {
                        self.risk_before.insert(id.clone(), sim.ground_truth_risk());
                    }
                    (Some(id), r)
                }
            };
            if let Err(reason) = &outcome {
                self.write(&MachineEvent::Rejected {
                    t_us: sim.now_us(),
                    req_id: req_id.clone(),
                    reason: reason.clone(),
                })?;
            }
            let ack = Ack {
                req_id,
                ok: outcome.is_ok(),
                reason: outcome.err(),
                node_id: MACHINE_NODE.into(),
                cmd: Some("set_params".into()),
                config_digest: None,
            };
            let body = serde_json::to_vec(&ack).expect("serializable");
            self.client
                .publish_nowait(&self.events_topic, body, QoS::AtLeastOnce)
                .map_err(CliError::runtime)?;
        }
        Ok(())
    }

    /// Logs the step's state changes and publishes parameters on change and
    /// once per second.
    pub fn after_step(&mut self, sim: &Simulator, out: &StepOutput) -> Result<()> {
        for c in &out.changes {
            let risk_before = c.req_id.as_ref().and_then(|id| self.risk_before.remove(id));
            self.write(&MachineEvent::Change {
                t_us: c.t_us,
                origin: c.origin,
                req_id: c.req_id.clone(),
                state: c.state,
                risk_before,
                risk: c.risk,
            })?;
            self.publish(c.t_us, &c.state)?;
        }
        let now = sim.now_us();
        if now >= self.next_periodic_us {
            self.publish(now, sim.state())?;
            let start = sim.config().start_epoch_us;
            self.next_periodic_us = start + ((now - start) / 1_000_000 + 1) * 1_000_000;
        }
        Ok(())
    }

    fn publish(&mut self, t_us: i64, s: &MachineState) -> Result<()> {
        let features = BTreeMap::from([
            ("spindle_rpm".to_string(), s.spindle_rpm),
            ("feed_mm_s".to_string(), s.feed_mm_s),
            ("tool_wear".to_string(), s.tool_wear),
            ("chip_load".to_string(), s.chip_load()),
            ("cutting".to_string(), s.cutting as u8 as f64),
        ]);
        let msg = MeasurementMessage {
            node_id: MACHINE_NODE.into(),
            channel: PARAMS_CHANNEL.into(),
            seq: self.seq,
            t_acq_us: t_us,
            mode: ProcessingMode::Features,
            unit: Unit::One,
            fs_hz: 1.0,
            window_len: 1,
            payload: Payload::Features(features),
        };
        self.seq += 1;
        let body = encode_message(&msg).map_err(CliError::runtime)?;
        self.client
            .publish_nowait(&self.params_topic, body, QoS::AtLeastOnce)
            .map_err(CliError::runtime)
    }

    fn write(&mut self, e: &MachineEvent) -> Result<()> {
        serde_json::to_writer(&mut self.log, e).map_err(CliError::runtime)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.log.flush()?;
        Ok(())
    }
}
