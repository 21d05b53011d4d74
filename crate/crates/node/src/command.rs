//! Node command protocol on `<site>/<node>/_node/cmd`, acknowledged on
//! `<site>/<node>/_node/events`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SetMode { mode: u8, channel: Option<String> },
    SetWindow { window: u32, channel: Option<String> },
    SetRate { fs_hz: f64, channel: Option<String> },
    Ping,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    cmd: String,
    #[serde(default)]
    args: Value,
    req_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeArgs {
    mode: u8,
    #[serde(default)]
    channel: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowArgs {
    window: u32,
    #[serde(default)]
    channel: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RateArgs {
    fs_hz: f64,
    #[serde(default)]
    channel: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub req_id: Option<String>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmd: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// A command that could not be understood. `req_id` is kept when the
/// envelope was readable so the sender can correlate the rejection.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub req_id: Option<String>,
    pub cmd: Option<String>,
    pub reason: String,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SetMode { .. } => "set_mode",
            Command::SetWindow { .. } => "set_window",
            Command::SetRate { .. } => "set_rate",
            Command::Ping => "ping",
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<(String, Command), Rejected> {
        let env: Envelope = serde_json::from_slice(bytes).map_err(|e| {
            let req_id = serde_json::from_slice::<Value>(bytes)
                .ok()
                .and_then(|v| v.get("req_id")?.as_str().map(str::to_owned));
            Rejected {
                req_id,
                cmd: None,
                reason: format!("malformed command: {e}"),
            }
        })?;
        let reject = |reason: String| Rejected {
            req_id: Some(env.req_id.clone()),
            cmd: Some(env.cmd.clone()),
            reason,
        };
        let args = if env.args.is_null() {
            Value::Object(Default::default())
        } else {
            env.args.clone()
        };
        let bad_args = |e: serde_json::Error| reject(format!("bad arguments: {e}"));
        let cmd = match env.cmd.as_str() {
            "set_mode" => {
                let a: ModeArgs = serde_json::from_value(args).map_err(bad_args)?;
                Command::SetMode {
                    mode: a.mode,
                    channel: a.channel,
                }
            }
            "set_window" => {
                let a: WindowArgs = serde_json::from_value(args).map_err(bad_args)?;
                Command::SetWindow {
                    window: a.window,
                    channel: a.channel,
                }
            }
            "set_rate" => {
                let a: RateArgs = serde_json::from_value(args).map_err(bad_args)?;
                Command::SetRate {
                    fs_hz: a.fs_hz,
                    channel: a.channel,
                }
            }
            "ping" => Command::Ping,
            other => return Err(reject(format!("unknown command {other}"))),
        };
        Ok((env.req_id, cmd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_commands() {
        let (id, c) =
            Command::parse(br#"{"cmd":"set_window","args":{"window":128},"req_id":"a1"}"#).unwrap();
        assert_eq!(id, "a1");
        assert_eq!(
            c,
            Command::SetWindow {
                window: 128,
                channel: None
            }
        );
        let (_, c) = Command::parse(br#"{"cmd":"ping","req_id":"p"}"#).unwrap();
        assert_eq!(c, Command::Ping);
    }

    #[test]
    fn rejections_keep_req_id() {
        let r = Command::parse(br#"{"cmd":"reboot","req_id":"x"}"#).unwrap_err();
        assert_eq!(r.req_id.as_deref(), Some("x"));
        let r = Command::parse(br#"{"cmd":"set_mode","args":{"mode":"fast"},"req_id":"y"}"#)
            .unwrap_err();
        assert_eq!(r.req_id.as_deref(), Some("y"));
        let r = Command::parse(b"not json").unwrap_err();
        assert_eq!(r.req_id, None);
    }
}
