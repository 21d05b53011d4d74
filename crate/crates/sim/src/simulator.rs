use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, SignalKind, SignalSpec};
use crate::plant::{
    air_temperature, airflow_speed, check_bounds, ground_truth_risk, vibration_amplitude,
    vibration_value, EnvState, MachineState,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("{0} out of bounds")]
    OutOfBounds(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_us: i64,
    pub value: f64,
}

/// A channel to generate, at `fs_hz` (which must divide the base rate).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFeed {
    pub spec: SignalSpec,
    pub fs_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandOrigin {
    Initial,
    Schedule,
    Operator,
    Auto,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamChange {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spindle_rpm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feed_mm_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub t_us: i64,
    pub state: MachineState,
    pub origin: CommandOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub req_id: Option<String>,
    /// Ground-truth risk right after the change.
    pub risk: f64,
}

/// Ex-post quality label for one second of cutting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    /// Center of the labeled second.
    pub t_us: i64,
    pub second: u64,
    pub p: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    /// Samples per channel, indexed like the feeds given to [`Simulator::new`].
    pub samples: Vec<Vec<Sample>>,
    pub labels: Vec<LabelRow>,
    pub changes: Vec<StateChange>,
}

struct ChannelSim {
    spec: SignalSpec,
    divisor: u64,
    rng: ChaCha8Rng,
}

/// 64-bit FNV-1a, used to derive independent stream seeds from names.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

pub struct Simulator {
    cfg: ScenarioConfig,
    tick: u64,
    total_ticks: u64,
    tick_us: i64,
    state: MachineState,
    env: EnvState,
    channels: Vec<ChannelSim>,
    env_rng: ChaCha8Rng,
    label_rng: ChaCha8Rng,
    pending: Vec<(ParamChange, CommandOrigin, Option<String>)>,
    schedule_next: usize,
    initial_logged: bool,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig, feeds: Vec<ChannelFeed>) -> Result<Simulator, SimError> {
        cfg.validate()?;
        let base = cfg.base_rate_hz as f64;
        let mut channels = Vec::with_capacity(feeds.len());
        for f in feeds {
            let d = base / f.fs_hz;
            if !(f.fs_hz > 0.0 && d >= 1.0 && (d - d.round()).abs() < 1e-9) {
                return Err(SimError::InvalidConfig(format!(
                    "{}/{}: {} Hz does not divide the {} Hz base rate",
                    f.spec.node_id, f.spec.channel, f.fs_hz, cfg.base_rate_hz
                )));
            }
            let name = format!("{}/{}", f.spec.node_id, f.spec.channel);
            channels.push(ChannelSim {
                rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &name)),
                spec: f.spec,
                divisor: d.round() as u64,
            });
        }
        let p = &cfg.plant;
        let state = MachineState {
            spindle_rpm: cfg.machine.spindle_rpm,
            feed_mm_s: cfg.machine.feed_mm_s,
            tool_wear: cfg.machine.tool_wear,
            vacuum_airflow_m_s: airflow_speed(p, cfg.severity_at(0.0)),
            cutting: cfg.machine.cutting,
        };
        let env = EnvState {
            temp_c: p.ambient_temp_c,
            humidity_pct: p.ambient_humidity_pct,
            pressure_hpa: p.ambient_pressure_hpa,
        };
        let mut schedule = cfg.schedule.clone();
        schedule.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
        let mut cfg = cfg;
        cfg.schedule = schedule;
        Ok(Simulator {
            tick: 0,
            total_ticks: (cfg.duration_s * base).round() as u64,
            tick_us: 1_000_000 / cfg.base_rate_hz as i64,
            state,
            env,
            channels,
            env_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "_env")),
            label_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "_labels")),
            pending: Vec::new(),
            schedule_next: 0,
            initial_logged: false,
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn env(&self) -> &EnvState {
        &self.env
    }

    /// Simulated microseconds since the scenario started.
    pub fn elapsed_us(&self) -> i64 {
        self.tick as i64 * self.tick_us
    }

    /// Absolute simulated time (true time, µs since the Unix epoch).
    pub fn now_us(&self) -> i64 {
        self.cfg.start_epoch_us + self.elapsed_us()
    }

    pub fn tick_us(&self) -> i64 {
        self.tick_us
    }

    pub fn finished(&self) -> bool {
        self.tick >= self.total_ticks
    }

    fn t_s(&self) -> f64 {
        self.tick as f64 / self.cfg.base_rate_hz as f64
    }

    pub fn severity(&self) -> f64 {
        self.cfg.severity_at(self.t_s())
    }

    pub fn ground_truth_risk(&self) -> f64 {
        ground_truth_risk(&self.cfg.risk_coefficients, &self.state, &self.env, self.severity())
    }

    /// Validates and queues a parameter change. It takes effect at the start
    /// of the next [`Simulator::step`], never inside one.
    pub fn apply_command(
        &mut self,
        change: ParamChange,
        origin: CommandOrigin,
        req_id: Option<String>,
    ) -> Result<(), SimError> {
        let rpm = change.spindle_rpm.unwrap_or(self.state.spindle_rpm);
        let feed = change.feed_mm_s.unwrap_or(self.state.feed_mm_s);
        if change.spindle_rpm.is_some_and(|v| !v.is_finite()) {
            return Err(SimError::OutOfBounds("spindle_rpm"));
        }
        if change.feed_mm_s.is_some_and(|v| !v.is_finite()) {
            return Err(SimError::OutOfBounds("feed_mm_s"));
        }
        check_bounds(rpm, feed).map_err(SimError::OutOfBounds)?;
        self.pending.push((change, origin, req_id));
        Ok(())
    }

    fn log_change(&self, origin: CommandOrigin, req_id: Option<String>, out: &mut StepOutput) {
        out.changes.push(StateChange {
            t_us: self.now_us(),
            state: self.state,
            origin,
            req_id,
            risk: self.ground_truth_risk(),
        });
    }

    /// Advances by `dt_us` (rounded down to whole base ticks, clipped at the
    /// end of the scenario).
    pub fn step(&mut self, dt_us: i64) -> StepOutput {
        let mut out = StepOutput {
            samples: vec![Vec::new(); self.channels.len()],
            ..StepOutput::default()
        };
        if !self.initial_logged {
            self.initial_logged = true;
            self.log_change(CommandOrigin::Initial, None, &mut out);
        }
        for (change, origin, req_id) in std::mem::take(&mut self.pending) {
            // Re-check: an earlier command in the same batch may have moved the other parameter.
            let rpm = change.spindle_rpm.unwrap_or(self.state.spindle_rpm);
            let feed = change.feed_mm_s.unwrap_or(self.state.feed_mm_s);
            if check_bounds(rpm, feed).is_ok() {
                self.state.spindle_rpm = rpm;
                self.state.feed_mm_s = feed;
                self.log_change(origin, req_id, &mut out);
            }
        }
        let ticks = (dt_us.max(0) / self.tick_us) as u64;
        let end = (self.tick + ticks).min(self.total_ticks);
        let base = self.cfg.base_rate_hz as u64;
        while self.tick < end {
            self.apply_schedule(&mut out);
            let t_s = self.t_s();
            let severity = self.cfg.severity_at(t_s);
            self.state.vacuum_airflow_m_s = airflow_speed(&self.cfg.plant, severity);
            if self.tick % base == 0 {
                if self.tick > 0 {
                    self.walk_env();
                }
                let second = self.tick / base;
                if (second + 1) * base <= self.total_ticks {
                    let risk = self.ground_truth_risk();
                    let label = rand::Rng::random_bool(&mut self.label_rng, risk.clamp(0.0, 1.0)) as u8;
                    out.labels.push(LabelRow {
                        t_us: self.now_us() + 500_000,
                        second,
                        p: risk,
                        label,
                    });
                }
            }
            let now = self.now_us();
            let p = &self.cfg.plant;
            let amp = vibration_amplitude(p, self.state.feed_mm_s, self.state.tool_wear);
            for (i, ch) in self.channels.iter_mut().enumerate() {
                if self.tick % ch.divisor != 0 {
                    continue;
                }
                let s = &ch.spec;
                let value = match s.kind {
                    SignalKind::Vibration => {
                        let v = if self.state.cutting {
                            vibration_value(p, amp, self.state.spindle_rpm, t_s, s.phase_rad)
                        } else {
                            0.0
                        };
                        s.gain * v + gauss(&mut ch.rng, p.vib_noise_std)
                    }
                    SignalKind::AirSpeed => {
                        s.gain * self.state.vacuum_airflow_m_s + gauss(&mut ch.rng, p.airflow_noise_std)
                    }
                    SignalKind::AirTemperature => {
                        air_temperature(p, self.env.temp_c, self.state.feed_mm_s)
                            + gauss(&mut ch.rng, p.air_temp_noise_std)
                    }
                    SignalKind::AmbientTemperature => {
                        self.env.temp_c + gauss(&mut ch.rng, p.ambient_noise_std)
                    }
                    SignalKind::AmbientHumidity => (self.env.humidity_pct
                        + gauss(&mut ch.rng, p.ambient_noise_std))
                    .clamp(0.0, 100.0),
                    SignalKind::AmbientPressure => {
                        self.env.pressure_hpa + gauss(&mut ch.rng, p.ambient_noise_std)
                    }
                };
                out.samples[i].push(Sample { t_us: now, value });
            }
            if self.state.cutting {
                let dt = 1.0 / base as f64;
                self.state.tool_wear =
                    (self.state.tool_wear + p.wear_rate * self.state.feed_mm_s * dt).min(1.0);
            }
            self.tick += 1;
        }
        out
    }

    fn apply_schedule(&mut self, out: &mut StepOutput) {
        let base = self.cfg.base_rate_hz as f64;
        while let Some(s) = self.cfg.schedule.get(self.schedule_next) {
            if (s.t_s * base).round() as u64 > self.tick {
                break;
            }
            let s = *s;
            self.schedule_next += 1;
            if let Some(r) = s.spindle_rpm {
                self.state.spindle_rpm = r;
            }
            if let Some(f) = s.feed_mm_s {
                self.state.feed_mm_s = f;
            }
            if let Some(c) = s.cutting {
                self.state.cutting = c;
            }
            if s.tool_change {
                self.state.tool_wear = 0.0;
            }
            self.log_change(CommandOrigin::Schedule, None, out);
        }
    }

    fn walk_env(&mut self) {
        let p = &self.cfg.plant;
        let r = &mut self.env_rng;
        let bounded = |v: f64, centre: f64, band: f64| v.clamp(centre - band, centre + band);
        self.env.temp_c = bounded(
            self.env.temp_c + gauss(r, p.temp_walk_std),
            p.ambient_temp_c,
            p.temp_band_c,
        );
        self.env.humidity_pct = bounded(
            self.env.humidity_pct + gauss(r, p.humidity_walk_std),
            p.ambient_humidity_pct,
            p.humidity_band_pct,
        )
        .clamp(0.0, 100.0);
        self.env.pressure_hpa = bounded(
            self.env.pressure_hpa + gauss(r, p.pressure_walk_std),
            p.ambient_pressure_hpa,
            p.pressure_band_hpa,
        );
    }
}
