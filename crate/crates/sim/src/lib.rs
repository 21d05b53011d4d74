//! Trimming-cell simulator.
//!
//! Every response function and coefficient here is invented plant truth,
//! centralized in [`PlantParams`] and [`RiskCoefficients`] so experiments can
//! check model recovery against it. All noise comes from per-stream ChaCha8
//! generators seeded from the scenario seed, so a scenario and seed determine
//! every sample.

pub mod config;
pub mod plant;
pub mod session;
pub mod simulator;

pub use config::{
    DefectEpisode, MachineInit, PlantParams, RiskCoefficients, ScenarioConfig, ScheduledChange,
    SignalKind, SignalSpec,
};
pub use plant::{
    air_temperature, airflow_speed, ground_truth_risk, vibration_amplitude, vibration_value,
    EnvState, MachineState,
};
pub use session::{run_scenario, SessionRow, WindowedChannel};
pub use simulator::{
    ChannelFeed, CommandOrigin, LabelRow, ParamChange, Sample, SimError, Simulator, StateChange,
    StepOutput,
};

/// Machine parameter bounds.
pub const RPM_RANGE: (f64, f64) = (3000.0, 24000.0);
pub const FEED_RANGE: (f64, f64) = (1.0, 50.0);
