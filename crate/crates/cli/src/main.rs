use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsm_cli::commands::{self, ExportFrom};
use dsm_cli::train::{load_dataset, record_campaign, train_records, write_training, Hyper};
use dsm_cli::{build_report, render, run_session, CliError, Overrides, Result, RunConfig, RunOptions, SinkMode};
use dsm_core::ProcessingMode;

#[derive(Parser)]
#[command(name = "dsm", version, about = "Distributed smart measurement: run, compare, train, deploy")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Inputs {
    #[arg(long, default_value = "config/scenario.json")]
    scenario: PathBuf,
    /// Directory of node configs; defaults to `nodes/` next to the scenario.
    #[arg(long)]
    nodes: Option<PathBuf>,
    #[arg(long, default_value = "config/graph.json")]
    graph: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds; overrides the scenario.
    #[arg(long)]
    duration: Option<f64>,
}

impl Inputs {
    fn nodes_dir(&self) -> PathBuf {
        self.nodes.clone().unwrap_or_else(|| {
            self.scenario.parent().unwrap_or(Path::new(".")).join("nodes")
        })
    }

    fn overrides(&self, mode: Option<u8>) -> Overrides {
        Overrides {
            seed: self.seed,
            duration_s: self.duration,
            mode: mode.and_then(ProcessingMode::from_u8),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one session and write its artifacts and report.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        /// Processing mode for every node: 1 raw, 2 features, 3 hybrid.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        mode: Option<u8>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Bind address of the gateway admin endpoint (metrics, model deploy).
        #[arg(long)]
        gateway: Option<String>,
        /// Existing sink to upload to, or `off`; by default a sink runs in `<out>/sink`.
        #[arg(long)]
        sink: Option<String>,
        /// Pace the run to wall-clock time.
        #[arg(long)]
        realtime: bool,
    },
    /// Run the same scenario in modes 1, 2 and 3 and tabulate the traffic.
    CompareModes {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
    /// Fit the quality model on an exported dataset or a recorded campaign.
    Train {
        #[arg(long, conflicts_with = "campaign", required_unless_present = "campaign")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        campaign: Option<PathBuf>,
        /// Seed of the train/test split; a campaign's own seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Upload a model to a running gateway and confirm it is active.
    Deploy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gateway: String,
    },
    /// Export labeled feature records as NDJSON.
    Export {
        #[arg(long, conflicts_with = "store", required_unless_present = "store")]
        sink: Option<String>,
        /// Sink store directory, read directly.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Session id, or a prefix ending in `*`.
        #[arg(long)]
        session: Option<String>,
        #[arg(long, default_value = "runs/dataset.ndjson")]
        out: PathBuf,
    },
    /// Recompute the report of a finished run from its artifacts.
    Report {
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            inputs,
            mode,
            out,
            gateway,
            sink,
            realtime,
        } => {
            let cfg = RunConfig::load(&inputs.scenario, &inputs.nodes_dir(), &inputs.graph, &inputs.overrides(mode))?;
            let sink = match sink.as_deref() {
                None => SinkMode::Local,
                Some("off") => SinkMode::Off,
                Some(u) => SinkMode::Remote(u.to_string()),
            };
            let o = run_session(
                &cfg,
                &RunOptions {
                    out: out.clone(),
                    sink,
                    admin: gateway,
                    realtime,
                    ..RunOptions::default()
                },
            )?;
            print!("{}", render(&o.report));
            eprintln!("artifacts in {}", out.display());
        }
        Cmd::CompareModes { inputs, out } => {
            if inputs.nodes.is_none() && !inputs.nodes_dir().is_dir() {
                return Err(CliError::Config(format!("{}: no such directory", inputs.nodes_dir().display())));
            }
            let rows = commands::compare_modes(&inputs.scenario, &inputs.nodes_dir(), &inputs.graph, &inputs.overrides(None), &out)?;
            print!("{}", commands::render_modes(&rows));
        }
        Cmd::Train {
            dataset,
            campaign,
            seed,
            out,
        } => {
            let (records, hyper, split_seed) = match (dataset, campaign) {
                (Some(d), _) => (load_dataset(&d)?, Hyper::default(), seed.unwrap_or(0)),
                (None, Some(c)) => {
                    let (c, records) = record_campaign(&c, &out)?;
                    (records, c.hyper, seed.unwrap_or(c.seed))
                }
                (None, None) => unreachable!("clap requires one"),
            };
            let (rep, summary) = train_records(&records, &hyper, split_seed)?;
            let path = write_training(&out, &rep, &summary)?;
            println!("model {} -> {}", summary.model_version, path.display());
            println!("{} sessions, {} records ({} train, {} held out)", summary.sessions, summary.records, summary.train_rows, summary.test_rows);
            match summary.auc {
                Some(a) => println!("held-out AUC {a:.4}, accuracy {:.4}", summary.accuracy),
                None => println!("held-out split has one class; AUC undefined"),
            }
            for (n, w) in summary.feature_names.iter().zip(&summary.w) {
                println!("  {n:<24} {w:+.4}");
            }
            println!("  {:<24} {:+.4}", "bias", summary.b);
        }
        Cmd::Deploy { model, gateway } => {
            let v = commands::deploy(&model, &gateway)?;
            println!("gateway {gateway} now runs model {v}");
        }
        Cmd::Export {
            sink,
            store,
            session,
            out,
        } => {
            let from = match (sink, store) {
                (Some(s), _) => ExportFrom::Sink(s),
                (None, Some(d)) => ExportFrom::Store(d),
                (None, None) => unreachable!("clap requires one"),
            };
            let n = commands::export(&from, session, &out)?;
            println!("{n} records -> {}", out.display());
        }
        Cmd::Report { out } => {
            let r = build_report(&out)?;
            dsm_cli::run::write_json(&out.join("report.json"), &r)?;
            print!("{}", render(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dsm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
