//! `dhwcast`: run the forecasting and steering pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dhwcast::pipeline::{report, ForecastMode, ModelName, PipelineConfig, RunRecord, Stage, Workspace};
use dhwcast::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "dhwcast", version, about = "Hot-water demand forecasting and heat-pump steering")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; artifacts go to <out>/<household>/<model>/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    household: Option<String>,
    #[arg(long, global = true, value_enum)]
    model: Option<ModelArg>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gbdt,
    Lstm,
    Bilstm,
    Attlstm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OneStep,
    Recursive,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a household log with ground-truth events.
    Simulate,
    /// Resample, prune and split the raw log.
    Ingest,
    /// Build lag features and screen them by OLS significance.
    Features,
    /// Random-search cross-validation over the boosting grid.
    Tune {
        #[arg(long)]
        n_iter: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        row_stride: Option<usize>,
        /// Shuffled folds instead of contiguous time blocks.
        #[arg(long)]
        cv_shuffle: bool,
    },
    /// Fit the configured model on the training split.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Forecast t_mid over both splits.
    Forecast {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Isolation-forest shower detection on the forecasts.
    Detect {
        #[arg(long)]
        contamination: Option<f64>,
    },
    /// Weekday × hour demand calendar from detected history.
    Calendar {
        /// Count test-window detections too.
        #[arg(long)]
        include_test_window: bool,
    },
    /// Start/stop commands from the calendar.
    Plan {
        #[arg(long)]
        p_star: Option<f64>,
        #[arg(long)]
        lead_minutes: Option<i64>,
    },
    /// Forecast, detection and controller metrics.
    Evaluate,
    /// Aggregate metrics across households and models under --out.
    Report,
    /// Every applicable stage in order.
    Run,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_json(&std::fs::read_to_string(p).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", p.display()))
        })?)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(h) = &cli.household {
        cfg.household = h.clone();
    }
    if let Some(m) = cli.model {
        cfg.model = match m {
            ModelArg::Gbdt => ModelName::Gbdt,
            ModelArg::Lstm => ModelName::Lstm,
            ModelArg::Bilstm => ModelName::Bilstm,
            ModelArg::Attlstm => ModelName::Attlstm,
        };
    }
    if cli.sequential {
        cfg.exec = Exec::Sequential;
    }
    match &cli.command {
        Command::Tune { n_iter, k, row_stride, cv_shuffle } => {
            cfg.tune.shuffle |= *cv_shuffle;
            cfg.tune.n_iter = n_iter.unwrap_or(cfg.tune.n_iter);
            cfg.tune.k = k.unwrap_or(cfg.tune.k);
            cfg.tune.row_stride = row_stride.unwrap_or(cfg.tune.row_stride);
        }
        Command::Train { epochs: Some(e) } => cfg.nn.epochs = *e,
        Command::Forecast { mode: Some(m) } => {
            cfg.forecast.mode = match m {
                ModeArg::OneStep => ForecastMode::OneStep,
                ModeArg::Recursive => ForecastMode::Recursive,
            }
        }
        Command::Detect { contamination: Some(c) } => cfg.detect.contamination = *c,
        Command::Calendar { include_test_window: true } => cfg.calendar.include_test_window = true,
        Command::Plan { p_star, lead_minutes } => {
            cfg.calendar.plan.p_star = p_star.unwrap_or(cfg.calendar.plan.p_star);
            cfg.calendar.plan.lead_minutes = lead_minutes.unwrap_or(cfg.calendar.plan.lead_minutes);
        }
        _ => {}
    }
    Ok(cfg)
}

fn summary(rec: &RunRecord) -> serde_json::Value {
    serde_json::json!({
        "run_id": rec.run_id,
        "stage": rec.stage,
        "household": rec.household,
        "model": rec.model,
        "metrics": rec.metrics,
        "artifacts": rec.artifacts,
    })
}

fn execute(cli: &Cli) -> Result<Vec<serde_json::Value>> {
    let cfg = load_config(cli)?;
    let stage = match &cli.command {
        Command::Config => return Ok(vec![serde_json::to_value(cfg.resolved())?]),
        Command::Report => return Ok(vec![summary(&report(&cfg.out)?)]),
        Command::Run => {
            let ws = Workspace::new(&cfg)?;
            log::info!("run {} in {}", ws.run_id, ws.dir.display());
            return Ok(ws.run_all()?.iter().map(summary).collect());
        }
        Command::Simulate => Stage::Simulate,
        Command::Ingest => Stage::Ingest,
        Command::Features => Stage::Features,
        Command::Tune { .. } => Stage::Tune,
        Command::Train { .. } => Stage::Train,
        Command::Forecast { .. } => Stage::Forecast,
        Command::Detect { .. } => Stage::Detect,
        Command::Calendar { .. } => Stage::Calendar,
        Command::Plan { .. } => Stage::Plan,
        Command::Evaluate => Stage::Evaluate,
    };
    let ws = Workspace::new(&cfg)?;
    log::info!("{} for run {} in {}", stage.as_str(), ws.run_id, ws.dir.display());
    Ok(vec![summary(&ws.run(stage)?)])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(out) => {
            for v in out {
                println!("{v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let err = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{err}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
