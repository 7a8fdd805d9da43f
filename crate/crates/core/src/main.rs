use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use pucycle::cycle::{read_trace_csv, write_trace_csv};
use pucycle::harness::eval::{evaluate_condition, write_report};
use pucycle::harness::plot::{emit_ellipse_plot, emit_gain_plot};
use pucycle::harness::table::{multi_seed, run_grid, evaluate_runs};
use pucycle::harness::{train_all, ExperimentConfig, TrainedModels};
use pucycle::trajgen::{make_dataset, Dataset, GeneratorConfig};
use pucycle::{Error, Result};

#[derive(Parser)]
#[command(name = "pucycle", version, about = "Recurrent prediction-update filtering of 2-D trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON Lines.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.01)]
        sigma_w: f64,
        #[arg(long, default_value_t = 0.0)]
        p_outl: f64,
        #[arg(long, default_value_t = 0.0)]
        p_miss: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cycle networks and both baselines on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON experiment config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Observation condition of the dataset, overriding the config.
        #[arg(long)]
        sigma_w: Option<f64>,
        #[arg(long)]
        p_outl: Option<f64>,
        #[arg(long)]
        p_miss: Option<f64>,
    },
    /// Score trained checkpoints on a dataset's evaluation split.
    Eval {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the cycle over one evaluation sequence and export its trace.
    Filter {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Position within the evaluation split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Render a gain or ellipse diagnostic from a trace CSV.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        n_sigma: f64,
    },
    /// Train and score all eight conditions, reusing cached checkpoints.
    Table {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated seeds; more than one adds an averaged report.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Gain,
    Ellipse,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn eval_sequence(data: &Dataset, index: usize) -> Result<&pucycle::trajgen::ObservedSequence> {
    data.eval
        .get(index)
        .ok_or_else(|| Error::InvalidInput(format!("evaluation split has {} sequences, index {index}", data.eval.len())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { seed, n, sigma_w, p_outl, p_miss, out } => {
            let cfg = GeneratorConfig { seed, sigma_w, p_outl, p_miss, ..Default::default() };
            let data = make_dataset(&cfg, n)?;
            data.write_jsonl(&out)?;
            info!("wrote {} train + {} eval sequences to {}", data.train.len(), data.eval.len(), out.display());
        }
        Command::Train { data, config, out_dir, sigma_w, p_outl, p_miss } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = sigma_w {
                cfg.generator.sigma_w = v;
            }
            if let Some(v) = p_outl {
                cfg.generator.p_outl = v;
            }
            if let Some(v) = p_miss {
                cfg.generator.p_miss = v;
            }
            cfg.validate()?;
            let data = Dataset::read_jsonl(&data)?;
            let models = train_all(&cfg, &data)?;
            models.save(&out_dir)?;
            info!("checkpoints written to {}", out_dir.display());
        }
        Command::Eval { checkpoints, data, report } => {
            let models = TrainedModels::load(&checkpoints)?;
            let data = Dataset::read_jsonl(&data)?;
            let cells = evaluate_condition(&models, &data.eval)?;
            for c in &cells {
                println!("{:<18} ade {:.4} m  sigma {:.4} m", c.model, c.ade, c.sigma_ade);
            }
            write_report(&cells, &report)?;
        }
        Command::Filter { checkpoints, data, trace, index } => {
            let models = TrainedModels::load(&checkpoints)?;
            let data = Dataset::read_jsonl(&data)?;
            let t = models.filter(eval_sequence(&data, index)?)?;
            if let Some(dir) = trace.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_trace_csv(&t, std::fs::File::create(&trace)?)?;
        }
        Command::Plot { trace, kind, out, n_sigma } => {
            if !trace.exists() {
                return Err(Error::Missing { what: "trace", path: trace });
            }
            let t = read_trace_csv(&std::fs::read_to_string(&trace)?)?;
            match kind {
                PlotKind::Gain => emit_gain_plot(&t, &out)?,
                PlotKind::Ellipse => emit_ellipse_plot(&t, n_sigma, &out)?,
            }
        }
        Command::Table { config, out_dir, report, seeds } => {
            let base = load_config(config.as_deref())?;
            if seeds.len() > 1 {
                let (per_seed, mean) = multi_seed(&base, &seeds, Some(&out_dir))?;
                for (seed, cells) in seeds.iter().zip(&per_seed) {
                    write_report(cells, &report.with_extension(format!("seed{seed}.csv")))?;
                }
                write_report(&mean, &report)?;
            } else {
                let mut cfg = base;
                if let Some(&seed) = seeds.first() {
                    cfg.seed = seed;
                    cfg.generator.seed = seed;
                }
                let cells = evaluate_runs(&run_grid(&cfg, Some(&out_dir))?)?;
                write_report(&cells, &report)?;
            }
            info!("report written to {}", report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
