use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hgp::systems::generate;
use hgp_cli::bench::{bench_elbo, BenchConfig};
use hgp_cli::io::{self, Checkpoint};
use hgp_cli::runner::{self, Fit};
use hgp_cli::{aggregate, MetricsRecord, Mode, RunConfig};

#[derive(Parser)]
#[command(name = "hgp", version, about = "Hamiltonian GP dynamics experiments")]
struct Cli {
    /// Plain-text `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Inference mode, e.g. hgp_energy_shooting or gpode_shooting.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset as per-trajectory CSV files and a manifest.
    Generate,
    /// Train a model and write a checkpoint and the loss trace.
    Train,
    /// Sample test predictions from a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute metrics from a checkpoint, or train first when none is given.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the standard and shooting bounds.
    BenchElbo {
        /// Trajectory lengths in seconds.
        #[arg(long, value_delimiter = ',', default_value = "18,54")]
        lengths: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Median and interquartile range over metrics files.
    Aggregate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::new(1, hgp::systems::System::Fp),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn load_checkpoint(cli: &Cli, path: &Option<PathBuf>) -> Result<Checkpoint> {
    let p = path.clone().unwrap_or_else(|| cli.path("checkpoint.json"));
    Checkpoint::load(&p)
}

fn restored(ck: Checkpoint) -> Result<(RunConfig, hgp::systems::Dataset, Fit)> {
    let data = generate(&ck.config.dataset_spec())?;
    let fit = Fit {
        state: ck.state,
        report: Default::default(),
    };
    Ok((ck.config, data, fit))
}

fn report_metrics(m: &MetricsRecord) {
    println!(
        "task {} {} {} seed {}: state RMSE {:.4}, MNLL {:.4}, energy RMSE {:.4} ({:.1} s)",
        m.task, m.system, m.mode, m.seed, m.state_rmse, m.state_mnll, m.energy_rmse, m.wall_time_s
    );
}

fn write_run(out: &Path, cfg: &RunConfig, run: &runner::RunOutput) -> Result<()> {
    io::write_json(&out.join("metrics.json"), &run.metrics)?;
    io::write_cumulative(&out.join("cumulative_error.csv"), &run.cumulative)?;
    if let Some(p) = &run.prediction {
        io::write_samples(&out.join("pred_samples.csv"), p)?;
    }
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .context("configuring worker threads")?;
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;

    match &cli.command {
        Command::Generate => {
            let cfg = cli.run_config()?;
            let data = generate(&cfg.dataset_spec())?;
            io::write_dataset(&cli.out, &data)?;
            println!(
                "{} training and {} test trajectories written to {}",
                data.train.len(),
                data.test.len(),
                cli.out.display()
            );
        }
        Command::Train => {
            let cfg = cli.run_config()?;
            let data = generate(&cfg.dataset_spec())?;
            let mut rng = runner::stream(cfg.seed, 1);
            let fit = runner::fit(&cfg, &data.train, &mut rng)?;
            io::write_trace(&cli.path("trace.csv"), &fit.report)?;
            Checkpoint::new(cfg.clone(), fit.state, &rng).save(&cli.path("checkpoint.json"))?;
            println!(
                "trained {} iterations in {:.1} s, final smoothed bound {:.3}",
                fit.report.elbo.len(),
                fit.report.seconds,
                fit.report.smoothed.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Predict { checkpoint } => {
            let (cfg, data, fit) = restored(load_checkpoint(&cli, checkpoint)?)?;
            let run = runner::evaluate(&cfg, data, fit, Instant::now())?;
            let p = run.prediction.context("every prediction path failed")?;
            io::write_samples(&cli.path("pred_samples.csv"), &p)?;
            println!("{} paths ({} failed) written", p.samples.len(), p.failures);
        }
        Command::Evaluate { checkpoint } => {
            let started = Instant::now();
            let (cfg, data, fit) = match checkpoint {
                Some(_) => restored(load_checkpoint(&cli, checkpoint)?)?,
                None => {
                    let cfg = cli.run_config()?;
                    let (data, fit) = runner::prepare(&cfg)?;
                    io::write_trace(&cli.path("trace.csv"), &fit.report)?;
                    let rng = runner::stream(cfg.seed, 1);
                    Checkpoint::new(cfg.clone(), fit.state.clone(), &rng)
                        .save(&cli.path("checkpoint.json"))?;
                    (cfg, data, fit)
                }
            };
            let run = runner::evaluate(&cfg, data, fit, started)?;
            write_run(&cli.out, &cfg, &run)?;
            report_metrics(&run.metrics);
        }
        Command::BenchElbo { lengths, repeats } => {
            let mut bc = BenchConfig::new(lengths.clone(), cli.workers.unwrap_or(4));
            bc.repeats = *repeats;
            if let Some(s) = cli.seed {
                bc.seed = s;
            }
            let rows = bench_elbo(&bc)?;
            println!("length  obs  segments  standard_s  shooting_s  single_s  speedup");
            for r in &rows {
                println!(
                    "{:6.1} {:4} {:9} {:11.4} {:11.4} {:9.4} {:8.2}",
                    r.length,
                    r.observations,
                    r.segments,
                    r.standard_s,
                    r.shooting_s,
                    r.single_segment_s,
                    r.speedup
                );
            }
            io::write_json(&cli.path("bench.json"), &rows)?;
        }
        Command::Aggregate { files } => {
            let records: Vec<MetricsRecord> = files
                .iter()
                .map(|f| io::read_json(f))
                .collect::<Result<_>>()?;
            let s = aggregate::aggregate(&records)?;
            println!(
                "{} runs: state RMSE {:.4} (IQR {:.4}), MNLL {:.4} (IQR {:.4}), energy RMSE {:.4} (IQR {:.4})",
                s.count,
                s.state_rmse.median,
                s.state_rmse.iqr,
                s.state_mnll.median,
                s.state_mnll.iqr,
                s.energy_rmse.median,
                s.energy_rmse.iqr
            );
            io::write_json(&cli.path("summary.json"), &s)?;
        }
    }
    Ok(())
}
