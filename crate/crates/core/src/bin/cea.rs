use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cea_core::config::ExperimentConfig;
use cea_core::envs::{EnvKind, EnvSettings};
use cea_core::kde::{optimize_candidates_traced, write_trace_csv, GradientMode, SamplerConfig};
use cea_core::rng::seeded;
use cea_core::runner::{ablation_grid, pretrain_sta, run_experiment};
use cea_core::sta::{write_loss_csv, StaConfig};
use cea_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cea", version, about = "Counterfactual experience augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        matches!(t, Toggle::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over a list of seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, e.g. 42,43,44,45.
        #[arg(long, value_delimiter = ',')]
        seed_list: Option<Vec<u64>>,
        #[arg(long)]
        cea: Option<Toggle>,
        #[arg(long)]
        per: Option<Toggle>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four PER/CEA ablation variants of a configuration.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a transition model on random-policy transitions and save it.
    StaPretrain {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 5000)]
        transitions: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional experiment config supplying environment and model sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the training-loss CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Entropy-maximizing candidate placement trace as CSV.
    SampleDemo {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        dim: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Exact)]
        mode: Mode,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed_list, cea, per, out } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(seeds) = seed_list {
                cfg.experiment.seeds = seeds;
            }
            if let Some(t) = cea {
                cfg.experiment.cea = t.into();
            }
            if let Some(t) = per {
                cfg.experiment.per = t.into();
            }
            if let Some(dir) = out {
                cfg.experiment.out_dir = dir;
            }
            cfg.validate()?;
            let label = match (cfg.experiment.cea, cfg.experiment.per) {
                (false, false) => "backbone",
                (false, true) => "backbone+PER",
                (true, false) => "backbone+CEA",
                (true, true) => "backbone+CEA+PER",
            };
            let exp = run_experiment(&cfg, label)?;
            let s = &exp.summary;
            println!("{label}: mean {:.4} std {:.4} final {:.4} -> {}", s.mean, s.std, s.final_value, cfg.experiment.out_dir.display());
        }
        Command::Ablate { config, out } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(dir) = out {
                cfg.experiment.out_dir = dir;
            }
            for s in ablation_grid(&cfg)? {
                println!("{:<18} mean {:.4} std {:.4} final {:.4}", s.label, s.mean, s.std, s.final_value);
            }
        }
        Command::StaPretrain { env, transitions, out, seed, config, loss_csv } => {
            let kind: EnvKind = env.parse()?;
            let (mut settings, mut sta_cfg) = match config {
                Some(p) => {
                    let c = ExperimentConfig::from_path(&p)?;
                    (c.env_settings(), c.sta)
                }
                None => (EnvSettings::default(), StaConfig::default()),
            };
            settings.gridworld.random_start = true;
            sta_cfg.corpus_size = transitions;
            if transitions == 0 {
                return Err(Error::Config("--transitions must be positive".into()));
            }
            let (model, losses) = pretrain_sta(&kind, &settings, &sta_cfg, seed)?;
            model.save(&out)?;
            if let Some(p) = loss_csv {
                write_loss_csv(&losses, BufWriter::new(File::create(p)?))?;
            }
            if let Some(last) = losses.last() {
                println!("saved {} (recon {:.6} kl {:.6})", out.display(), last.recon, last.kl);
            }
        }
        Command::SampleDemo { dim, seed, mode, out } => {
            let bounds = vec![[-1.0, 1.0]; dim as usize];
            let mut cfg = SamplerConfig::for_bounds(bounds);
            cfg.gradient_mode = match mode {
                Mode::Exact => GradientMode::Exact,
                Mode::Paper => GradientMode::Paper,
            };
            let known = vec![vec![0.0; dim as usize]];
            let result = optimize_candidates_traced(&known, &cfg, &mut seeded(seed))?;
            let mut w = output(out.as_ref())?;
            write_trace_csv(&result.trace, &mut w)?;
            w.flush()?;
            log::info!("entropy {:.4} -> {:.4}", result.initial_entropy, result.final_entropy);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
