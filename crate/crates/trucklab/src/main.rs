//! Command-line surface for the truck-lab pipeline. Subcommands mirror
//! the pipeline stages plus a manifest runner; see README for the config
//! grammar.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trucklab::cacc::{CaccConfig, EgoBackend};
use trucklab::config::KvFile;
use trucklab::cyclegen::{generate_spanning_episode, CycleGenConfig, SpeedTracker};
use trucklab::episode::write_episode;
use trucklab::model::{DeepModelParams, IoSpec};
use trucklab::pipeline::{read_episode_dir, run_experiment};
use trucklab::plant::PlantConfig;
use trucklab::policy::{self, PgConfig, PolicyParams};
use trucklab::stats::{control_error_stats, model_error_stats, write_histogram, write_stats, write_trajectory};
use trucklab::trainer::{train, write_curve, TrainConfig};
use trucklab::util::{set_threads, stream_rng};
use trucklab::Result;

#[derive(Parser)]
#[command(name = "trucklab", about = "Surrogate truck plant, deep replica model, and CACC policy training")]
struct Cli {
    /// Base RNG seed for all stochastic operations.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate driving-cycle episodes through the surrogate plant.
    GenCycle {
        /// Optional key=value config file ([cyclegen], [plant] sections).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Episode duration in seconds.
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
    },
    /// Train the deep replica model on a directory of episode CSVs.
    TrainModel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint path (best validation iterate).
        #[arg(long)]
        out: PathBuf,
        /// Learning-curve CSV path.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Open-loop error statistics of a trained model on held-out episodes.
    ValidateModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        horizon: usize,
        #[arg(long, default_value_t = 90)]
        trials: usize,
    },
    /// Train the CACC policy inside the learned environment.
    TrainPolicy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Deterministic-mode policy evaluation with error statistics.
    EvalPolicy {
        #[arg(long)]
        policy: PathBuf,
        /// Deep-model checkpoint; omit with --plant for the surrogate.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Evaluate on the surrogate plant instead of the deep model.
        #[arg(long, default_value_t = false)]
        plant: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        keep_trajectories: usize,
    },
    /// Run a full manifest-driven experiment.
    Run {
        manifest: PathBuf,
    },
}

fn load_kv(path: &Option<PathBuf>) -> Result<KvFile> {
    match path {
        Some(p) => KvFile::load(p),
        None => Ok(KvFile::new()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    set_threads(cli.threads);
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenCycle {
            config,
            out,
            episodes,
            duration,
        } => {
            let kv = load_kv(&config)?;
            let gen = CycleGenConfig::from_kv(&kv)?;
            let plant = PlantConfig::from_kv(&kv)?;
            let tracker = SpeedTracker::default();
            std::fs::create_dir_all(&out)?;
            for i in 0..episodes {
                let mut rng = stream_rng(seed, i as u64);
                let ep = generate_spanning_episode(&gen, &mut rng, &plant, &tracker, duration)?;
                write_episode(&ep, &out.join(format!("ep_{i:03}.csv")))?;
            }
            println!("wrote {episodes} episodes to {}", out.display());
            Ok(())
        }
        Command::TrainModel {
            data,
            config,
            out,
            curve,
        } => {
            let kv = load_kv(&config)?;
            let cfg = TrainConfig::from_kv(&kv)?;
            let gen = CycleGenConfig::from_kv(&kv)?;
            let episodes = read_episode_dir(&data)?;
            let io = IoSpec::from_episodes(&episodes, gen.dt)?;
            let mut rng = stream_rng(seed, 0);
            let params = DeepModelParams::init(io, cfg.hidden, &cfg.decoder_hidden, &mut rng)?;
            let mut train_rng = stream_rng(seed, 1);
            let result = train(params, &episodes, &cfg, &mut train_rng)?;
            result.params.save(&out)?;
            if let Some(curve_path) = curve {
                write_curve(&result.curve, &curve_path)?;
            }
            let last = result.curve.last().unwrap();
            println!(
                "trained {} epochs; best epoch {}; final deploy loss {:.6e}",
                cfg.epochs, result.best_epoch, last.deploy_form_loss
            );
            Ok(())
        }
        Command::ValidateModel {
            model,
            data,
            out,
            horizon,
            trials,
        } => {
            let params = DeepModelParams::load(&model)?;
            let episodes = read_episode_dir(&data)?;
            std::fs::create_dir_all(&out)?;
            let (series, summary) = model_error_stats(
                &params,
                &episodes,
                horizon,
                trials,
                seed,
                (0.0, 35.0),
                (-3.0, 3.0),
            )?;
            write_stats(&series, params.io.dt, &out.join("stats.csv"))?;
            write_histogram(&summary.initial_speed, "initial speed [m/s]", &out.join("hist_initial_speed.csv"))?;
            write_histogram(&summary.visited_speed, "visited speed [m/s]", &out.join("hist_visited_speed.csv"))?;
            write_histogram(&summary.visited_grade, "visited grade [%]", &out.join("hist_visited_grade.csv"))?;
            println!(
                "validated over {} trials ({} excluded); stats in {}",
                series.trials,
                series.excluded,
                out.display()
            );
            Ok(())
        }
        Command::TrainPolicy {
            model,
            config,
            out,
            curve,
        } => {
            let kv = load_kv(&config)?;
            let cacc = CaccConfig::from_kv(&kv)?;
            let pg = PgConfig::from_kv(&kv)?;
            let deep = DeepModelParams::load(&model)?;
            let result = policy::train_policy(&cacc, EgoBackend::Deep(&deep), &pg, seed)?;
            result.params.save(&out)?;
            if let Some(curve_path) = curve {
                policy::write_pg_curve(&result.curve, &curve_path)?;
            }
            let last = result.curve.last().unwrap();
            println!(
                "trained {} iterations; best iteration {}; final avg discounted return {:.4e}",
                pg.iterations, result.best_iteration, last.avg_discounted_return
            );
            Ok(())
        }
        Command::EvalPolicy {
            policy: policy_path,
            model,
            plant,
            config,
            out,
            trials,
            keep_trajectories,
        } => {
            let kv = load_kv(&config)?;
            let cacc = CaccConfig::from_kv(&kv)?;
            let plant_cfg = PlantConfig::from_kv(&kv)?;
            let pol = PolicyParams::load(&policy_path)?;
            std::fs::create_dir_all(&out)?;
            let deep;
            let backend = if plant {
                EgoBackend::Plant(&plant_cfg)
            } else {
                let model = model.ok_or_else(|| {
                    trucklab::Error::InvalidInput("--model is required unless --plant is set".into())
                })?;
                deep = DeepModelParams::load(&model)?;
                EgoBackend::Deep(&deep)
            };
            let (series, crashes, trajectories) =
                control_error_stats(&pol, &cacc, backend, trials, seed)?;
            write_stats(&series, cacc.dt, &out.join("control_stats.csv"))?;
            for (i, tr) in trajectories.iter().take(keep_trajectories).enumerate() {
                write_trajectory(tr, cacc.dt, &out.join(format!("traj_{i:03}.csv")))?;
            }
            println!("{trials} rollouts, {crashes} crashes; stats in {}", out.display());
            Ok(())
        }
        Command::Run { manifest } => {
            let out = run_experiment(&manifest)?;
            println!("pipeline complete; artifacts in {}", out.display());
            Ok(())
        }
    }
}
