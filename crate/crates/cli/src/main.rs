use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use learngene::datasets::sample_episode;
use learngene::harness::{
    artifact_path, load_run, render_report, render_summary, run_evolution, run_gradient_trends,
    run_open_world_eval, run_position_ablation, run_sample_sweep, run_scratch_compare, save_run,
    snapshot_tasks, train_collective, CollectiveRun, DataEnv, ExperimentConfig, ExperimentKind,
    MetricsTable,
};
use learngene::individual::{adapt, reconstruct, AdaptConfig, IndividualModel};
use learngene::learngene::{export_learngene, import_learngene, select_learngene_at, Placement};
use learngene::seed::{derive_seed, rng_for};

#[derive(Parser)]
#[command(
    name = "learngene",
    version,
    about = "Collective/individual learning with learngenes"
)]
struct Cli {
    /// Experiment configuration (.toml or .json); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set adapt.lr=0.01` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Train the collective over the task stream and checkpoint it.
    TrainCollective {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Export a learngene package from a collective checkpoint.
    SelectLearngene {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// top, middle, front or a 1-based start position.
        #[arg(long, default_value = "top")]
        placement: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an individual model from a learngene package.
    Reconstruct {
        #[arg(long)]
        learngene: PathBuf,
        #[arg(long)]
        n_way: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt an individual model on a novel-class episode.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        episode: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Score held-out base and open classes against the open-world threshold.
    EvalOpen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one experiment (or `all`) and write its metrics table and plots.
    Experiment {
        kind: String,
        /// Reuse a collective checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render summaries and plots from metrics tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_placement(s: &str) -> Result<Placement> {
    Ok(match s {
        "top" => Placement::Top,
        "middle" => Placement::Middle,
        "front" => Placement::Front,
        n => Placement::At(n.parse().map_err(|_| {
            learngene::Error::Config(format!(
                "placement {n:?} is not top, middle, front or a position"
            ))
        })?),
    })
}

fn main_collective(
    env: &DataEnv,
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<CollectiveRun> {
    let hash = cfg.collective_hash();
    if let Some(p) = checkpoint {
        return Ok(load_run(p, Some(&hash))?);
    }
    let snaps = snapshot_tasks(env.cfg.stream.num_tasks, cfg.snapshots);
    let run = train_collective(env, &cfg.collective, &cfg.criterion, cfg.k, &snaps)?;
    let path = save_run(&run, out, "collective", &hash)?;
    info!("collective checkpoint written to {}", path.display());
    Ok(run)
}

fn write_table(table: &MetricsTable, out: &Path, stem: &str, hash: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = artifact_path(out, stem, hash, "csv");
    table.save_csv(&path)?;
    println!("{}", path.display());
    Ok(path)
}

fn experiment(
    cfg: &ExperimentConfig,
    kind: &str,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let kinds: Vec<ExperimentKind> = if kind == "all" {
        ExperimentKind::ALL.to_vec()
    } else {
        vec![kind.parse()?]
    };
    let env = DataEnv::open(&cfg.data)?;
    let hash = cfg.hash();
    let needs_main = kinds
        .iter()
        .any(|k| *k != ExperimentKind::PositionAblation || cfg.position.collective.is_none());
    let main = if needs_main {
        Some(main_collective(&env, cfg, checkpoint, out)?)
    } else {
        None
    };
    let mut all = MetricsTable::new();
    for kind in kinds {
        info!("running {kind}");
        let table = match kind {
            ExperimentKind::GradientTrends => {
                run_gradient_trends(main.as_ref().expect("trained"), cfg)?
            }
            ExperimentKind::ScratchCompare => {
                run_scratch_compare(main.as_ref().expect("trained"), &env, cfg)?
            }
            ExperimentKind::SampleSweep => {
                run_sample_sweep(main.as_ref().expect("trained"), &env, cfg)?
            }
            ExperimentKind::Evolution => run_evolution(main.as_ref().expect("trained"), &env, cfg)?,
            ExperimentKind::OpenWorld => {
                run_open_world_eval(main.as_ref().expect("trained"), &env, cfg)?
            }
            ExperimentKind::PositionAblation => match &cfg.position.collective {
                Some(pc) => {
                    let run = train_collective(&env, pc, &cfg.criterion, cfg.k, &[])?;
                    save_run(&run, out, "collective-position", &cfg.collective_hash())?;
                    run_position_ablation(&run, &env, cfg)?
                }
                None => run_position_ablation(main.as_ref().expect("trained"), &env, cfg)?,
            },
        };
        write_table(&table, out, &format!("metrics-{kind}"), &hash)?;
        if kind == ExperimentKind::GradientTrends {
            let col = &main.as_ref().expect("trained").collective;
            let rho = artifact_path(out, "rho", &hash, "csv");
            std::fs::write(&rho, col.ledger.rho_table(&cfg.criterion)?)
                .with_context(|| rho.display().to_string())?;
        }
        all.extend(table);
    }
    let files = render_report(&all, out, &hash)?;
    print!("{}", std::fs::read_to_string(&files.summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?.with_overrides(&cli.sets)?;
    match cli.cmd {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::TrainCollective { out } => {
            let env = DataEnv::open(&cfg.data)?;
            let run = main_collective(&env, &cfg, None, &out)?;
            let rho = artifact_path(&out, "rho", &cfg.collective_hash(), "csv");
            std::fs::write(&rho, run.collective.ledger.rho_table(&cfg.criterion)?)
                .with_context(|| rho.display().to_string())?;
            let records = artifact_path(&out, "tasks", &cfg.collective_hash(), "json");
            std::fs::write(
                &records,
                serde_json::to_vec_pretty(&run.collective.records)?,
            )?;
            println!(
                "{}",
                artifact_path(&out, "collective", &cfg.collective_hash(), "json").display()
            );
        }
        Command::SelectLearngene {
            checkpoint,
            k,
            placement,
            out,
        } => {
            let run = load_run(&checkpoint, None)?;
            let col = &run.collective;
            let sel = select_learngene_at(
                &col.graph,
                &col.ledger,
                &cfg.criterion,
                k.unwrap_or(cfg.k),
                parse_placement(&placement)?,
            )?;
            export_learngene(&sel, &out)?;
            println!("layers {:?} -> {}", sel.positions, out.display());
        }
        Command::Reconstruct {
            learngene,
            n_way,
            seed,
            out,
        } => {
            let sel = import_learngene(&learngene)?;
            let env = DataEnv::open(&cfg.data)?;
            let mut rng = rng_for(seed, "cli-reconstruct");
            let model = reconstruct(
                &sel,
                env.source.shape(),
                n_way.unwrap_or(cfg.n_way),
                &cfg.individual,
                &mut rng,
            )?;
            std::fs::write(&out, serde_json::to_vec(&model)?)
                .with_context(|| out.display().to_string())?;
            println!("{} parameters -> {}", model.param_count(), out.display());
        }
        Command::Adapt {
            model,
            seed,
            episode,
            out,
        } => {
            let bytes = std::fs::read(&model).with_context(|| model.display().to_string())?;
            let mut m: IndividualModel = serde_json::from_slice(&bytes)
                .map_err(|e| learngene::Error::Data(format!("{}: {e}", model.display())))?;
            let env = DataEnv::open(&cfg.data)?;
            let ep = sample_episode(
                &env.split,
                m.net.num_classes(),
                cfg.k_shot,
                cfg.query_per_class,
                env.source.as_ref(),
                derive_seed(seed, &format!("episode/{episode}")),
            )?;
            let acfg = AdaptConfig {
                seed,
                ..cfg.adapt.clone()
            };
            let report = adapt(&mut m, &ep, episode, &env.loader(), &acfg)?;
            let mut table = MetricsTable::new();
            table.provenance.insert("config".into(), cfg.hash());
            for r in &report.rows {
                table.push(
                    "adapt",
                    seed,
                    "individual",
                    r.epoch as f64,
                    "query_accuracy",
                    r.query_accuracy,
                );
                table.push(
                    "adapt",
                    seed,
                    "individual",
                    r.epoch as f64,
                    "support_loss",
                    r.support_loss,
                );
                table.push("adapt", seed, "individual", r.epoch as f64, "ce", r.ce);
                table.push(
                    "adapt",
                    seed,
                    "individual",
                    r.epoch as f64,
                    "retain",
                    r.retain,
                );
            }
            write_table(&table, &out, &format!("adapt-e{episode}"), &cfg.hash())?;
        }
        Command::EvalOpen { checkpoint, out } => {
            let env = DataEnv::open(&cfg.data)?;
            let run = load_run(&checkpoint, None)?;
            let table = run_open_world_eval(&run, &env, &cfg)?;
            write_table(&table, &out, "metrics-open-world", &cfg.hash())?;
            print!("{}", render_summary(&table));
        }
        Command::Experiment {
            kind,
            checkpoint,
            out,
        } => experiment(&cfg, &kind, checkpoint.as_deref(), &out)?,
        Command::Report { inputs, out } => {
            let mut table = MetricsTable::new();
            for p in &inputs {
                table.extend(MetricsTable::load_csv(p)?);
            }
            let hash = table
                .provenance
                .get("config")
                .cloned()
                .unwrap_or_else(|| "report".into());
            let files = render_report(&table, &out, &hash)?;
            print!("{}", std::fs::read_to_string(&files.summary)?);
            for p in files.plots {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<learngene::Error>() {
            return e.exit_code() as u8;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
