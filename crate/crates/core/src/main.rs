use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moe_distill::continual::{eval_seed, run_protocol, stage_data, stage_dir, Learner, ProtocolConfig, Strategy};
use moe_distill::eval::{render_report, RunReport};
use moe_distill::replay::{featurize_pool, prepare_features, select, write_audit, AuditRow, SelectStrategy};
use moe_distill::teachers::{make_task_stream, read_trajectories, write_trajectories, Trajectory};
use moe_distill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "moe-distill",
    about = "Continual policy distillation into a mixture-of-experts student"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run manifest (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect teacher trajectories for every task (or one stage) into JSONL files.
    Teach {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<usize>,
    },
    /// Run the staged protocol and write metrics, audits and checkpoints.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Score the checkpoint of a finished stage on every task it has seen.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: usize,
    },
    /// Select replay trajectories from a JSONL file and write the audit.
    Select {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "dpp")]
        strategy: SelectStrategy,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Window length of the trajectory features.
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Audit file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory; `--plot` also writes tabular plot data.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ProtocolConfig> {
    let mut cfg = match &common.config {
        Some(path) => ProtocolConfig::load(path)?,
        None => ProtocolConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Teach { common, stage } => {
            let cfg = load_config(&common)?;
            let stream = make_task_stream(&cfg.suite, cfg.seed)?;
            std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            for (k, tasks) in stream.stages.iter().enumerate() {
                if stage.is_some_and(|s| s != k + 1) {
                    continue;
                }
                let data = stage_data(&cfg, tasks)?;
                for task in tasks {
                    let own: Vec<Trajectory> = data.iter().filter(|t| t.task_id == task.id).cloned().collect();
                    let path = common.out.join(format!("task_{}.jsonl", task.id));
                    write_trajectories(&path, &own)?;
                    let wins = own.iter().filter(|t| t.success).count();
                    println!("{}\t{}\t{}/{}", task.id, task.name, wins, own.len());
                }
            }
        }
        Command::Distill { common, strategy } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            let run = run_protocol(&cfg, Some(&common.out))?;
            print!("{}", run.metrics.to_tsv());
        }
        Command::Eval { common, stage } => {
            let cfg = load_config(&common)?;
            let stream = make_task_stream(&cfg.suite, cfg.seed)?;
            if stage == 0 || stage > stream.stages.len() {
                return Err(Error::Input(format!(
                    "stage {stage} outside 1..={}",
                    stream.stages.len()
                )));
            }
            let learner = Learner::load(&stage_dir(&common.out, stage), cfg.clone())?;
            let contexts = learner.all_contexts()?;
            let tasks: Vec<_> = stream.stages[..stage].iter().flatten().cloned().collect();
            let rates = learner.evaluate(&tasks, &contexts)?;
            println!("task\tsuccess\tfirst_episode_seed");
            for (t, r) in rates {
                println!("{t}\t{r}\t{}", eval_seed(&cfg, t));
            }
        }
        Command::Select {
            input,
            strategy,
            m,
            seed,
            window,
            out,
        } => {
            let trajs = read_trajectories(&input)?;
            let refs: Vec<&Trajectory> = trajs.iter().collect();
            let features = prepare_features(&featurize_pool(&refs, window)?)?;
            let sel = select(&features, m, strategy, seed)?;
            let row = AuditRow {
                stage: 0,
                task: trajs.first().map_or(0, |t| t.task_id),
                strategy,
                seed,
                chosen: sel.indices.iter().map(|&i| trajs[i].seed).collect(),
                log_det: sel.log_det,
            };
            write_audit(&out, &[row])?;
            println!(
                "selected {} of {} (log det {})",
                sel.indices.len(),
                trajs.len(),
                sel.log_det
            );
        }
        Command::Report { out, plot } => {
            let report = RunReport::load(&out)?;
            print!("{}", render_report(&report));
            if let Some(dir) = plot {
                report.write_plot_data(&dir)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
