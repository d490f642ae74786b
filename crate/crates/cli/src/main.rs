//! `nadpex` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 numerical abort,
//! 3 failed check (`check`, `replay`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nadpex::config::{parse_config, preset, TrainConfig};
use nadpex::envs::{replay_trajectory, EnvKind, Variant};
use nadpex::gradcheck::{format_table, registry, reports_csv, run_all, run_selected};
use nadpex::plot::{render_curves, Arm};
use nadpex::runner::{read_metrics_csv, resume_seed, run_experiment, write_metrics_csv, Checkpoint};
use nadpex::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "nadpex", version, about = "Episode-wise dropout exploration for PPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed of a configuration and write metrics, summary and curves.
    Train {
        /// Flat `key = value` config file; omitted keys keep their defaults.
        config: Option<PathBuf>,
        /// Start from a named preset instead of the defaults.
        #[arg(long)]
        preset: Option<String>,
        /// Override a key, e.g. `--set seeds=1,2 --set total_steps=20000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorthand for `--set output_dir=...`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Print the preset names and exit.
        #[arg(long)]
        list_presets: bool,
    },
    /// Run the gradient and estimator oracle suite.
    Check {
        /// Where to write the CSV report.
        #[arg(long, default_value = "gradcheck.csv")]
        csv: PathBuf,
        /// Run only the named checks (repeatable).
        #[arg(long)]
        only: Vec<String>,
        /// Print the check names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Render learning curves from metrics CSVs.
    ///
    /// Each input is a run directory (all `metrics_*.csv` inside, labelled by
    /// the directory name) or `LABEL=FILE[,FILE...]`.
    Plot {
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, short, default_value = "curves.svg")]
        out: PathBuf,
        #[arg(long, default_value = "mean return")]
        title: String,
    },
    /// Continue a seed from `checkpoint_<seed>.json` up to a new step budget.
    Resume {
        checkpoint: PathBuf,
        #[arg(long)]
        total_steps: usize,
        /// Where to write `metrics_<seed>.csv` (rows from the checkpoint on).
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Re-simulate a trajectory CSV and verify it bit for bit.
    Replay {
        file: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long)]
        variant: String,
        /// Episode horizon; defaults to the variant's default.
        #[arg(long)]
        horizon: Option<usize>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn split_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("override `{s}` is not KEY=VALUE"))
}

fn load_config(
    config: Option<&Path>,
    preset_name: Option<&str>,
    overrides: &[String],
    output_dir: Option<&Path>,
) -> Result<TrainConfig, String> {
    let base = match preset_name {
        Some(name) => preset(name).map_err(|e| e.to_string())?,
        None => TrainConfig::default(),
    };
    let text = match config {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut pairs = overrides.iter().map(|s| split_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = output_dir {
        pairs.push(("output_dir".into(), dir.display().to_string()));
    }
    parse_config(base, &text, &pairs).map_err(|e| e.to_string())
}

fn train(config: Option<&Path>, preset_name: Option<&str>, overrides: &[String], output_dir: Option<&Path>) -> ExitCode {
    let cfg = match load_config(config, preset_name, overrides, output_dir) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    eprintln!(
        "training {} on {} {} for seeds {:?} ({} steps each) -> {}",
        cfg.mode.name(),
        cfg.variant.name(),
        cfg.env.name(),
        cfg.seeds,
        cfg.total_steps,
        cfg.output_dir.display()
    );
    match run_experiment(&cfg) {
        Ok(result) => {
            if let Some(last) = result.summary.iterations.last() {
                println!(
                    "final iteration {}: env_steps {} mean_return {:.4} ± {:.4} over {} seeds",
                    last.iteration,
                    last.env_steps,
                    last.mean_return,
                    last.std_return,
                    result.runs.len()
                );
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::NonFinite { .. }) => fail(EXIT_NUMERIC, e),
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn check(csv: &Path, only: &[String], list: bool) -> ExitCode {
    if list {
        for c in registry() {
            println!("{:<24} {}", c.name, c.covers.join(", "));
        }
        return ExitCode::SUCCESS;
    }
    let reports = if only.is_empty() {
        run_all()
    } else {
        let names: Vec<&str> = only.iter().map(String::as_str).collect();
        run_selected(&names)
    };
    let reports = match reports {
        Ok(r) => r,
        Err(e @ Error::Invalid(_)) => return fail(EXIT_CONFIG, e),
        Err(e) => return fail(EXIT_CHECK, e),
    };
    print!("{}", format_table(&reports));
    if let Err(e) = fs::write(csv, reports_csv(&reports)) {
        return fail(EXIT_CONFIG, format!("{}: {e}", csv.display()));
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} checks, {} failed; CSV written to {}", reports.len(), failed, csv.display());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn arm_from_input(input: &str) -> Result<Arm, String> {
    let (label, files): (String, Vec<PathBuf>) = match input.split_once('=') {
        Some((label, list)) => (label.to_string(), list.split(',').map(PathBuf::from).collect()),
        None => {
            let dir = Path::new(input);
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| format!("{input}: {e}"))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(format!("{input}: no metrics_*.csv files"));
            }
            let label = dir
                .file_name()
                .map_or_else(|| input.to_string(), |n| n.to_string_lossy().into_owned());
            (label, files)
        }
    };
    let runs = files
        .iter()
        .map(|f| read_metrics_csv(f).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Arm::from_metrics(label, runs.iter().map(Vec::as_slice)))
}

fn plot(inputs: &[String], out: &Path, title: &str) -> ExitCode {
    let arms = match inputs.iter().map(|i| arm_from_input(i)).collect::<Result<Vec<_>, _>>() {
        Ok(a) => a,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let svg = match render_curves(&arms, title) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    match fs::write(out, svg) {
        Ok(()) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, format!("{}: {e}", out.display())),
    }
}

fn resume(checkpoint: &Path, total_steps: usize, output_dir: &Path) -> ExitCode {
    let ckpt = match Checkpoint::load(checkpoint) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", checkpoint.display())),
    };
    let seed = ckpt.seed;
    let rows = match resume_seed(ckpt, total_steps) {
        Ok(r) => r,
        Err(e @ Error::NonFinite { .. }) => return fail(EXIT_NUMERIC, e),
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let out = output_dir.join(format!("metrics_{seed}.csv"));
    if let Err(e) = fs::create_dir_all(output_dir).map_err(Error::from).and_then(|()| write_metrics_csv(&out, &rows)) {
        return fail(EXIT_CONFIG, e);
    }
    if let Some(last) = rows.last() {
        println!(
            "seed {seed}: rows {}..={} written to {}, final mean_return {:.4}",
            rows[0].iteration,
            last.iteration,
            out.display(),
            last.mean_return
        );
    }
    ExitCode::SUCCESS
}

fn replay(file: &Path, env: &str, variant: &str, horizon: Option<usize>) -> ExitCode {
    let Some(kind) = EnvKind::parse(env) else {
        return fail(EXIT_CONFIG, format!("unknown env `{env}` (mountaincar, pendulum)"));
    };
    let Some(variant) = Variant::parse(variant) else {
        return fail(EXIT_CONFIG, format!("unknown variant `{variant}` (dense, sparse)"));
    };
    let text = match fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", file.display())),
    };
    let horizon = horizon.unwrap_or_else(|| variant.default_horizon());
    match replay_trajectory(&text, kind, variant, horizon) {
        Ok(summary) => {
            for m in summary.mismatches.iter().take(20) {
                println!("{m}");
            }
            println!(
                "{} rows, {} episodes, {} mismatches",
                summary.rows,
                summary.episodes,
                summary.mismatches.len()
            );
            if summary.is_exact() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK)
            }
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Train {
            list_presets: true, ..
        } => {
            for p in nadpex::config::PRESETS {
                println!("{p}");
            }
            ExitCode::SUCCESS
        }
        Command::Train {
            config,
            preset,
            overrides,
            output_dir,
            ..
        } => train(config.as_deref(), preset.as_deref(), &overrides, output_dir.as_deref()),
        Command::Check { csv, only, list } => check(&csv, &only, list),
        Command::Plot { inputs, out, title } => plot(&inputs, &out, &title),
        Command::Resume {
            checkpoint,
            total_steps,
            output_dir,
        } => resume(&checkpoint, total_steps, &output_dir),
        Command::Replay {
            file,
            env,
            variant,
            horizon,
        } => replay(&file, &env, &variant, horizon),
    }
}
