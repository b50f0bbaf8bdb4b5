use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgcd_core::data::save_dataset;
use cgcd_core::experiment::{generate_dataset_file, run_experiment, ExperimentConfig, OUT_ROOT_ENV};
use cgcd_core::report::aggregate;
use cgcd_core::trainer::{Ablation, RunReport};
use cgcd_core::{Error, ErrorKind, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Continual category discovery experiments on synthetic feature data.
#[derive(Parser)]
#[command(name = "cgcd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Flags win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-mixture dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output path; relative paths resolve against the output root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the offline set, run the session stream and write results.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; overrides `out.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate JSON run reports into a mean ± std table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run one arm per parameter value and tabulate final accuracy.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<String>,
        /// Comma-separated seeds shared by every arm.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Baseline,
    Cn,
    Sp,
    Meta,
}

impl AblationArg {
    fn preset(self) -> Ablation {
        match self {
            AblationArg::Baseline => Ablation::BASELINE,
            AblationArg::Cn => Ablation::CANDIDATE_NEIGHBORS,
            AblationArg::Sp => Ablation::SOFT_POSITIVENESS,
            AblationArg::Meta => Ablation::FULL,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SweepParam {
    Epsilon,
    NovelPerSession,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::NovelPerSession => "novel_per_session",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        match self {
            SweepParam::Epsilon => cfg.set("loss.epsilon", value),
            SweepParam::NovelPerSession => {
                cfg.set("stream.novel_per_session", value)?;
                cfg.set("episode.novel_per_session", value)
            }
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &args.overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| Error::Config {
            key: item.clone(),
            reason: "overrides take the form KEY=VALUE".into(),
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cmd_gen_data(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(cfg)?;
    cfg.data.validate()?;
    let file = generate_dataset_file(&cfg.data)?;
    let out = resolve(out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_dataset(&out, &file)?;
    println!(
        "wrote {} ({} samples, {} classes, dim {}, seed {})",
        out.display(),
        file.data.len(),
        file.num_classes(),
        file.dim(),
        cfg.data.seed
    );
    Ok(())
}

fn print_sessions(report: &RunReport) {
    println!("session  acc_all  acc_old  acc_new  n_all");
    for s in &report.sessions {
        let m = &s.metrics;
        println!(
            "{:>7}  {:>7.4}  {:>7.4}  {:>7.4}  {:>5}",
            s.session, m.acc_all, m.acc_old, m.acc_new, m.n_all
        );
    }
    let (ma, mo, mn) = report.session_means();
    println!("mean     {ma:>7.4}  {mo:>7.4}  {mn:>7.4}");
}

fn cmd_train(
    cfg: &ConfigArgs,
    ablation: Option<AblationArg>,
    seed: Option<u64>,
    episodes: Option<usize>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(cfg)?;
    if let Some(a) = ablation {
        cfg.train.ablation = a.preset();
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = episodes {
        cfg.train.episodes = e;
    }
    if let Some(d) = data {
        cfg.dataset_path = Some(d.to_path_buf());
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    let output = run_experiment(&cfg)?;
    let dir = cfg.resolved_out_dir();
    output.write(&dir, &cfg)?;
    print_sessions(&output.report);
    println!("results in {}", dir.display());
    Ok(())
}

fn cmd_report(paths: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| RunReport::load_json(p))
        .collect::<Result<Vec<_>>>()?;
    let table = aggregate(&reports)?;
    print!("{}", table.to_text());
    if let Some(path) = csv {
        write_text(&resolve(path), &table.to_csv())?;
    }
    Ok(())
}

struct Arm {
    value: String,
    seed: u64,
    cfg: ExperimentConfig,
}

fn cmd_sweep(
    cfg: &ConfigArgs,
    param: SweepParam,
    values: &[String],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<()> {
    let base = load_config(cfg)?;
    let root = match out {
        Some(o) => resolve(o),
        None => base.resolved_out_dir(),
    };
    // every arm is validated before any of them runs
    let mut arms = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            param.apply(&mut cfg, value)?;
            cfg.train.seed = seed;
            cfg.out_dir = root.join(format!("{}={value}", param.name())).join(format!("seed-{seed}"));
            cfg.validate()?;
            arms.push(Arm {
                value: value.clone(),
                seed,
                cfg,
            });
        }
    }
    let results: Vec<Result<RunReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = arms
            .iter()
            .map(|arm| {
                s.spawn(move || {
                    let output = run_experiment(&arm.cfg)?;
                    output.write(&arm.cfg.out_dir, &arm.cfg)?;
                    Ok(output.report)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep arm panicked")).collect()
    });

    let mut csv = String::from("param,value,seed,final_acc_all,mean_neighbors\n");
    for (arm, result) in arms.iter().zip(results) {
        let report = result?;
        let nn: Vec<f64> = report.sessions.iter().filter_map(|s| s.mean_neighbors).collect();
        let mean_nn = if nn.is_empty() { 0.0 } else { nn.iter().sum::<f64>() / nn.len() as f64 };
        let line = format!(
            "{},{},{},{},{}\n",
            param.name(),
            arm.value,
            arm.seed,
            report.final_metrics().acc_all,
            mean_nn
        );
        print!("{line}");
        csv.push_str(&line);
    }
    write_text(&root.join("sweep.csv"), &csv)?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Capacity => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { cfg, out } => cmd_gen_data(cfg, out),
        Command::Train {
            cfg,
            ablation,
            seed,
            episodes,
            data,
            out,
        } => cmd_train(cfg, *ablation, *seed, *episodes, data.as_deref(), out.as_deref()),
        Command::Report { reports, csv } => cmd_report(reports, csv.as_deref()),
        Command::Sweep {
            cfg,
            param,
            values,
            seeds,
            out,
        } => cmd_sweep(cfg, *param, values, seeds, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
