use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spokenlm::experiments::{self, Axis, ExperimentConfig, OUTPUT_ROOT_ENV, REPORT_FILE};
use spokenlm::metrics::render_table;

/// Serialized multitask sentiment and response generation on spoken dialogue.
#[derive(Parser)]
#[command(name = "spokenlm", version)]
struct Cli {
    /// Root directory for run outputs when no explicit path is given.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset (row4 .. row15).
    #[arg(long)]
    preset: Option<String>,
    /// Offset added to the corpus, init and order seeds.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured corpus (corpus.jsonl plus PLFF features).
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Target directory (default: <run dir>/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one run, writing all artifacts.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (default: <out root>/<output_dir or name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a finished run directory from its checkpoint.
    Eval {
        /// Run directory produced by `train`.
        run: PathBuf,
    },
    /// Sweep one axis with shared seeds and print the comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// ordering, window, modality or sentiment.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values (default: the axis's standard set).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a results grid from one or more run directories.
    Report {
        runs: Vec<PathBuf>,
        /// Emit JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Print the resolved config as TOML, or list presets.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        list_presets: bool,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => experiments::preset(name).with_context(|| {
            format!("unknown preset {name:?} (known: {})", experiments::preset_names().join(", "))
        })?,
        (None, None) => bail!("pass --config <file> or --preset <name>"),
    };
    cfg.seeds = cfg.seeds.offset(args.seed_offset);
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.resolve_output_dir())
}

fn report_rows(runs: &[PathBuf]) -> Result<Vec<(String, spokenlm::metrics::EvalReport)>> {
    let mut dirs = Vec::new();
    for r in runs {
        if r.join(REPORT_FILE).is_file() {
            dirs.push(r.clone());
        } else if r.is_dir() {
            // a parent of run directories, e.g. an ablation output
            let mut kids: Vec<PathBuf> = walk_reports(r)?;
            kids.sort();
            dirs.extend(kids);
        } else {
            bail!("{}: no such run directory", r.display());
        }
    }
    if dirs.is_empty() {
        bail!("no {REPORT_FILE} found under the given paths");
    }
    dirs.iter()
        .map(|d| Ok((d.display().to_string(), experiments::load_report(d)?)))
        .collect()
}

fn walk_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| dir.display().to_string())? {
        let p = entry?.path();
        if p.is_dir() {
            if p.join(REPORT_FILE).is_file() {
                found.push(p);
            } else {
                found.extend(walk_reports(&p)?);
            }
        }
    }
    Ok(found)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(root) = &cli.out_root {
        // the library reads the root from the environment
        std::env::set_var(OUTPUT_ROOT_ENV, root);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.resolve_output_dir().join("corpus"));
            let corpus = experiments::gen_corpus(&cfg, &dir)?;
            println!("wrote {} dialogues to {}", corpus.dialogues.len(), dir.display());
        }
        Command::Train { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let dir = run_dir(&cfg, out);
            let outcome = experiments::run(&cfg, Some(&dir))?;
            println!("{}", render_table(&[(cfg.name.clone(), outcome.report)]));
            println!("artifacts in {}", dir.display());
        }
        Command::Eval { run } => {
            let outcome = experiments::evaluate_run_dir(&run)?;
            println!("{}", render_table(&[(run.display().to_string(), outcome.report)]));
        }
        Command::Ablate { cfg, axis, values, seeds, out } => {
            let base = load_config(&cfg)?;
            let axis: Axis = axis.parse().map_err(anyhow::Error::msg)?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let dir = out.unwrap_or_else(|| base.resolve_output_dir().join(format!("ablate-{}", axis.name())));
            let table = experiments::ablate(&base, axis, &values, seeds, Some(&dir))?;
            println!("{}", table.render());
            println!("artifacts in {}", dir.display());
        }
        Command::Report { runs, json } => {
            if runs.is_empty() {
                bail!("pass at least one run directory");
            }
            let rows = report_rows(&runs)?;
            if json {
                let v: Vec<_> = rows.iter().map(|(n, r)| serde_json::json!({"run": n, "report": r})).collect();
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("{}", render_table(&rows));
            }
        }
        Command::Config { cfg, list_presets } => {
            if list_presets {
                for name in experiments::preset_names() {
                    println!("{name}");
                }
            } else {
                print!("{}", load_config(&cfg)?.to_toml_string());
            }
        }
    }
    Ok(())
}
