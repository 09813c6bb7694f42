use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use sgnet_core::model::checkpoint;
use sgnet_core::report::{analysis_report, eval_report, format_params};
use sgnet_core::run::{execute, load_dataset_spec, resolve, RunConfig};
use sgnet_core::verify::gradcheck_suite;
use sgnet_core::{Error, InferenceMode, Result, Taxonomy};

/// Overrides the output directory of every command that writes files.
const OUTPUT_ENV: &str = "SGNET_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "sgnet", version, about = "Super-class guided hierarchical classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print the resolved digest and parameter count, then stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Accuracy, hierarchy and timing report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// bin:FILE, cifar-train:DIR, cifar-test:DIR or config:FILE
        #[arg(long)]
        dataset: String,
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
        /// Also write eval.txt and eval.json here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Mismatch analysis between the two heads of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Also write analysis.txt and analysis.json here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        cases_per_op: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export or validate taxonomy documents.
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyAction,
    },
}

#[derive(Subcommand)]
enum TaxonomyAction {
    /// Print a builtin taxonomy (cifar100 or coco) as JSON.
    Export { name: String },
    /// Check a taxonomy document.
    Validate { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tsi,
    Di,
    Both,
}

impl Mode {
    fn modes(self) -> Vec<InferenceMode> {
        match self {
            Mode::Tsi => vec![InferenceMode::Tsi],
            Mode::Di => vec![InferenceMode::Di],
            Mode::Both => InferenceMode::BOTH.to_vec(),
        }
    }
}

fn output_override() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn cmd_train(config: &Path, dry_run: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let override_dir = output_override();
    let run = resolve(cfg, base, override_dir.as_deref())?;
    let params = run.model.parameter_count()?;
    println!("config_digest: {}", run.digest);
    println!("seed: {}", run.config.seed);
    println!("model: {} ({} parameters, {})", run.model.name, params, format_params(params));
    println!(
        "data: {} training records, {} classes in {} super-classes",
        run.train.len(),
        run.taxonomy.num_finer(),
        run.taxonomy.num_super()
    );
    if dry_run {
        println!("output: {} (dry run, nothing written)", run.output_dir.display());
        return Ok(());
    }
    let start = Instant::now();
    let (_, summary) = execute(&run, |e| {
        let evals: Vec<String> = e
            .eval
            .iter()
            .map(|x| format!("{}/{} {:.2}%", x.set, x.eval.mode, x.eval.metrics.finer_top1 * 100.0))
            .collect();
        eprintln!(
            "epoch {:>3}  lr {:.5}  loss {:.4} (fc {:.4}, sc {:.4})  {}  {:.1}s",
            e.epoch + 1,
            e.lr,
            e.loss_total,
            e.loss_fc,
            e.loss_sc,
            evals.join("  "),
            e.wall_time_s
        );
    })?;
    println!("epochs: {}", summary.epochs);
    if let Some(best) = summary.best_epoch {
        println!("best epoch: {}", best + 1);
    }
    if let Some(acc) = summary.final_di_accuracy {
        println!("final DI accuracy: {:.2}%", acc * 100.0);
    }
    if let Some(e) = &summary.final_epoch {
        for x in &e.eval {
            println!(
                "final {} {}: finer {:.2}%  super {:.2}%",
                x.set,
                x.eval.mode,
                x.eval.metrics.finer_top1 * 100.0,
                x.eval.metrics.super_top1 * 100.0
            );
        }
    }
    println!("optimizer: {}", summary.optimizer);
    println!("artifacts: {}", run.output_dir.display());
    println!("wall time: {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_eval(ckpt: &Path, dataset: &str, mode: Mode, output: Option<PathBuf>) -> Result<()> {
    let ckpt = checkpoint::load(ckpt)?;
    let (label, records) = load_dataset_spec(dataset)?;
    let report = eval_report(&ckpt, &records, &label, &mode.modes())?;
    let text = report.render();
    print!("{text}");
    if let Some(dir) = output.or_else(output_override) {
        write_file(&dir.join("eval.txt"), &text)?;
        write_file(&dir.join("eval.json"), &to_json(&report))?;
    }
    Ok(())
}

fn cmd_analyze(ckpt: &Path, dataset: &str, output: Option<PathBuf>) -> Result<()> {
    let ckpt = checkpoint::load(ckpt)?;
    let (label, records) = load_dataset_spec(dataset)?;
    let report = analysis_report(&ckpt, &records, &label)?;
    let t = &ckpt.taxonomy;
    let text = report.render(
        |s| t.super_name(s).unwrap_or("?").to_string(),
        |f| t.finer_name(f).unwrap_or("?").to_string(),
    );
    print!("{text}");
    if let Some(dir) = output.or_else(output_override) {
        write_file(&dir.join("analysis.txt"), &text)?;
        write_file(&dir.join("analysis.json"), &to_json(&report))?;
    }
    Ok(())
}

fn cmd_gradcheck(cases_per_op: usize, seed: u64) -> Result<bool> {
    let start = Instant::now();
    let suite = gradcheck_suite(cases_per_op, seed)?;
    println!("{:<22} {:>6} {:>14}  status", "operation", "cases", "max rel error");
    for (op, n, worst) in suite.per_op() {
        let status = if worst <= suite.threshold { "ok" } else { "FAIL" };
        println!("{op:<22} {n:>6} {worst:>14.3e}  {status}");
    }
    println!(
        "{} cases, eps {:e}, threshold {:e}, max rel error {:.3e}, {:.1}s",
        suite.cases.len(),
        suite.eps,
        suite.threshold,
        suite.max_rel_error(),
        start.elapsed().as_secs_f64()
    );
    Ok(suite.passed())
}

fn cmd_taxonomy(action: TaxonomyAction) -> Result<()> {
    match action {
        TaxonomyAction::Export { name } => {
            println!("{}", Taxonomy::builtin(&name)?.to_json());
        }
        TaxonomyAction::Validate { path } => {
            let text = fs::read_to_string(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let t = Taxonomy::from_json(&text)?;
            println!(
                "{}: valid, {} super-classes, {} finer classes",
                path.display(),
                t.num_super(),
                t.num_finer()
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, dry_run } => cmd_train(&config, dry_run)?,
        Command::Eval {
            checkpoint,
            dataset,
            mode,
            output,
        } => cmd_eval(&checkpoint, &dataset, mode, output)?,
        Command::Analyze {
            checkpoint,
            dataset,
            output,
        } => cmd_analyze(&checkpoint, &dataset, output)?,
        Command::Gradcheck { cases_per_op, seed } => {
            if !cmd_gradcheck(cases_per_op, seed)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Taxonomy { action } => cmd_taxonomy(action)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
