use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedic::data::{load_dataset, save_dataset, Dataset};
use fedic::eval::{
    evaluate_predictions, load_model, run_experiment, summarize, EvalMetrics, ExperimentConfig, GenDataSpec, Group,
    Method,
};

#[derive(Parser)]
#[command(name = "fedic", version, about = "Federated long-tail simulator with server-side calibration and distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory; defaults to the config's `output_dir`, then `results`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// fedavg, fedic or ablation-a..ablation-h.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Write a synthetic FLTD dataset described by a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on a labeled FLTD file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn print_row(label: &str, m: &EvalMetrics) {
    println!(
        "{label:<10} all {:>6}  many {:>6}  medium {:>6}  few {:>6}",
        pct(Some(m.overall)),
        pct(m.many),
        pct(m.medium),
        pct(m.few)
    );
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn run(config: &Path, seed_override: Option<u64>, out: Option<PathBuf>, method: Option<Method>) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed_override {
        cfg.seeds = vec![s];
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    cfg.validate().context("invalid config after overrides")?;
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let report = run_experiment(&cfg, Some(&out))?;
    let summary = summarize(&report);
    println!("method {}  seeds {:?}  (top-1 %, final round)", summary.method, summary.seeds);
    for s in &report.seeds {
        print_row(&format!("seed {}", s.seed), &s.final_student);
        if let Some(t) = &s.final_teacher {
            print_row("  teacher", t);
        }
        for (row, m) in &s.ablation_teachers {
            print_row(&format!("  row ({row})"), m);
        }
    }
    let st = &summary.student_stats["acc_all"];
    println!(
        "mean {} ± {}  over {} seed(s)",
        pct(st.mean),
        pct(st.std),
        st.n
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: GenDataSpec = serde_json::from_str(&text).with_context(|| format!("invalid spec {}", spec.display()))?;
    let ds = spec.generate()?;
    save_dataset(&ds, out)?;
    match &ds {
        Dataset::Labeled(d) => println!("wrote {} labeled samples, class counts {:?}", d.len(), d.class_counts()),
        Dataset::Unlabeled(d) => println!("wrote {} unlabeled samples", d.len()),
    }
    Ok(())
}

fn eval(model: &Path, test: &Path) -> Result<()> {
    let model = load_model(model).with_context(|| format!("loading {}", model.display()))?;
    let test = match load_dataset(test).with_context(|| format!("loading {}", test.display()))? {
        Dataset::Labeled(d) => d,
        Dataset::Unlabeled(_) => bail!("{} has no labels", test.display()),
    };
    let (x, _) = test.full_batch::<f32>();
    let preds = model.logits(&x)?.argmax_rows();
    // No training counts here, so groups are not meaningful.
    let m = evaluate_predictions(&preds, &test, &vec![Group::Medium; test.class_count()])?;
    println!("overall {}", pct(Some(m.overall)));
    for (c, a) in m.per_class.iter().enumerate() {
        println!("class {c:>3} {}", pct(*a));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed_override,
            out,
            method,
        } => run(&config, seed_override, out, method),
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Eval { model, test } => eval(&model, &test),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
