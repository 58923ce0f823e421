use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use antidistill::eval::{bootstrap_ci, metrics_csv};
use antidistill::gradstore::compute_downstream_grad;
use antidistill::model::{init_model, MaskedSequence, ModelConfig};
use antidistill::numerics::relative_difference;
use antidistill::pipeline::{ArtifactName, ExperimentConfig, Pipeline, Store};
use antidistill::sampler::{best_epsilon, decade_grid, epsilon_error_sweep, SamplerKind};
use antidistill::tasks::{Split, Vocab};
use antidistill::{Error, Result};

#[derive(Parser)]
#[command(name = "ads", version, about = "Antidistillation sampling experiments")]
struct Cli {
    /// Experiment config (key=value lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact store root; `ADS_STORE` takes precedence.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelType {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Holdout => Split::Holdout,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate traces: teacher traces for a split, or student test traces.
    Gencot {
        #[arg(long, value_enum)]
        model_type: ModelType,
        /// λ, or `base` for the undistilled student.
        #[arg(long)]
        lambda_value: String,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Gradient artifact to perturb the proxy with (required for λ > 0).
        #[arg(long)]
        perturb: Option<String>,
    },
    /// Compute and store the proxy's held-out loss gradient.
    SaveGrad,
    /// Distill a student on teacher traces sampled at λ.
    Sft {
        #[arg(long)]
        lambda_value: String,
    },
    /// Build `student_lambda=<x>_test` and print its metrics row.
    Eval {
        #[arg(long)]
        lambda_value: String,
    },
    /// Build any artifact by name.
    Build { name: String },
    /// Show the build plan for an artifact without running it.
    Plan { name: String },
    /// Trade-off sweep over the configured λ/τ grids and seeds.
    Sweep {
        /// Write the metrics CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference error of the penalty across ε.
    EpsSweep {
        /// Use the store's proxy and gradient instead of a fresh small model.
        #[arg(long)]
        from_store: bool,
        #[arg(long, default_value_t = 20)]
        contexts: usize,
        #[arg(long, default_value_t = -8, allow_hyphen_values = true)]
        lo: i32,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        hi: i32,
    },
    /// Check every reverse-mode gradient of a small model against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Pipeline::new(Store::from_env(cli.store.as_deref())?, config)
}

fn build(p: &Pipeline, name: &ArtifactName) -> Result<()> {
    let plan = p.build(name, |step| eprintln!("building {step}"))?;
    if plan.is_empty() {
        eprintln!("{name} is up to date");
    }
    Ok(())
}

fn parse_lambda(s: &str) -> Result<f64> {
    s.parse::<antidistill::pipeline::Lambda>().map(|l| l.value())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gencot {
            model_type,
            lambda_value,
            split,
            perturb,
        } => {
            let split = Split::from(*split);
            let name = match model_type {
                ModelType::Teacher => {
                    let lambda = parse_lambda(lambda_value)?;
                    match perturb.as_deref() {
                        Some("student_grad") | None => {}
                        Some(other) => return Err(Error::InvalidArgument(format!("cannot perturb with `{other}`"))),
                    }
                    if lambda > 0.0 && perturb.is_none() {
                        return Err(Error::InvalidArgument("λ > 0 needs --perturb student_grad".into()));
                    }
                    ArtifactName::teacher_traces(lambda, split)?
                }
                ModelType::Student => {
                    if split != Split::Test {
                        return Err(Error::InvalidArgument("student traces are generated on the test split".into()));
                    }
                    if lambda_value == "base" {
                        ArtifactName::StudentBaseTest
                    } else {
                        ArtifactName::student_test(parse_lambda(lambda_value)?)?
                    }
                }
            };
            build(&pipeline(&cli)?, &name)
        }
        Command::SaveGrad => build(&pipeline(&cli)?, &ArtifactName::StudentGrad),
        Command::Sft { lambda_value } => build(&pipeline(&cli)?, &ArtifactName::student(parse_lambda(lambda_value)?)?),
        Command::Eval { lambda_value } => {
            let p = pipeline(&cli)?;
            let lambda = parse_lambda(lambda_value)?;
            build(&p, &ArtifactName::student_test(lambda)?)?;
            print!("{}", p.load_metrics(lambda)?);
            Ok(())
        }
        Command::Build { name } => build(&pipeline(&cli)?, &name.parse()?),
        Command::Plan { name } => {
            let p = pipeline(&cli)?;
            let plan = p.resolve(&name.parse()?)?;
            if plan.is_empty() {
                println!("(cached)");
            }
            for step in plan.names() {
                println!("{step}");
            }
            Ok(())
        }
        Command::Sweep { out } => {
            let p = pipeline(&cli)?;
            let inputs = p.sweep_inputs()?;
            let rows = p.run_sweep(&inputs, &p.sweep_config())?;
            let csv = metrics_csv(&rows);
            match out {
                Some(path) => std::fs::write(path, &csv).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?,
                None => print!("{csv}"),
            }
            summarize(&rows);
            Ok(())
        }
        Command::EpsSweep {
            from_store,
            contexts,
            lo,
            hi,
        } => eps_sweep(&cli, *from_store, *contexts, *lo, *hi),
        Command::Gradcheck { tolerance } => gradcheck(*tolerance),
    }
}

fn summarize(rows: &[antidistill::eval::MetricsRow]) {
    let mut keys: Vec<(SamplerKind, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.method && k.1 == r.knob) {
            keys.push((r.method, r.knob));
        }
    }
    eprintln!("method        knob   teacher  student [95% CI]");
    for (m, k) in keys {
        let sel: Vec<_> = rows.iter().filter(|r| r.method == m && r.knob == k).collect();
        let t = sel.iter().map(|r| r.teacher_accuracy).sum::<f64>() / sel.len() as f64;
        let s: Vec<f64> = sel.iter().map(|r| r.student_accuracy).collect();
        let ci = bootstrap_ci(&s, 10_000, 0.95).ok();
        match ci {
            Some((mean, lo, hi)) => eprintln!("{:<12} {k:>6}  {t:.3}    {mean:.3} [{lo:.3}, {hi:.3}]", m.as_str()),
            None => eprintln!("{:<12} {k:>6}  {t:.3}    {:.3}", m.as_str(), s[0]),
        }
    }
}

fn eps_sweep(cli: &Cli, from_store: bool, contexts: usize, lo: i32, hi: i32) -> Result<()> {
    let p = pipeline(cli)?;
    let holdout: Vec<MaskedSequence> = p
        .splits()
        .holdout
        .iter()
        .map(|i| MaskedSequence::from_prompt_completion(&i.prompt_tokens, &i.gold_trace_tokens))
        .collect();
    let (proxy, g) = if from_store {
        let ctx = p.penalty_context()?;
        (ctx.proxy().clone(), ctx.direction().clone())
    } else {
        let proxy = init_model(&p.config.proxy)?;
        let (art, _) = compute_downstream_grad(&proxy, &holdout, "gold holdout")?;
        (proxy, art.g)
    };
    let prefixes: Vec<Vec<usize>> = p
        .splits()
        .test
        .iter()
        .take(contexts)
        .enumerate()
        .map(|(i, inst)| {
            // Cut each gold trace at a different point so contexts vary in length.
            let full = inst.full_tokens();
            let cut = inst.prompt_tokens.len() + i % inst.gold_trace_tokens.len();
            full[..cut].to_vec()
        })
        .collect();
    let rows = epsilon_error_sweep(&proxy, &g, &prefixes, &decade_grid(lo, hi))?;
    println!("epsilon,mean_error,max_error,mean_signed_cosine");
    for r in &rows {
        println!("{:e},{:.6e},{:.6e},{:.6}", r.epsilon, r.mean_error, r.max_error, r.mean_signed_cosine);
    }
    if let Some(best) = best_epsilon(&rows) {
        eprintln!("best ε = {:e} (mean error {:.3e}, |g| = {:.4})", best.epsilon, best.mean_error, g.norm());
    }
    Ok(())
}

fn gradcheck(tolerance: f64) -> Result<()> {
    let cfg = ModelConfig {
        vocab_size: Vocab::SIZE,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 16,
        init_seed: 11,
    };
    let mut model = init_model(&cfg)?;
    // Larger weights than the init scale exercise attention and normalization.
    for (i, v) in model.params.values_mut().iter_mut().enumerate() {
        *v += 0.3 * ((i as f64 * 0.7548776662).fract() - 0.5);
    }
    let seq = MaskedSequence::from_prompt_completion(&[13, 4, 10, 7, 11], &[14, 1, 1, 15, 1, 1, 16]);
    let (_, grad) = model.accumulate_loss_grad(std::slice::from_ref(&seq))?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let orig = model.params.values()[i];
        model.params.values_mut()[i] = orig + h;
        let fp = model.sequence_nll(&seq)?;
        model.params.values_mut()[i] = orig - h;
        let fm = model.sequence_nll(&seq)?;
        model.params.values_mut()[i] = orig;
        worst = worst.max(relative_difference(grad.values()[i], (fp - fm) / (2.0 * h), 1e-4));
    }
    println!("parameters {}  worst relative error {worst:.3e}", model.params.len());
    if worst < tolerance {
        Ok(())
    } else {
        Err(Error::NumericFailure {
            primitive: "gradcheck".into(),
            detail: format!("worst relative error {worst:.3e} ≥ {tolerance:e}"),
        })
    }
}
