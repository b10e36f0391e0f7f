use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vcr_core::numerics::{Mode, Scalar, Tape};
use vcr_core::pipeline::{
    ablate, checkpoint_precision, evaluate, forward, join_qar, load_checkpoint, load_predictions, load_toml,
    model_grad_check, save_predictions, train, ModelConfig, NoObserver, Precision, TrainConfig, Variant,
};
use vcr_core::taskdata::{load_dataset, make_subtask_inputs, save_dataset, Dataset, GeneratorConfig, Subtask};

#[derive(Parser)]
#[command(name = "vcr", version, about = "Train and evaluate the co-attention multiple-choice model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train one subtask and write a checkpoint and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print accuracy and mAP.
    Eval(EvalArgs),
    /// Combine Q→A and QA→R predictions into joint accuracy.
    Join(JoinArgs),
    /// Write per-example predictions, optionally with attention weights.
    Predict(PredictArgs),
    /// Finite-difference check of every model gradient (double precision).
    Gradcheck(GradcheckArgs),
    /// Train and compare model variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured example count.
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set evaluated after every epoch.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value = "qa")]
    subtask: Subtask,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    subtask: Subtask,
    /// Also write predictions (JSON lines) for `join`.
    #[arg(long)]
    preds_out: Option<PathBuf>,
}

#[derive(Args)]
struct JoinArgs {
    #[arg(long)]
    qa_preds: PathBuf,
    #[arg(long)]
    qar_preds: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Predictions file (JSON lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every attention-weight matrix per example to this file (JSON lines).
    #[arg(long)]
    emit_attention: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per tensor; all when omitted.
    #[arg(long)]
    max_coords: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct AblateArgs {
    /// One or more of full, no_fusion, no_memory, N=1.
    #[arg(long, num_args = 1.., required = true)]
    variant: Vec<Variant>,
    #[arg(long, num_args = 1.., default_value = "qa")]
    subtask: Vec<Subtask>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    /// JSON report path; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => match checkpoint_precision(&a.checkpoint)? {
            Precision::Single => eval_cmd::<f32>(a),
            Precision::Double => eval_cmd::<f64>(a),
        },
        Command::Join(a) => {
            let qa = load_predictions(&a.qa_preds)?;
            let qar = load_predictions(&a.qar_preds)?;
            println!("{}", serde_json::to_string_pretty(&join_qar(&qa, &qar)?)?);
            Ok(())
        }
        Command::Predict(a) => match checkpoint_precision(&a.checkpoint)? {
            Precision::Single => predict_cmd::<f32>(a),
            Precision::Double => predict_cmd::<f64>(a),
        },
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn configs(model: Option<&Path>, train: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    let mc = match model {
        Some(p) => load_toml(p)?,
        None => ModelConfig::default(),
    };
    let tc = match train {
        Some(p) => load_toml(p)?,
        None => TrainConfig::default(),
    };
    Ok((mc, tc))
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut config: GeneratorConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(n) = a.examples {
        config.examples = n;
    }
    let seed = a.seed.unwrap_or(config.seed);
    let data = Dataset::generate(&config, seed)?;
    save_dataset(&a.out, &data)?;
    log::info!("wrote {} examples to {}", data.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (mut mc, tc) = configs(a.model_config.as_deref(), a.train_config.as_deref())?;
    mc.subtask = a.subtask;
    let data = load(&a.data)?;
    let eval_data = a.eval_data.as_deref().map(load).transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let last = match tc.precision {
        Precision::Single => {
            train::<f32>(&mc, &tc, &data, eval_data.as_ref(), Some(&a.out), &mut NoObserver)?.epochs.last().cloned()
        }
        Precision::Double => {
            train::<f64>(&mc, &tc, &data, eval_data.as_ref(), Some(&a.out), &mut NoObserver)?.epochs.last().cloned()
        }
    };
    if let Some(r) = last {
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

fn eval_cmd<T: Scalar>(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let data = load(&a.data)?;
    let (report, preds) = evaluate(&ck.model, &data, a.subtask)?;
    if let Some(p) = &a.preds_out {
        save_predictions(p, &preds)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn predict_cmd<T: Scalar>(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let model = &ck.model;
    let data = load(&a.data)?;
    model.config.check_dataset(&data)?;
    let probing = a.emit_attention.is_some();
    let mut preds = Vec::with_capacity(data.len());
    let mut attention = String::new();
    for ex in &data.examples {
        let inputs = make_subtask_inputs(ex, model.config.subtask)?;
        let mut tape = Tape::new(&model.params, Mode::Eval);
        if probing {
            tape = tape.with_probes();
        }
        let out = forward(&mut tape, model, ex, &inputs, &data.vocabulary, model.memory_view(Mode::Eval))?;
        let scores: Vec<f64> = tape.value(out.logits).iter().map(|v| v.to_f64_lossless()).collect();
        preds.push(vcr_core::pipeline::Prediction::new(ex.id.clone(), scores, inputs.gold));
        if probing {
            let maps: Vec<_> = tape
                .probes()
                .iter()
                .map(|p| {
                    let (rows, cols) = tape.dims(p.var);
                    let w: Vec<f64> = tape.value(p.var).iter().map(|v| v.to_f64_lossless()).collect();
                    json!({ "label": p.label, "rows": rows, "cols": cols, "weights": w })
                })
                .collect();
            attention.push_str(&serde_json::to_string(&json!({ "id": ex.id, "attention": maps }))?);
            attention.push('\n');
        }
    }
    if let Some(path) = &a.emit_attention {
        fs::write(path, attention).with_context(|| format!("writing {}", path.display()))?;
    }
    match &a.out {
        Some(p) => save_predictions(p, &preds)?,
        None => {
            for p in &preds {
                println!("{}", serde_json::to_string(p)?);
            }
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let mc = match &a.model_config {
        Some(p) => load_toml(p)?,
        None => ModelConfig::tiny(),
    };
    let report = model_grad_check(&mc, a.seed, a.max_coords)?;
    println!(
        "{}",
        json!({
            "max_rel_error": report.max_rel_error,
            "worst_param": report.worst_param,
            "worst_index": report.worst_index,
            "coordinates_checked": report.coordinates_checked,
            "coordinates_total": report.coordinates_total,
        })
    );
    if !(report.max_rel_error < a.tolerance) {
        bail!("max relative error {:.3e} exceeds {:.1e}", report.max_rel_error, a.tolerance);
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let (mc, tc) = configs(a.model_config.as_deref(), a.train_config.as_deref())?;
    let train_data = load(&a.train_data)?;
    let test_data = load(&a.test_data)?;
    let report = match tc.precision {
        Precision::Single => ablate::<f32>(&mc, &tc, &a.variant, &a.subtask, &train_data, &test_data)?,
        Precision::Double => ablate::<f64>(&mc, &tc, &a.variant, &a.subtask, &train_data, &test_data)?,
    };
    print!("{report}");
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
