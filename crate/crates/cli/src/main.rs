//! Unified command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration
//! or validation error.

mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;

use mmpref::backbone::ModelConfig;
use mmpref::data::{
    attrs_from_prompt, filter_overlap, gen_synthetic_corpus, load_binary, load_pairs,
    mine_hard_negatives, prompt_for, save_binary, save_pairs, CorpusSpec, PerspectiveTag,
    TextPrompt,
};
use mmpref::evaluation::{
    accuracy_with_ties_scored, accuracy_without_ties, f1_for_binary, forced_choice_accuracy,
    kendall_tau, pairwise_acc, pearson, score_pairs, scored_list_for_pairs,
};
use mmpref::model::ModelState;
use mmpref::reward_head::{HeadKind, RewardMode};
use mmpref::steering::{
    image_prototype_process, smc_steer, state_to_image, write_diagnostics_csv, ResampleRule,
    SteeringConfig, ToyDiffusion,
};
use mmpref::training::{
    gradient_check, run_training, trainable_params, write_loss_csv, Batch, Objective, TrainData,
};
use mmpref::{Error, Result};

use config::TrainFile;
use report::{out_path, write_atomic, write_report, ReportRow};

#[derive(Parser)]
#[command(name = "mmpref", version, about = "Desk-scale multimodal preference reward modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference corpus.
    GenData(GenDataArgs),
    /// Augment a pair dataset with hard negative prompts and images.
    MineNegatives(MineArgs),
    /// Drop training pairs whose prompts overlap a holdout set.
    Filter(FilterArgs),
    /// Fine-tune a perspective on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Steer the toy denoising process with a reward.
    Steer(SteerArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of examples (pairs, or binary records for safety).
    #[arg(long)]
    n: usize,
    /// Corpus spec TOML; defaults to the built-in spec per perspective.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "alignment")]
    perspective: PerspectiveTag,
    /// Output path for pair records.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output path for binary records.
    #[arg(long)]
    out_binary: Option<PathBuf>,
    /// Report prefix (writes .json and .csv).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    holdout: PathBuf,
    #[arg(long)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Train-file TOML (model + train sections); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Dataset kind: pairs or binary. Defaults by objective.
    #[arg(long)]
    data_kind: Option<String>,
    #[arg(long)]
    perspective: PerspectiveTag,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss-curve CSV path.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset kind: pairs or binary.
    #[arg(long, default_value = "pairs")]
    data_kind: String,
    #[arg(long)]
    perspective: PerspectiveTag,
    /// Comma-separated metric groups: acc, corr, f1.
    #[arg(long, default_value = "acc,corr")]
    metrics: String,
    #[arg(long, default_value_t = 0.05)]
    tie_eps: f64,
    /// Report prefix (writes .json and .csv).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SteerArgs {
    /// Steer with an analytic oracle reward -||x - target||^2.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Oracle target coordinates, comma-separated.
    #[arg(long, default_value = "2.0,1.0")]
    target: String,
    /// Steer with a trained reward model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prompt words for checkpoint steering, e.g. "one red square".
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value = "alignment")]
    perspective: PerspectiveTag,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Reward tilt strength; defaults to 60 with a checkpoint, 10 otherwise.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds to sweep (seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Resample every step (default) or on ESS < 0.5 K.
    #[arg(long, default_value = "every-step")]
    resample: String,
    /// Output prefix: writes <out>.csv and <out>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value = "bt")]
    objective: String,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 60)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::UnknownPerspective(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::MineNegatives(args) => mine_negatives(args),
        Command::Filter(args) => filter(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Steer(args) => steer(args),
        Command::GradCheck(args) => grad_check(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let spec = match &args.spec {
        Some(path) => config::load_corpus_spec(path)?,
        None => CorpusSpec::for_perspective(args.perspective),
    };
    let corpus = gen_synthetic_corpus(args.seed, args.n, &spec)?;
    if !corpus.pairs.is_empty() {
        let out = args.out.as_ref().ok_or_else(|| {
            Error::Config("this spec produces pairs; pass --out".into())
        })?;
        save_pairs(&out_path(out), &corpus.pairs)?;
    }
    if !corpus.binary.is_empty() {
        let out = args.out_binary.as_ref().ok_or_else(|| {
            Error::Config("this spec produces binary records; pass --out-binary".into())
        })?;
        save_binary(&out_path(out), &corpus.binary)?;
    }
    println!(
        "generated {} pairs, {} binary examples (seed {})",
        corpus.pairs.len(),
        corpus.binary.len(),
        args.seed
    );
    if let Some(prefix) = args.report {
        write_report(
            &prefix,
            &[
                ReportRow::new("pairs", corpus.pairs.len() as f64, corpus.pairs.len()),
                ReportRow::new("binary", corpus.binary.len() as f64, corpus.binary.len()),
                ReportRow::new("seed", args.seed as f64, 1),
            ],
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn mine_negatives(args: MineArgs) -> Result<ExitCode> {
    let pairs = load_pairs(&args.input)?;
    let augmented = mine_hard_negatives(&pairs)?;
    let mined = augmented.len() - pairs.len();
    save_pairs(&out_path(&args.out), &augmented)?;
    println!("mined {mined} hard negatives ({} total pairs)", augmented.len());
    if let Some(prefix) = args.report {
        write_report(
            &prefix,
            &[
                ReportRow::new("input_pairs", pairs.len() as f64, pairs.len()),
                ReportRow::new("mined_pairs", mined as f64, mined),
                ReportRow::new("total_pairs", augmented.len() as f64, augmented.len()),
            ],
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn filter(args: FilterArgs) -> Result<ExitCode> {
    let train = load_pairs(&args.train)?;
    let holdout = load_pairs(&args.holdout)?;
    let kept = filter_overlap(&train, &holdout, args.threshold)?;
    let removed = train.len() - kept.len();
    save_pairs(&out_path(&args.out), &kept)?;
    println!(
        "kept {} of {} pairs (removed {removed} at threshold {})",
        kept.len(),
        train.len(),
        args.threshold
    );
    if let Some(prefix) = args.report {
        write_report(
            &prefix,
            &[
                ReportRow::new("input_pairs", train.len() as f64, train.len()),
                ReportRow::new("kept_pairs", kept.len() as f64, kept.len()),
                ReportRow::new("removed_pairs", removed as f64, removed),
                ReportRow::new("threshold", args.threshold, train.len()),
            ],
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn load_train_data(args: &TrainArgs, objective: Objective) -> Result<TrainData> {
    let kind = match args.data_kind.as_deref() {
        Some("pairs") => "pairs",
        Some("binary") => "binary",
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown data kind {other:?} (expected pairs or binary)"
            )))
        }
        None => match objective {
            Objective::Ce => "binary",
            _ => "pairs",
        },
    };
    Ok(match kind {
        "binary" => TrainData::Binary(load_binary(&args.data)?),
        _ => TrainData::Pairs(load_pairs(&args.data)?),
    })
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut file = match &args.config {
        Some(path) => TrainFile::load(path)?,
        None => TrainFile::default(),
    };
    if let Some(seed) = args.seed {
        file.train.seed = seed;
    }
    let data = load_train_data(&args, file.train.objective)?;
    let mode = match file.train.objective {
        Objective::Gpm => RewardMode::Embedding,
        _ => RewardMode::Scalar,
    };

    let mut model = ModelState::new(file.model.clone(), file.train.seed)?;
    model.add_perspective(args.perspective, file.head, mode, file.train.seed.wrapping_add(1))?;
    let summary = trainable_params(&model, args.perspective)?;
    println!(
        "training {} ({:?} head, {:?} objective): {} of {} params trainable ({:.1}%)",
        args.perspective,
        file.head,
        file.train.objective,
        summary.trainable,
        summary.total,
        100.0 * summary.fraction()
    );

    let report = run_training(&mut model, args.perspective, &data, &file.train)?;
    model.save(&out_path(&args.out_checkpoint))?;
    let final_loss = *report.loss_history.last().expect("non-empty history");
    println!(
        "finished: {} micro-steps, {} optimizer steps, final loss {final_loss:.6}",
        report.micro_steps, report.optimizer_steps
    );

    if let Some(path) = &args.loss_csv {
        write_loss_csv(&out_path(path), &report.loss_history)?;
    }
    if let Some(prefix) = &args.report {
        write_report(
            prefix,
            &[
                ReportRow::new("final_loss", final_loss, report.micro_steps),
                ReportRow::new("micro_steps", report.micro_steps as f64, report.micro_steps),
                ReportRow::new(
                    "optimizer_steps",
                    report.optimizer_steps as f64,
                    report.optimizer_steps,
                ),
                ReportRow::new("trainable_fraction", summary.fraction(), summary.trainable),
            ],
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let model = ModelState::load(&args.checkpoint)?;
    let groups: Vec<&str> = args.metrics.split(',').map(|s| s.trim()).collect();
    for g in &groups {
        if !matches!(*g, "acc" | "corr" | "f1") {
            return Err(Error::Config(format!(
                "unknown metric group {g:?} (expected acc, corr, or f1)"
            )));
        }
    }
    let mut rows = Vec::new();
    match args.data_kind.as_str() {
        "pairs" => {
            let pairs = load_pairs(&args.data)?;
            if groups.iter().any(|g| *g == "acc") {
                let scored = score_pairs(&model, args.perspective, &pairs)?;
                rows.push(ReportRow::new(
                    "accuracy_with_ties",
                    accuracy_with_ties_scored(&scored, args.tie_eps)?,
                    scored.len(),
                ));
                rows.push(ReportRow::new(
                    "accuracy_without_ties",
                    accuracy_without_ties(&scored)?,
                    scored.len(),
                ));
                rows.push(ReportRow::new(
                    "forced_choice_accuracy",
                    forced_choice_accuracy(&scored)?,
                    scored.len(),
                ));
            }
            if groups.iter().any(|g| *g == "corr") {
                let list = scored_list_for_pairs(&model, args.perspective, &pairs)?;
                rows.push(ReportRow::new("pearson", pearson(&list)?, list.len()));
                rows.push(ReportRow::new("kendall_tau", kendall_tau(&list)?, list.len()));
                rows.push(ReportRow::new("pairwise_acc", pairwise_acc(&list)?, list.len()));
            }
            if groups.iter().any(|g| *g == "f1") {
                return Err(Error::Config(
                    "f1 needs binary-labeled data (--data-kind binary)".into(),
                ));
            }
        }
        "binary" => {
            let examples = load_binary(&args.data)?;
            rows.push(ReportRow::new(
                "f1",
                f1_for_binary(&model, args.perspective, &examples)?,
                examples.len(),
            ));
        }
        other => {
            return Err(Error::Config(format!(
                "unknown data kind {other:?} (expected pairs or binary)"
            )))
        }
    }
    for row in &rows {
        println!("{} = {:.6} (n = {})", row.metric, row.value, row.n);
    }
    write_report(&args.report, &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_target(text: &str) -> Result<Array1<f64>> {
    let values = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad target coordinate {v:?}: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Array1::from_vec(values))
}

fn steer(args: SteerArgs) -> Result<ExitCode> {
    let resample_rule = match args.resample.as_str() {
        "every-step" => ResampleRule::EveryStep,
        "ess-threshold" => ResampleRule::EssThreshold,
        other => {
            return Err(Error::Config(format!(
                "unknown resample rule {other:?} (expected every-step or ess-threshold)"
            )))
        }
    };

    // build the process and reward
    let (process, reward_fn): (ToyDiffusion, Box<dyn Fn(&Array1<f64>) -> f64>) =
        if let Some(ckpt) = &args.checkpoint {
            let model = ModelState::load(ckpt)?;
            let prompt_text = args.prompt.clone().ok_or_else(|| {
                Error::Config("checkpoint steering needs --prompt".into())
            })?;
            let words: Vec<&str> = prompt_text.split_whitespace().collect();
            let prompt = TextPrompt::from_words(&words)?;
            // canonicalize 3-word attribute prompts to the corpus form
            let prompt = match attrs_from_prompt(&prompt) {
                Some(attrs) => prompt_for(attrs),
                None => prompt,
            };
            let spec = CorpusSpec::default();
            let process = image_prototype_process(&spec, args.steps, 0.05)?;
            let (h, w, c) = (spec.height, spec.width, spec.channels);
            let tag = args.perspective;
            let reward = move |state: &Array1<f64>| -> f64 {
                let image = match state_to_image(state, h, w, c) {
                    Ok(img) => img,
                    Err(_) => return f64::NEG_INFINITY,
                };
                model
                    .reward(&prompt, &image, tag)
                    .and_then(|r| r.scalar())
                    .unwrap_or(f64::NEG_INFINITY)
            };
            (process, Box::new(reward))
        } else if args.oracle {
            let target = parse_target(&args.target)?;
            if target.len() != 2 {
                return Err(Error::Config("oracle target must be 2-dimensional".into()));
            }
            let process = ToyDiffusion::default_2d(args.steps);
            let reward = move |state: &Array1<f64>| -> f64 {
                -state
                    .iter()
                    .zip(target.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            };
            (process, Box::new(reward))
        } else {
            return Err(Error::Config(
                "pass either --oracle or --checkpoint for the reward".into(),
            ));
        };

    let lambda = args.lambda.unwrap_or(if args.checkpoint.is_some() {
        60.0
    } else {
        10.0
    });
    let config = SteeringConfig {
        k: args.k,
        lambda,
        resample_rule,
        ess_fraction: 0.5,
    };

    if args.seeds <= 1 {
        let result = smc_steer(&process, &config, reward_fn.as_ref(), args.seed)?;
        write_diagnostics_csv(&out_path(&args.out.with_extension("csv")), &result.diagnostics)?;
        let summary = serde_json::json!({
            "seed": args.seed,
            "k": config.k,
            "lambda": config.lambda,
            "steps": process.n_steps(),
            "final_reward": result.final_reward,
            "resample_events": result.resample_events,
            "sample": result.sample.to_vec(),
        });
        write_atomic(
            &args.out.with_extension("json"),
            serde_json::to_string_pretty(&summary)
                .expect("summary serializes")
                .as_bytes(),
        )?;
        println!(
            "steered sample with reward {:.6} (K = {}, lambda = {lambda})",
            result.final_reward, config.k
        );
    } else {
        let mut csv = String::from("seed,final_reward\n");
        let mut rewards = Vec::new();
        for offset in 0..args.seeds {
            let seed = args.seed + offset;
            let result = smc_steer(&process, &config, reward_fn.as_ref(), seed)?;
            csv.push_str(&format!("{seed},{}\n", result.final_reward));
            rewards.push(result.final_reward);
        }
        write_atomic(&out_path(&args.out.with_extension("csv")), csv.as_bytes())?;
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let summary = serde_json::json!({
            "first_seed": args.seed,
            "n_seeds": args.seeds,
            "k": config.k,
            "lambda": config.lambda,
            "steps": process.n_steps(),
            "mean_final_reward": mean,
            "max_final_reward": max,
        });
        write_atomic(
            &args.out.with_extension("json"),
            serde_json::to_string_pretty(&summary)
                .expect("summary serializes")
                .as_bytes(),
        )?;
        println!("{} seeds: mean final reward {mean:.6}", args.seeds);
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    let objective: Objective = args.objective.parse()?;
    let mode = match objective {
        Objective::Gpm => RewardMode::Embedding,
        _ => RewardMode::Scalar,
    };
    let config = ModelConfig::tiny(args.d_model);
    let mut model = ModelState::new(config, args.seed)?;
    let tag = PerspectiveTag::Alignment;
    model.add_perspective(tag, HeadKind::SkipCa, mode, args.seed.wrapping_add(1))?;
    let pairs = gen_synthetic_corpus(args.seed, 3, &CorpusSpec::default())?.pairs;

    // a few warmup steps move the zero-initialized head off its saddle so
    // the check exercises non-trivial gradients in every parameter group
    let warmup = mmpref::training::TrainConfig {
        learning_rate: 1e-3,
        batch_size: pairs.len(),
        grad_accum: 1,
        epochs: 1,
        objective,
        seed: args.seed,
        temperature: 1.0,
    };
    let mut state = mmpref::training::TrainState::new(&model, tag)?;
    for _ in 0..3 {
        mmpref::training::train_step(&mut model, tag, &Batch::Pairs(&pairs), &mut state, &warmup)?;
    }

    let report = gradient_check(
        &mut model,
        tag,
        &Batch::Pairs(&pairs),
        objective,
        1.0,
        args.epsilon,
        args.samples,
        args.seed,
    )?;
    println!(
        "max relative error {:.3e} over {} sampled parameters (worst: {})",
        report.max_rel_error, report.checked, report.worst_param
    );
    if let Some(prefix) = &args.report {
        write_report(
            prefix,
            &[
                ReportRow::new("max_rel_error", report.max_rel_error, report.checked),
                ReportRow::new("epsilon", args.epsilon, report.checked),
            ],
        )?;
    }
    if report.max_rel_error < 1e-4 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check FAILED: {:.3e} >= 1e-4", report.max_rel_error);
        Ok(ExitCode::from(1))
    }
}
