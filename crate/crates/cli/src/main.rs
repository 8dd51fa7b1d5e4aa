//! `attcap`: generate data, train, evaluate, visualize and sweep.

mod manifest;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attcap::attention::Feedback;
use attcap::bench::{run_benchmark, BenchConfig, Variant};
use attcap::checkpoint;
use attcap::data::{
    generate_dataset, load_dataset, save_dataset, ImageMode, SceneRecord, Vocabulary,
};
use attcap::eval::{evaluate_with, proposal_sweep, stride_sweep, sweep_csv, EvalOptions};
use attcap::model::{Ablation, Model, ModelConfig, RegionProvider};
use attcap::regions::{read_proposals, ProposalMap};
use attcap::training::{train_with, TrainConfig};
use attcap::viz::{visualize, write_overlays};
use attcap::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use manifest::{now_unix, sibling, RunManifest};

#[derive(Parser)]
#[command(
    name = "attcap",
    version,
    about = "Word-region attention captioning on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Gen(GenArgs),
    /// Train a captioning model.
    Train(Box<TrainArgs>),
    /// Decode a dataset and report metrics.
    Eval(EvalArgs),
    /// Write per-token attention overlays for one scene.
    Viz(VizArgs),
    /// Evaluate a model over region counts.
    Sweep(SweepArgs),
    /// Train and evaluate every benchmark variant.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Store pixels instead of generator seeds.
    #[arg(long)]
    pixels: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "grid")]
    regions: RegionProvider,
    /// Defaults to marginal for the full model and none otherwise.
    #[arg(long)]
    feedback: Option<Feedback>,
    #[arg(long, default_value = "full")]
    ablation: Ablation,
    /// Checkpoint whose matching parameters initialize the model.
    #[arg(long)]
    warmstart: Option<PathBuf>,
    /// Steps with the encoder frozen.
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    /// Steps with the encoder trainable, after `--steps`.
    #[arg(long, default_value_t = 300)]
    stage2_steps: usize,
    /// Encoder reconstruction steps; defaults to 300, or 0 with --warmstart.
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    encoder_lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    flip: bool,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 50)]
    proposal_k: usize,
    /// Encode the 2x render with the main conv stack instead of its own.
    #[arg(long)]
    shared_hires: bool,
    /// JSONL proposals; oracle proposals are used when absent.
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; the loss CSV and manifest are written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long)]
    proposals: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Metrics JSON output.
    #[arg(long)]
    metrics: PathBuf,
    /// Decoded captions as JSONL.
    #[arg(long)]
    captions: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    id: String,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(id = "counts", required = true, multiple = false, args = ["strides", "proposal_counts"])]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    strides: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    proposal_counts: Option<Vec<usize>>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON benchmark configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Report JSON output.
    #[arg(long)]
    out: PathBuf,
}

fn load_proposals(path: Option<&Path>) -> Result<Option<ProposalMap>> {
    path.map(|p| read_proposals(BufReader::new(File::open(p)?)))
        .transpose()
}

fn eval_options(d: &DecodeArgs) -> EvalOptions {
    EvalOptions {
        beam: d.beam,
        max_len: d.max_len,
    }
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let started = now_unix();
    let records = generate_dataset(args.n, args.seed);
    let mode = if args.pixels {
        ImageMode::Pixels
    } else {
        ImageMode::Seed
    };
    save_dataset(&args.out, &records, mode)?;
    let mut m = RunManifest::new(
        "gen",
        json!({"n": args.n, "pixels": args.pixels}),
        Some(args.seed),
        started,
    );
    m.artifacts.push(args.out.clone());
    m.write(&sibling(&args.out, ".manifest.json"))?;
    println!("{} records", records.len());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = now_unix();
    let data = load_dataset(&args.data)?;
    let proposals = load_proposals(args.proposals.as_deref())?;
    let source = args
        .warmstart
        .as_deref()
        .map(checkpoint::load)
        .transpose()?;
    let vocab = match &source {
        Some((m, _)) => m.vocab.clone(),
        None => Vocabulary::build(data.iter().flat_map(|r| r.captions.iter()), args.min_count)?,
    };
    let model_config = ModelConfig {
        provider: args.regions,
        ablation: args.ablation,
        feedback: args
            .feedback
            .unwrap_or(ModelConfig::feedback_for(args.ablation)),
        grid_stride: args.stride,
        proposal_k: args.proposal_k,
        separate_hires: !args.shared_hires,
        ..ModelConfig::default()
    };
    let mut model = Model::new(model_config, vocab, args.seed)?;
    if let Some((src, _)) = &source {
        model.warm_start_from(src)?;
    }
    let train_config = TrainConfig {
        learning_rate: args.lr,
        encoder_learning_rate: args.encoder_lr,
        batch_size: args.batch,
        warmup_steps: args
            .warmup_steps
            .unwrap_or(if source.is_some() { 0 } else { 300 }),
        stage1_steps: args.steps,
        stage2_steps: args.stage2_steps,
        flip: args.flip,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let total = train_config.total_steps();
    let outcome = train_with(
        model,
        &data,
        proposals.as_ref(),
        &train_config,
        |step, loss| {
            if (step + 1) % 100 == 0 || step + 1 == total {
                eprintln!("step {:>5}/{total} loss {loss:.4}", step + 1);
            }
        },
    )?;
    checkpoint::save(
        &args.out,
        &outcome.model,
        Some(serde_json::to_value(&train_config)?),
    )?;
    let loss_csv = sibling(&args.out, ".loss.csv");
    outcome
        .trace
        .write_csv(BufWriter::new(File::create(&loss_csv)?))?;
    let mut artifacts = vec![loss_csv];
    if !outcome.warmup.losses.is_empty() {
        let warmup_csv = sibling(&args.out, ".warmup.csv");
        outcome
            .warmup
            .write_csv(BufWriter::new(File::create(&warmup_csv)?))?;
        artifacts.push(warmup_csv);
    }
    let mut m = RunManifest::new(
        "train",
        json!({
            "data": args.data,
            "proposals": args.proposals,
            "warmstart": args.warmstart,
            "model": outcome.model.config,
            "train": train_config,
            "vocabulary_size": outcome.model.vocab.len(),
        }),
        Some(args.seed),
        started,
    );
    m.checkpoint = Some(args.out.clone());
    m.artifacts = artifacts;
    m.metrics = outcome
        .trace
        .tail_mean(50)
        .map(|l| json!({"final_loss": l}));
    m.write(&sibling(&args.out, ".manifest.json"))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_eval_inputs(ckpt: &Path, data: &Path) -> Result<(Model, Vec<SceneRecord>)> {
    let (model, _) = checkpoint::load(ckpt)?;
    Ok((model, load_dataset(data)?))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = now_unix();
    let (model, records) = load_eval_inputs(&args.ckpt, &args.data)?;
    let proposals = load_proposals(args.decode.proposals.as_deref())?;
    let opts = eval_options(&args.decode);
    let (metrics, captions) = evaluate_with(&model, &records, proposals.as_ref(), &opts)?;
    let metrics_json = serde_json::to_value(&metrics)?;
    fs::write(
        &args.metrics,
        serde_json::to_string_pretty(&metrics_json)? + "\n",
    )?;
    let mut m = RunManifest::new(
        "eval",
        json!({"data": args.data, "options": opts, "proposals": args.decode.proposals}),
        None,
        started,
    );
    m.checkpoint = Some(args.ckpt.clone());
    m.artifacts.push(args.metrics.clone());
    if let Some(path) = &args.captions {
        let mut out = BufWriter::new(File::create(path)?);
        for c in &captions {
            serde_json::to_writer(&mut out, c)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        m.artifacts.push(path.clone());
    }
    m.metrics = Some(metrics_json);
    m.write(&sibling(&args.metrics, ".manifest.json"))?;
    println!("BLEU-4 {:.4}", metrics.bleu[3]);
    if let Some(ac) = metrics.attention_correctness {
        println!("attention correctness {ac:.4}");
    }
    Ok(())
}

fn cmd_viz(args: &VizArgs) -> Result<()> {
    let started = now_unix();
    let (model, records) = load_eval_inputs(&args.ckpt, &args.data)?;
    let proposals = load_proposals(args.decode.proposals.as_deref())?;
    let overlays = visualize(
        &model,
        &records,
        proposals.as_ref(),
        &args.id,
        args.decode.beam,
        args.decode.max_len,
    )?;
    let stem: String = args
        .id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let paths = write_overlays(&args.out, &stem, &overlays)?;
    let mut m = RunManifest::new(
        "viz",
        json!({"data": args.data, "id": args.id, "options": eval_options(&args.decode)}),
        None,
        started,
    );
    m.checkpoint = Some(args.ckpt.clone());
    m.artifacts = paths;
    m.metrics = Some(json!({"tokens": overlays.iter().map(|o| &o.token).collect::<Vec<_>>()}));
    m.write(&args.out.join(format!("{stem}.manifest.json")))?;
    println!("{} overlays", overlays.len());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let started = now_unix();
    let (model, records) = load_eval_inputs(&args.ckpt, &args.data)?;
    let proposals = load_proposals(args.decode.proposals.as_deref())?;
    let opts = eval_options(&args.decode);
    let (header, rows) = match (&args.strides, &args.proposal_counts) {
        (Some(s), _) => ("stride", stride_sweep(&model, &records, s, &opts)?),
        (None, Some(k)) => (
            "proposals",
            proposal_sweep(&model, &records, proposals.as_ref(), k, &opts)?,
        ),
        (None, None) => {
            return Err(attcap::Error::InvalidArgument(
                "give --strides or --proposal-counts".into(),
            ))
        }
    };
    fs::write(&args.out, sweep_csv(header, &rows))?;
    let mut m = RunManifest::new(
        "sweep",
        json!({"data": args.data, "strides": args.strides, "proposal_counts": args.proposal_counts, "options": opts}),
        None,
        started,
    );
    m.checkpoint = Some(args.ckpt.clone());
    m.artifacts.push(args.out.clone());
    m.metrics = Some(serde_json::to_value(&rows)?);
    m.write(&sibling(&args.out, ".manifest.json"))?;
    println!("{} rows", rows.len());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let started = now_unix();
    let mut config: BenchConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => BenchConfig::default(),
    };
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    let report = run_benchmark(&config, |r| {
        eprintln!(
            "{:<16} seed {} BLEU-4 {:.4} attention {} ({:.0}s)",
            r.variant,
            r.seed,
            r.metrics.bleu[3],
            r.metrics
                .attention_correctness
                .map_or("-".into(), |a| format!("{a:.4}")),
            r.seconds
        );
    })?;
    fs::write(&args.out, serde_json::to_string_pretty(&report)? + "\n")?;
    let variants = Ablation::ALL
        .map(Variant::Grid)
        .into_iter()
        .chain([Variant::Stn, Variant::Proposals]);
    let summary: serde_json::Map<String, serde_json::Value> = variants
        .map(|v| {
            println!(
                "{:<16} mean BLEU-4 {:.4}",
                v.label(),
                report.mean_bleu4(v).unwrap_or(f64::NAN)
            );
            (v.label(), json!({"bleu4": report.mean_bleu4(v), "attention_correctness": report.mean_attention(v)}))
        })
        .collect();
    let mut m = RunManifest::new("bench", serde_json::to_value(&config)?, None, started);
    m.artifacts.push(args.out.clone());
    m.metrics = Some(summary.into());
    m.write(&sibling(&args.out, ".manifest.json"))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
