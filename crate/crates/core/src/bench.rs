//! Synthetic benchmark comparing interaction ablations and region providers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, SceneRecord, Vocabulary};
use crate::error::Result;
use crate::eval::{evaluate, EvalOptions, Metrics};
use crate::model::{Ablation, Model, ModelConfig, RegionProvider};
use crate::training::{stn_warmstart, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub scenes: usize,
    /// Scenes held out for evaluation, taken from the end.
    pub held_out: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Frozen-encoder steps of the STN model after its warm start.
    pub stn_steps: usize,
    pub stn_learning_rate: f64,
    pub eval: EvalOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            held_out: 200,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                learning_rate: 1e-2,
                warmup_steps: 300,
                stage1_steps: 1500,
                stage2_steps: 300,
                ..TrainConfig::default()
            },
            stn_steps: 400,
            stn_learning_rate: 1e-3,
            eval: EvalOptions::default(),
        }
    }
}

/// Model variants of the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Grid(Ablation),
    Stn,
    Proposals,
}

impl Variant {
    pub fn label(self) -> String {
        match self {
            Variant::Grid(a) => format!("grid/{a}"),
            Variant::Stn => "stn/full".into(),
            Variant::Proposals => "proposals/full".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<RunResult>,
}

impl BenchReport {
    fn values(&self, variant: Variant, f: impl Fn(&Metrics) -> Option<f64>) -> Vec<f64> {
        let label = variant.label();
        self.runs
            .iter()
            .filter(|r| r.variant == label)
            .filter_map(|r| f(&r.metrics))
            .collect()
    }

    fn mean(xs: &[f64]) -> Option<f64> {
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Mean held-out corpus BLEU-4 over seeds.
    pub fn mean_bleu4(&self, variant: Variant) -> Option<f64> {
        Self::mean(&self.values(variant, |m| Some(m.bleu[3])))
    }

    pub fn mean_attention(&self, variant: Variant) -> Option<f64> {
        Self::mean(&self.values(variant, |m| m.attention_correctness))
    }

    pub fn mean_uniform(&self, variant: Variant) -> Option<f64> {
        Self::mean(&self.values(variant, |m| m.uniform_baseline))
    }
}

/// Training and held-out splits with the training vocabulary.
pub fn benchmark_data(
    config: &BenchConfig,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>, Vocabulary)> {
    let mut all = generate_dataset(config.scenes, config.data_seed);
    let test = all.split_off(config.scenes.saturating_sub(config.held_out));
    let vocab = Vocabulary::build(all.iter().flat_map(|r| r.captions.iter()), 1)?;
    Ok((all, test, vocab))
}

fn model_config(provider: RegionProvider, ablation: Ablation) -> ModelConfig {
    ModelConfig {
        provider,
        ablation,
        feedback: ModelConfig::feedback_for(ablation),
        ..ModelConfig::default()
    }
}

/// Trains and evaluates every variant for every seed. `progress` sees each
/// finished run.
pub fn run_benchmark(
    config: &BenchConfig,
    mut progress: impl FnMut(&RunResult),
) -> Result<BenchReport> {
    let (train_set, test_set, vocab) = benchmark_data(config)?;
    let mut report = BenchReport::default();
    let mut record =
        |variant: Variant, seed: u64, model: &Model, loss: f64, start: Instant| -> Result<()> {
            let (metrics, _) = evaluate(model, &test_set, &config.eval)?;
            let run = RunResult {
                variant: variant.label(),
                seed,
                metrics,
                final_loss: loss,
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&run);
            report.runs.push(run);
            Ok(())
        };
    for &seed in &config.seeds {
        let tc = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let tail = |t: &crate::training::LossTrace| t.tail_mean(50).unwrap_or(f64::NAN);
        for ablation in Ablation::ALL {
            let start = Instant::now();
            let model = Model::new(
                model_config(RegionProvider::Grid, ablation),
                vocab.clone(),
                seed,
            )?;
            let out = train(model, &train_set, &tc)?;
            record(
                Variant::Grid(ablation),
                seed,
                &out.model,
                tail(&out.trace),
                start,
            )?;
            if ablation == Ablation::Full {
                let start = Instant::now();
                let stn = stn_warmstart(&out.model, seed)?;
                let stc = TrainConfig {
                    learning_rate: config.stn_learning_rate,
                    warmup_steps: 0,
                    stage1_steps: config.stn_steps,
                    stage2_steps: 0,
                    ..tc.clone()
                };
                let stn_out = train(stn, &train_set, &stc)?;
                record(
                    Variant::Stn,
                    seed,
                    &stn_out.model,
                    tail(&stn_out.trace),
                    start,
                )?;
            }
        }
        let start = Instant::now();
        let model = Model::new(
            model_config(RegionProvider::Proposals, Ablation::Full),
            vocab.clone(),
            seed,
        )?;
        let out = train(model, &train_set, &tc)?;
        record(
            Variant::Proposals,
            seed,
            &out.model,
            tail(&out.trace),
            start,
        )?;
    }
    Ok(report)
}
