//! Two-stage training with Adam, global-norm clipping and an optional
//! encoder warm-up on image reconstruction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::SceneRecord;
use crate::encoder::{self, conv_stack, image_code};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, RegionProvider, SceneInput};
use crate::params::{GradMap, ParamStore};
use crate::regions::{ProposalBox, ProposalMap, Selection};
use crate::rng::{substream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Rate for encoder parameters in stage 2.
    pub encoder_learning_rate: f64,
    /// Rate of the encoder warm-up.
    pub warmup_learning_rate: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Encoder-only reconstruction steps before stage 1.
    pub warmup_steps: usize,
    /// Steps with the encoder frozen.
    pub stage1_steps: usize,
    /// Steps with every parameter trainable.
    pub stage2_steps: usize,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Random horizontal flips with probability 0.5.
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            encoder_learning_rate: 1e-4,
            warmup_learning_rate: 1e-3,
            adam: AdamConfig::default(),
            batch_size: 16,
            warmup_steps: 0,
            stage1_steps: 1000,
            stage2_steps: 200,
            clip_norm: 5.0,
            flip: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for lr in [
            self.learning_rate,
            self.encoder_learning_rate,
            self.warmup_learning_rate,
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(invalid("learning rates must be positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            return Err(invalid("Adam needs betas in [0, 1) and a positive epsilon"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(invalid("clip norm must be non-negative"));
        }
        Ok(())
    }

    pub fn rate_for(&self, name: &str) -> f64 {
        if encoder::is_encoder_param(name) {
            self.encoder_learning_rate
        } else {
            self.learning_rate
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }
}

/// Bias-corrected Adam moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every parameter named in `grads`. A non-finite
    /// gradient rejects the whole step and leaves parameters and state as
    /// they were.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &GradMap,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step_with(params, grads, |_| lr, cfg)
    }

    /// [`AdamState::step`] with a learning rate per parameter name.
    pub fn step_with(
        &mut self,
        params: &mut ParamStore,
        grads: &GradMap,
        lr: impl Fn(&str) -> f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let p = params.get(name)?;
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), vec![g.len()]],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let lr = lr(name);
            let p = params.get_mut(name)?.data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Per-token training loss at each step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        out.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: LossTrace,
    pub warmup: LossTrace,
}

/// One training image with its encoded captions.
struct Example {
    input: SceneInput,
    captions: Vec<Vec<usize>>,
}

fn mirror_image(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for x in 0..w {
            let (d, s) = ((r * w + x) * c, (r * w + (w - 1 - x)) * c);
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

fn mirror_word(w: &str) -> &str {
    match w {
        "left" => "right",
        "right" => "left",
        other => other,
    }
}

fn mirrored(model: &Model, rec: &SceneRecord, input: &SceneInput) -> Example {
    let size = input.image.shape()[1] as f64;
    let proposals = input
        .proposals
        .iter()
        .map(|p| ProposalBox {
            bbox: crate::geometry::PixelBox::new(
                p.bbox.r0,
                size - p.bbox.c1,
                p.bbox.r1,
                size - p.bbox.c0,
            ),
            score: p.score,
        })
        .collect();
    let captions = rec
        .captions
        .iter()
        .map(|c| {
            model
                .vocab
                .encode(&c.iter().map(|w| mirror_word(w)).collect::<Vec<_>>())
        })
        .collect();
    Example {
        input: SceneInput {
            id: format!("{}#flip", input.id),
            image: mirror_image(&input.image),
            hires: input.hires.as_ref().map(mirror_image),
            proposals,
            features: None,
        },
        captions,
    }
}

/// Cycles through a shuffled order, reshuffling at each epoch.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains `model` on `data`. Deterministic given `config.seed`: batches and
/// caption choice come from the "data" stream, proposal subsets and flips
/// from the "sampling" stream.
pub fn train(model: Model, data: &[SceneRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, None, config, |_, _| {})
}

/// [`train`] with optional external proposals and a callback invoked after
/// every optimizer step with the step index and its loss.
pub fn train_with(
    mut model: Model,
    data: &[SceneRecord],
    proposals: Option<&ProposalMap>,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.config.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut examples: Vec<Example> = data
        .iter()
        .map(|rec| {
            let captions: Vec<Vec<usize>> =
                rec.captions.iter().map(|c| model.vocab.encode(c)).collect();
            Example {
                input: model.prepare_from(rec, proposals),
                captions,
            }
        })
        .collect();
    if let Some(e) = examples.iter().find(|e| e.captions.is_empty()) {
        return Err(invalid(format!("scene `{}` has no captions", e.input.id)));
    }
    let mut flipped: Vec<Example> = if config.flip {
        data.iter()
            .zip(&examples)
            .map(|(r, e)| mirrored(&model, r, &e.input))
            .collect()
    } else {
        Vec::new()
    };

    let mut data_rng = substream(config.seed, "data");
    let mut sampling_rng = substream(config.seed, "sampling");

    let warmup = encoder_warmup(&mut model, &examples, config, &mut data_rng)?;

    if config.stage1_steps > 0 {
        for e in examples.iter_mut().chain(flipped.iter_mut()) {
            model.cache_features(&mut e.input)?;
        }
    }

    let mut adam = AdamState::new();
    let mut batcher = Batcher::new(examples.len(), &mut data_rng);
    let mut trace = LossTrace::default();
    for step in 0..config.total_steps() {
        let encoder_trainable = step >= config.stage1_steps;
        let batch = batcher.next(config.batch_size, &mut data_rng);
        let mut tape = Tape::new();
        let bound = model
            .params
            .bind(&mut tape, |n| model.trainable(n, encoder_trainable));
        let mut nlls: Vec<Var> = Vec::with_capacity(batch.len());
        let mut tokens = 0usize;
        for i in batch {
            let j = data_rng.gen_range(0..examples[i].captions.len());
            let ex = if config.flip && sampling_rng.gen_bool(0.5) {
                &flipped[i]
            } else {
                &examples[i]
            };
            let caption = &ex.captions[j];
            let graph = model.image_graph(
                &mut tape,
                &bound,
                &ex.input,
                encoder_trainable,
                Selection::Random(&mut sampling_rng),
            )?;
            nlls.push(model.caption_nll(&mut tape, &bound, &graph, caption, None)?);
            tokens += caption.len();
        }
        let all = tape.concat(&nlls)?;
        let total = tape.sum(all)?;
        let loss = tape.affine(total, 1.0 / tokens as f64, 0.0)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let mut grads = bound.gradients(&tape, &grads);
        drop(tape);
        clip_global_norm(&mut grads, config.clip_norm);
        adam.step_with(
            &mut model.params,
            &grads,
            |n| config.rate_for(n),
            &config.adam,
        )?;
        trace.losses.push(value);
        on_step(step, value);
    }
    Ok(TrainOutcome {
        model,
        trace,
        warmup,
    })
}

pub const AUX_DECODER_W: &str = "aux.decoder.w";
pub const AUX_DECODER_B: &str = "aux.decoder.b";
pub const AUX_LOCAL_W: &str = "aux.local.w";
pub const AUX_LOCAL_B: &str = "aux.local.b";
pub const AUX_HIRES_W: &str = "aux.hires.w";
pub const AUX_HIRES_B: &str = "aux.hires.b";
/// Side of the pooled reconstruction target.
pub const AUX_TARGET_SIDE: usize = 8;
/// Sub-blocks per side reconstructed from each feature cell.
pub const AUX_LOCAL_SIDE: usize = 2;

/// Average-pooled `[side * side * 3]` copy of an `[S, S, 3]` image.
fn pooled_target(image: &Tensor, side: usize) -> Tensor {
    let (s, c) = (image.shape()[0], image.shape()[2]);
    let f = s / side;
    let mut out = vec![0.0; side * side * c];
    for r in 0..s {
        for x in 0..s {
            for k in 0..c {
                out[((r / f) * side + x / f) * c + k] += image.at(&[r, x, k]);
            }
        }
    }
    let norm = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    Tensor::vector(out)
}

/// `[cells, sub * sub * 3]`: for each feature cell, the mean colour of
/// each of its `sub x sub` pixel sub-blocks.
fn local_target(image: &Tensor, cells: usize, sub: usize) -> Tensor {
    let block = pooled_target(image, cells * sub);
    let side = cells * sub;
    let per = sub * sub * 3;
    let mut out = vec![0.0; cells * cells * per];
    for r in 0..side {
        for c in 0..side {
            let cell = (r / sub) * cells + c / sub;
            let k = (r % sub) * sub + c % sub;
            for ch in 0..3 {
                out[cell * per + k * 3 + ch] = block.data()[(r * side + c) * 3 + ch];
            }
        }
    }
    Tensor::new(&[cells * cells, per], out).expect("consistent size")
}

/// Mean squared error between `y` and a constant target.
fn mse(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(y, t)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq)?;
    tape.affine(total, 1.0 / target.len() as f64, 0.0)
}

/// Per-cell linear reconstruction error of a feature map.
fn local_error(tape: &mut Tape, gamma: Var, w: Var, b: Var, target: &Tensor) -> Result<Var> {
    let cells = tape.reshape(gamma, &[target.shape()[0], encoder::FEATURE_CHANNELS])?;
    let y = tape.matmul(cells, w)?;
    let y = tape.add_bias(y, b)?;
    mse(tape, y, target)
}

struct WarmupTargets {
    pooled: Tensor,
    local: Tensor,
    hires_local: Option<Tensor>,
}

/// Trains the encoder stacks with linear decoders: one reconstructs a
/// pooled copy of the image from its code, the others each feature cell's
/// pixel block from its descriptor. The decoders are discarded afterwards.
fn encoder_warmup(
    model: &mut Model,
    examples: &[Example],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossTrace> {
    let mut trace = LossTrace::default();
    if config.warmup_steps == 0 {
        return Ok(trace);
    }
    let out_dim = AUX_TARGET_SIDE * AUX_TARGET_SIDE * 3;
    let c = encoder::FEATURE_CHANNELS;
    let local_dim = AUX_LOCAL_SIDE * AUX_LOCAL_SIDE * 3;
    let with_hires = examples[0].input.hires.is_some()
        && model
            .params
            .contains(&format!("{}.conv1.w", encoder::HIRES));
    let mut aux = ParamStore::new();
    let mut init = substream(config.seed, "warmup-init");
    aux.insert_glorot(
        AUX_DECODER_W,
        &[out_dim, model.config.image_dim],
        model.config.image_dim,
        out_dim,
        &mut init,
    );
    aux.insert_zeros(AUX_DECODER_B, &[out_dim]);
    aux.insert_glorot(AUX_LOCAL_W, &[c, local_dim], c, local_dim, &mut init);
    aux.insert_zeros(AUX_LOCAL_B, &[local_dim]);
    if with_hires {
        aux.insert_glorot(AUX_HIRES_W, &[c, local_dim], c, local_dim, &mut init);
        aux.insert_zeros(AUX_HIRES_B, &[local_dim]);
    }
    let cells_of = |t: &Tensor| t.shape()[0] / encoder::DOWNSAMPLE;
    let targets: Vec<WarmupTargets> = examples
        .iter()
        .map(|e| {
            let img = &e.input.image;
            WarmupTargets {
                pooled: pooled_target(img, AUX_TARGET_SIDE),
                local: local_target(img, cells_of(img), AUX_LOCAL_SIDE),
                hires_local: e
                    .input
                    .hires
                    .as_ref()
                    .filter(|_| with_hires)
                    .map(|h| local_target(h, cells_of(h), AUX_LOCAL_SIDE)),
            }
        })
        .collect();
    let mut adam = AdamState::new();
    let mut aux_adam = AdamState::new();
    let mut batcher = Batcher::new(examples.len(), rng);
    for _ in 0..config.warmup_steps {
        let batch = batcher.next(config.batch_size, rng);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, encoder::is_encoder_param);
        let aux_bound = aux.bind(&mut tape, |_| true);
        let w = aux_bound.var(AUX_DECODER_W)?;
        let b = aux_bound.var(AUX_DECODER_B)?;
        let lw = aux_bound.var(AUX_LOCAL_W)?;
        let lb = aux_bound.var(AUX_LOCAL_B)?;
        let mut errs = Vec::with_capacity(3 * batch.len());
        for &i in &batch {
            let input = &examples[i].input;
            let t = &targets[i];
            let x = tape.constant(input.image.clone());
            let gamma = conv_stack(&mut tape, &bound, encoder::MAIN, x)?;
            let phi = image_code(&mut tape, &bound, gamma)?;
            let wx = tape.matmul(w, phi)?;
            let y = tape.add_bias(wx, b)?;
            errs.push(mse(&mut tape, y, &t.pooled)?);
            errs.push(local_error(&mut tape, gamma, lw, lb, &t.local)?);
            if let (Some(h), Some(target)) = (&input.hires, &t.hires_local) {
                let xh = tape.constant(h.clone());
                let gh = conv_stack(&mut tape, &bound, encoder::HIRES, xh)?;
                let (hw, hb) = (aux_bound.var(AUX_HIRES_W)?, aux_bound.var(AUX_HIRES_B)?);
                errs.push(local_error(&mut tape, gh, hw, hb, target)?);
            }
        }
        let all = tape.concat(&errs)?;
        let total = tape.sum(all)?;
        let loss = tape.affine(total, 1.0 / batch.len() as f64, 0.0)?;
        trace.losses.push(tape.value(loss).data()[0]);
        let g = tape.backward(loss)?;
        let mut grads = bound.gradients(&tape, &g);
        let mut aux_grads = aux_bound.gradients(&tape, &g);
        drop(tape);
        let norm = (global_norm(&grads).powi(2) + global_norm(&aux_grads).powi(2)).sqrt();
        if config.clip_norm > 0.0 && norm > config.clip_norm {
            let s = config.clip_norm / norm;
            grads
                .values_mut()
                .chain(aux_grads.values_mut())
                .flatten()
                .for_each(|v| *v *= s);
        }
        adam.step(
            &mut model.params,
            &grads,
            config.warmup_learning_rate,
            &config.adam,
        )?;
        aux_adam.step(
            &mut aux,
            &aux_grads,
            config.warmup_learning_rate,
            &config.adam,
        )?;
    }
    Ok(trace)
}

/// Spatial-transformer model initialized from a trained grid model: shared
/// parameters are copied, the localization head starts at the doubled
/// anchor scale and the output filter passes the center tap through.
pub fn stn_warmstart(grid_model: &Model, seed: u64) -> Result<Model> {
    if grid_model.config.provider != RegionProvider::Grid {
        return Err(invalid("STN warm start needs a grid model"));
    }
    if !grid_model.config.uses_regions() {
        return Err(invalid(
            "STN warm start needs a model that attends to regions",
        ));
    }
    let mut config = grid_model.config.clone();
    config.provider = RegionProvider::Stn;
    let mut model = Model::new(config, grid_model.vocab.clone(), seed)?;
    model.warm_start_from(grid_model)?;
    Ok(model)
}
