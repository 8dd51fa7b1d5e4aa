//! Caption decoding and metrics over a set of scenes.

use serde::{Deserialize, Serialize};

use crate::data::{SceneRecord, IMAGE_SIZE, STOP};
use crate::decode::{beam_search, decode_greedy, Hypothesis};
use crate::error::{invalid, Result};
use crate::geometry::PixelBox;
use crate::metrics::{attention_correctness_with, region_masks, uniform_baseline, BleuStats};
use crate::model::{Model, SceneInput};
use crate::regions::ProposalMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Beam width; 1 decodes greedily.
    pub beam: usize,
    pub max_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beam: 1,
            max_len: 16,
        }
    }
}

/// One decoded caption, as written to the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub image_id: String,
    pub caption: String,
    pub logprob: f64,
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub images: usize,
    /// Corpus BLEU-1 to BLEU-4.
    pub bleu: [f64; 4],
    /// Mean single-caption BLEU-4.
    pub sentence_bleu4: f64,
    /// Mean log-probability of the decoded captions.
    pub mean_logprob: f64,
    /// Token-level mean over aligned words of the reference captions.
    pub attention_correctness: Option<f64>,
    pub uniform_baseline: Option<f64>,
}

/// Token positions of a caption paired with their ground-truth boxes.
pub fn aligned_boxes(rec: &SceneRecord, caption: usize) -> Result<Vec<(usize, PixelBox)>> {
    let align = rec.alignments.get(caption).ok_or_else(|| {
        invalid(format!(
            "scene `{}` has no alignment for caption {caption}",
            rec.id
        ))
    })?;
    align
        .iter()
        .map(|&(tok, obj)| {
            let b = rec.gt_boxes.get(obj).ok_or_else(|| {
                invalid(format!("scene `{}` aligns to missing object {obj}", rec.id))
            })?;
            Ok((tok, *b))
        })
        .collect()
}

/// Best hypothesis for one prepared image.
pub fn decode_input(
    model: &Model,
    input: &SceneInput,
    opts: &EvalOptions,
) -> Result<Hypothesis<crate::autodiff::Tensor>> {
    let session = model.session(input)?;
    if opts.beam <= 1 {
        decode_greedy(&session, opts.max_len)
    } else {
        beam_search(&session, opts.beam, opts.max_len)?
            .into_iter()
            .next()
            .ok_or_else(|| invalid("beam search returned no hypothesis"))
    }
}

/// Words of a decoded token sequence, without STOP.
pub fn caption_words(model: &Model, tokens: &[usize]) -> Vec<String> {
    let body: Vec<usize> = tokens.iter().copied().filter(|&t| t != STOP).collect();
    model.vocab.decode(&body)
}

/// Attention correctness summed over aligned tokens of every reference
/// caption, with the matching uniform baseline sum and the token count.
pub fn attention_sums(
    model: &Model,
    rec: &SceneRecord,
    input: &SceneInput,
) -> Result<(f64, f64, usize)> {
    let (mut acc, mut base, mut n) = (0.0, 0.0, 0);
    let mut masks = None;
    for (ci, caption) in rec.captions.iter().enumerate() {
        let aligned = aligned_boxes(rec, ci)?;
        if aligned.is_empty() {
            continue;
        }
        let trace = model.attention_trace(input, &model.vocab.encode(caption))?;
        let masks = masks.get_or_insert_with(|| region_masks(&trace, IMAGE_SIZE));
        let k = aligned.len() as f64;
        acc += k * attention_correctness_with(&trace, masks, &aligned, IMAGE_SIZE)?;
        base += k * uniform_baseline(&aligned, IMAGE_SIZE)?;
        n += aligned.len();
    }
    Ok((acc, base, n))
}

/// Decodes every scene and scores the results.
pub fn evaluate(
    model: &Model,
    records: &[SceneRecord],
    opts: &EvalOptions,
) -> Result<(Metrics, Vec<CaptionResult>)> {
    evaluate_with(model, records, None, opts)
}

/// [`evaluate`] with optional external proposals.
pub fn evaluate_with(
    model: &Model,
    records: &[SceneRecord],
    proposals: Option<&ProposalMap>,
    opts: &EvalOptions,
) -> Result<(Metrics, Vec<CaptionResult>)> {
    if records.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut corpus = BleuStats::default();
    let mut sentence = 0.0;
    let mut logprob = 0.0;
    let (mut acc, mut base, mut aligned) = (0.0, 0.0, 0usize);
    let mut results = Vec::with_capacity(records.len());
    for rec in records {
        let input = model.prepare_from(rec, proposals);
        let hyp = decode_input(model, &input, opts)?;
        let words = caption_words(model, &hyp.tokens);
        let stats = BleuStats::of(&words, &rec.captions)?;
        sentence += stats.score(4)?;
        corpus.add(&stats);
        logprob += hyp.log_prob;
        if model.config.uses_regions() {
            let (a, b, n) = attention_sums(model, rec, &input)?;
            acc += a;
            base += b;
            aligned += n;
        }
        results.push(CaptionResult {
            image_id: rec.id.clone(),
            caption: words.join(" "),
            logprob: hyp.log_prob,
            attention: hyp.attention,
        });
    }
    let n = records.len() as f64;
    let mut bleu = [0.0; 4];
    for (i, b) in bleu.iter_mut().enumerate() {
        *b = corpus.score(i + 1)?;
    }
    let metrics = Metrics {
        images: records.len(),
        bleu,
        sentence_bleu4: sentence / n,
        mean_logprob: logprob / n,
        attention_correctness: (aligned > 0).then(|| acc / aligned as f64),
        uniform_baseline: (aligned > 0).then(|| base / aligned as f64),
    };
    Ok((metrics, results))
}

/// One row of a region-count sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: usize,
    pub regions: usize,
    pub bleu4: f64,
    pub attention_correctness: Option<f64>,
}

/// Evaluates a grid model at each stride.
pub fn stride_sweep(
    model: &Model,
    records: &[SceneRecord],
    strides: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let side = IMAGE_SIZE / crate::encoder::DOWNSAMPLE;
    strides
        .iter()
        .map(|&s| {
            let mut m = model.clone();
            m.config.grid_stride = s;
            let regions = crate::encoder::grid_indices(side, side, s)?.len();
            let (metrics, _) = evaluate(&m, records, opts)?;
            Ok(SweepRow {
                setting: s,
                regions,
                bleu4: metrics.bleu[3],
                attention_correctness: metrics.attention_correctness,
            })
        })
        .collect()
}

/// Evaluates a proposal model with the top `k` boxes, `k` ascending.
pub fn proposal_sweep(
    model: &Model,
    records: &[SceneRecord],
    proposals: Option<&ProposalMap>,
    counts: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    counts
        .iter()
        .map(|&k| {
            let mut m = model.clone();
            m.config.proposal_k = k;
            let (metrics, _) = evaluate_with(&m, records, proposals, opts)?;
            let available = records
                .iter()
                .map(|r| match proposals.and_then(|p| p.get(&r.id)) {
                    Some(boxes) => boxes.len(),
                    None => m.config.proposal_distractors + r.gt_boxes.len(),
                })
                .min()
                .unwrap_or(0);
            Ok(SweepRow {
                setting: k,
                regions: k.min(available),
                bleu4: metrics.bleu[3],
                attention_correctness: metrics.attention_correctness,
            })
        })
        .collect()
}

pub fn sweep_csv(header: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{header},regions,bleu4,attention_correctness\n");
    for r in rows {
        let ac = r
            .attention_correctness
            .map(|v| v.to_string())
            .unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.setting, r.regions, r.bleu4, ac));
    }
    s
}
