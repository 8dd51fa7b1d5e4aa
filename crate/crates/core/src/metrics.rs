//! BLEU and attention correctness.

use std::collections::HashMap;
use std::hash::Hash;

use crate::decode::AttentionTrace;
use crate::error::{invalid, Result};
use crate::geometry::{Mask, PixelBox};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram statistics, summable over a corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    /// Statistics of one candidate against its references. The reference
    /// length is the one closest to the candidate's, shorter on ties.
    pub fn of<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>]) -> Result<Self> {
        if references.is_empty() {
            return Err(invalid("BLEU needs at least one reference"));
        }
        let mut s = BleuStats {
            candidate_len: candidate.len(),
            reference_len: references
                .iter()
                .map(|r| r.len())
                .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
                .unwrap_or(0),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            s.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        Ok(s)
    }

    pub fn add(&mut self, other: &BleuStats) {
        for i in 0..MAX_ORDER {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// Geometric mean of the first `n` precisions times the brevity
    /// penalty; 0 when any precision is 0.
    pub fn score(&self, n: usize) -> Result<f64> {
        check_order(n)?;
        if self.candidate_len == 0 {
            return Ok(0.0);
        }
        let mut log_sum = 0.0;
        for i in 0..n {
            if self.matches[i] == 0 {
                return Ok(0.0);
            }
            log_sum += (self.matches[i] as f64 / self.totals[i] as f64).ln();
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        Ok(bp * (log_sum / n as f64).exp())
    }
}

fn check_order(n: usize) -> Result<()> {
    if (1..=MAX_ORDER).contains(&n) {
        Ok(())
    } else {
        Err(invalid(format!(
            "BLEU order must be in 1..={MAX_ORDER}, got {n}"
        )))
    }
}

/// BLEU-`n` of one candidate, without smoothing.
pub fn bleu<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], n: usize) -> Result<f64> {
    check_order(n)?;
    if candidate.is_empty() {
        return Err(invalid("BLEU candidate is empty"));
    }
    BleuStats::of(candidate, references)?.score(n)
}

/// BLEU-`n` from n-gram statistics pooled over all pairs.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<Vec<T>>)], n: usize) -> Result<f64> {
    check_order(n)?;
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        total.add(&BleuStats::of(cand, refs)?);
    }
    total.score(n)
}

/// Rasterized region masks of a trace.
pub fn region_masks(trace: &AttentionTrace, image_size: usize) -> Vec<Mask> {
    trace
        .geometry
        .iter()
        .map(|q| Mask::of_quad(q, image_size, image_size))
        .collect()
}

/// Mean over aligned tokens of `sum_r p(r) * |region_r ∩ box| / |region_r|`.
/// `alignments` pairs a token position with its ground-truth box.
pub fn attention_correctness(
    trace: &AttentionTrace,
    alignments: &[(usize, PixelBox)],
    image_size: usize,
) -> Result<f64> {
    let masks = region_masks(trace, image_size);
    attention_correctness_with(trace, &masks, alignments, image_size)
}

/// [`attention_correctness`] with precomputed region masks.
pub fn attention_correctness_with(
    trace: &AttentionTrace,
    masks: &[Mask],
    alignments: &[(usize, PixelBox)],
    image_size: usize,
) -> Result<f64> {
    if alignments.is_empty() {
        return Err(invalid("no aligned tokens"));
    }
    let areas: Vec<usize> = masks.iter().map(Mask::count).collect();
    let mut total = 0.0;
    for (token, gt) in alignments {
        let p = trace.steps.get(*token).ok_or_else(|| {
            invalid(format!(
                "aligned token {token} outside a trace of {} steps",
                trace.steps.len()
            ))
        })?;
        if p.len() != masks.len() {
            return Err(invalid(format!(
                "{} attention weights for {} regions",
                p.len(),
                masks.len()
            )));
        }
        let gt_mask = Mask::of_box(gt, image_size, image_size);
        total += p
            .iter()
            .zip(masks.iter().zip(&areas))
            .filter(|(_, (_, &a))| a > 0)
            .map(|(w, (m, &a))| w * m.overlap(&gt_mask) as f64 / a as f64)
            .sum::<f64>();
    }
    Ok(total / alignments.len() as f64)
}

/// Expected correctness of uniform attention over regions that tile the
/// image: the mean ground-truth area fraction.
pub fn uniform_baseline(alignments: &[(usize, PixelBox)], image_size: usize) -> Result<f64> {
    if alignments.is_empty() {
        return Err(invalid("no aligned tokens"));
    }
    let px = (image_size * image_size) as f64;
    Ok(alignments
        .iter()
        .map(|(_, b)| Mask::of_box(b, image_size, image_size).count() as f64 / px)
        .sum::<f64>()
        / alignments.len() as f64)
}
