//! Caption generation: greedy, sampled and beam-search decoding over any
//! step-wise word model.

use rand::Rng as _;

use crate::autodiff::Tensor;
use crate::data::STOP;
use crate::error::{invalid, Result};
use crate::geometry::Quad;
use crate::rng::{substream, Rng};

/// Output of one decoding step at some state.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDist {
    /// `ln p(w | h)` for every word.
    pub log_probs: Vec<f64>,
    /// `p(r | h)`, when the model attends to regions.
    pub regions: Option<Vec<f64>>,
    /// Joint scores `[n_w, n_r]`, kept for word-conditional feedback.
    pub scores: Option<Tensor>,
}

/// A recurrent word model seen from the decoder.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Self::State;
    fn step(&self, state: &Self::State) -> Result<StepDist>;
    /// State after emitting `token` from `state`, whose step output is `dist`.
    fn advance(&self, state: &Self::State, dist: &StepDist, token: usize) -> Result<Self::State>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    /// Sum of `ln p(w_t | h_t)` over the emitted tokens.
    pub log_prob: f64,
    pub state: S,
    /// Region distribution at each emitted token (empty without regions).
    pub attention: Vec<Vec<f64>>,
}

impl<S> Hypothesis<S> {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&STOP)
    }
}

/// Region distributions of one caption together with the region geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub steps: Vec<Vec<f64>>,
    pub geometry: Vec<Quad>,
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn run<M: StepModel>(
    model: &M,
    max_len: usize,
    mut choose: impl FnMut(&StepDist) -> usize,
) -> Result<Hypothesis<M::State>> {
    if max_len == 0 {
        return Err(invalid("max_len must be at least 1"));
    }
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial(),
        attention: Vec::new(),
    };
    loop {
        let dist = model.step(&hyp.state)?;
        let w = choose(&dist);
        hyp.log_prob += dist.log_probs[w];
        hyp.tokens.push(w);
        if let Some(r) = &dist.regions {
            hyp.attention.push(r.clone());
        }
        if w == STOP || hyp.tokens.len() == max_len {
            return Ok(hyp);
        }
        hyp.state = model.advance(&hyp.state, &dist, w)?;
    }
}

/// Argmax word at each step until STOP or `max_len` tokens.
pub fn decode_greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis<M::State>> {
    run(model, max_len, |d| argmax(&d.log_probs))
}

pub const MIN_TEMPERATURE: f64 = 1e-6;

/// Samples each word from `p^(1/T)` renormalized. The recorded log-prob is
/// that of the untempered model.
pub fn decode_sample<M: StepModel>(
    model: &M,
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Hypothesis<M::State>> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let t = temperature.max(MIN_TEMPERATURE);
    let mut rng = substream(seed, "sampling");
    run(model, max_len, |d| sample_index(&d.log_probs, t, &mut rng))
}

fn sample_index(log_probs: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let m = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_probs
        .iter()
        .map(|&l| ((l - m) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    argmax(log_probs)
}

/// Beam search without length normalization. Each round expands every live
/// hypothesis over all words and keeps the `k` best by cumulative log-prob
/// (ties: lower token, then earlier hypothesis); those ending in STOP or
/// reaching `max_len` retire. Returns at most `k` hypotheses, best first.
pub fn beam_search<M: StepModel>(
    model: &M,
    k: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis<M::State>>> {
    if k == 0 {
        return Err(invalid("beam width must be at least 1"));
    }
    if max_len == 0 {
        return Err(invalid("max_len must be at least 1"));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial(),
        attention: Vec::new(),
    }];
    let mut pool = Vec::new();
    while !live.is_empty() {
        let dists = live
            .iter()
            .map(|h| model.step(&h.state))
            .collect::<Result<Vec<_>>>()?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (h, d)) in live.iter().zip(&dists).enumerate() {
            for (w, &lp) in d.log_probs.iter().enumerate() {
                cands.push((h.log_prob + lp, w, hi));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(k);
        let mut next = Vec::with_capacity(k);
        for (score, w, hi) in cands {
            let parent = &live[hi];
            let d = &dists[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(w);
            let mut attention = parent.attention.clone();
            if let Some(r) = &d.regions {
                attention.push(r.clone());
            }
            let done = w == STOP || tokens.len() == max_len;
            let state = if done {
                parent.state.clone()
            } else {
                model.advance(&parent.state, d, w)?
            };
            let h = Hypothesis {
                tokens,
                log_prob: score,
                state,
                attention,
            };
            if done {
                pool.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    pool.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    pool.truncate(k);
    Ok(pool)
}
