//! Joint word-region attention. The score of word `w` and region `r` given
//! state `h` is the sum of three bilinear interactions plus two biases:
//!
//! ```text
//! S = W θ_wh h 1ᵀ + W θ_wr Rᵀ + 1 (R θ_rh h)ᵀ + W θ_w 1ᵀ + 1 (R θ_r)ᵀ
//! ```
//!
//! and a single softmax over all `(w, r)` pairs gives the joint distribution.
//! Word prediction uses its row sums, visual feedback pools `R` with its
//! column sums (or with one renormalized row) and feeds the GRU.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;

pub const EMBED: &str = "att.embed";
pub const WORD_STATE: &str = "att.word_state";
pub const WORD_REGION: &str = "att.word_region";
pub const REGION_STATE: &str = "att.region_state";
pub const WORD_BIAS: &str = "att.word_bias";
pub const REGION_BIAS: &str = "att.region_bias";
pub const INIT_STATE: &str = "att.init_state";

pub const GRU_NAMES: [&str; 9] = [
    "gru.update.w",
    "gru.update.u",
    "gru.update.b",
    "gru.reset.w",
    "gru.reset.u",
    "gru.reset.b",
    "gru.cand.w",
    "gru.cand.u",
    "gru.cand.b",
];

/// Which region distribution pools the descriptors fed back to the GRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    /// No visual input to the state update.
    None,
    /// `p(r | h)`.
    Marginal,
    /// `p(r | w, h)` for the emitted word `w`.
    Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub words: usize,
    pub word: usize,
    pub hidden: usize,
    pub region: usize,
    pub image: usize,
}

impl AttentionDims {
    pub fn gru_input(&self, feedback: Feedback) -> usize {
        match feedback {
            Feedback::None => self.word,
            _ => self.word + self.region,
        }
    }
}

pub fn init_attention(params: &mut ParamStore, d: &AttentionDims, rng: &mut Rng) {
    params.insert_glorot(EMBED, &[d.words, d.word], d.words, d.word, rng);
    params.insert_glorot(WORD_STATE, &[d.word, d.hidden], d.hidden, d.word, rng);
    params.insert_glorot(WORD_REGION, &[d.word, d.region], d.region, d.word, rng);
    params.insert_glorot(REGION_STATE, &[d.region, d.hidden], d.hidden, d.region, rng);
    params.insert_zeros(WORD_BIAS, &[d.word]);
    params.insert_zeros(REGION_BIAS, &[d.region]);
    params.insert_glorot(INIT_STATE, &[d.hidden, d.image], d.image, d.hidden, rng);
}

/// GRU with input width `input`; matrices act on column vectors.
pub fn init_gru(params: &mut ParamStore, hidden: usize, input: usize, rng: &mut Rng) {
    for gate in ["update", "reset", "cand"] {
        params.insert_glorot(
            &format!("gru.{gate}.w"),
            &[hidden, input],
            input,
            hidden,
            rng,
        );
        params.insert_glorot(
            &format!("gru.{gate}.u"),
            &[hidden, hidden],
            hidden,
            hidden,
            rng,
        );
        params.insert_zeros(&format!("gru.{gate}.b"), &[hidden]);
    }
}

/// Attention parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub embed: Var,
    pub word_state: Var,
    pub word_region: Var,
    pub region_state: Var,
    pub word_bias: Var,
    pub region_bias: Var,
    pub init_state: Var,
}

impl AttentionVars {
    pub fn from_bound(b: &Bound) -> Result<Self> {
        Ok(Self {
            embed: b.var(EMBED)?,
            word_state: b.var(WORD_STATE)?,
            word_region: b.var(WORD_REGION)?,
            region_state: b.var(REGION_STATE)?,
            word_bias: b.var(WORD_BIAS)?,
            region_bias: b.var(REGION_BIAS)?,
            init_state: b.var(INIT_STATE)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
}

impl GruVars {
    pub fn from_bound(bd: &Bound) -> Result<Self> {
        let v = |i: usize| bd.var(GRU_NAMES[i]);
        Ok(Self {
            w: [v(0)?, v(3)?, v(6)?],
            u: [v(1)?, v(4)?, v(7)?],
            b: [v(2)?, v(5)?, v(8)?],
        })
    }

    /// From vars in the order of [`GRU_NAMES`].
    pub fn from_vars(v: &[Var]) -> Self {
        Self {
            w: [v[0], v[3], v[6]],
            u: [v[1], v[4], v[7]],
            b: [v[2], v[5], v[8]],
        }
    }
}

/// `h_0 = θ_hi φ`.
pub fn initial_state(tape: &mut Tape, theta_hi: Var, phi: Var) -> Result<Var> {
    tape.matmul(theta_hi, phi)
}

/// Terms of the score that do not depend on the recurrent state.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    /// `W θ_wh`, `[n_w, d_h]`
    pub word_state: Var,
    /// `W θ_w`, `[n_w]`
    pub word_bias: Var,
    pub regions: Option<RegionContext>,
}

#[derive(Clone, Copy, Debug)]
pub struct RegionContext {
    /// `R`, `[n_r, d_r]`
    pub descriptors: Var,
    /// `W θ_wr Rᵀ`, `[n_w, n_r]`
    pub word_region: Var,
    /// `R θ_rh`, `[n_r, d_h]`
    pub region_state: Var,
    /// `R θ_r`, `[n_r]`
    pub region_bias: Var,
}

/// Precomputes the state-independent terms. `regions = None` gives the
/// region-free baseline.
pub fn step_context(
    tape: &mut Tape,
    a: &AttentionVars,
    regions: Option<Var>,
) -> Result<StepContext> {
    let word_state = tape.matmul(a.embed, a.word_state)?;
    let word_bias = tape.matmul(a.embed, a.word_bias)?;
    let regions = match regions {
        None => None,
        Some(r) => {
            let wr = tape.matmul(a.embed, a.word_region)?;
            let rt = tape.transpose(r)?;
            Some(RegionContext {
                descriptors: r,
                word_region: tape.matmul(wr, rt)?,
                region_state: tape.matmul(r, a.region_state)?,
                region_bias: tape.matmul(r, a.region_bias)?,
            })
        }
    };
    Ok(StepContext {
        word_state,
        word_bias,
        regions,
    })
}

/// Per-step quantities on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// Scores `[n_w, n_r]` (absent without regions).
    pub scores: Option<Var>,
    /// Log of the joint distribution `[n_w, n_r]`.
    pub log_joint: Option<Var>,
    /// `ln p(w | h)`, `[n_w]`
    pub word_log_probs: Var,
}

/// Scores and word log-marginal at state `h`.
pub fn attention_step(tape: &mut Tape, ctx: &StepContext, h: Var) -> Result<StepVars> {
    let ws = tape.matmul(ctx.word_state, h)?;
    let word_terms = tape.add(ws, ctx.word_bias)?;
    match &ctx.regions {
        None => Ok(StepVars {
            scores: None,
            log_joint: None,
            word_log_probs: tape.log_softmax(word_terms)?,
        }),
        Some(rc) => {
            let rs = tape.matmul(rc.region_state, h)?;
            let region_terms = tape.add(rs, rc.region_bias)?;
            let outer = tape.outer_sum(word_terms, region_terms)?;
            let scores = tape.add(rc.word_region, outer)?;
            let log_joint = tape.log_softmax(scores)?;
            Ok(StepVars {
                scores: Some(scores),
                log_joint: Some(log_joint),
                word_log_probs: tape.logsumexp(log_joint, 1)?,
            })
        }
    }
}

/// `p(r | h)` from the log-joint.
pub fn region_marginal_var(tape: &mut Tape, log_joint: Var) -> Result<Var> {
    let joint = tape.exp(log_joint)?;
    tape.sum_axis(joint, 0)
}

/// `p(r | w, h)`: the softmax of row `w` of the scores, which equals the
/// renormalized row of the joint.
pub fn region_conditional_var(tape: &mut Tape, scores: Var, word: usize) -> Result<Var> {
    let n_r = tape.shape(scores)[1];
    let row = tape.gather_rows(scores, vec![word])?;
    let row = tape.reshape(row, &[n_r])?;
    tape.softmax(row)
}

/// `v = pᵀ R`.
pub fn pool_var(tape: &mut Tape, p: Var, descriptors: Var) -> Result<Var> {
    tape.matmul(p, descriptors)
}

pub fn embed_var(tape: &mut Tape, embed: Var, word: usize) -> Result<Var> {
    let d = tape.shape(embed)[1];
    let row = tape.gather_rows(embed, vec![word])?;
    tape.reshape(row, &[d])
}

/// Update/reset gating with the reset applied inside the candidate's
/// recurrent term; `h' = (1 - z) h + z h~`.
pub fn gru_var(tape: &mut Tape, g: &GruVars, h: Var, x: Var) -> Result<Var> {
    let pre = |tape: &mut Tape, i: usize, hh: Var| -> Result<Var> {
        let wx = tape.matmul(g.w[i], x)?;
        let uh = tape.matmul(g.u[i], hh)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, g.b[i])
    };
    let z_pre = pre(tape, 0, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = pre(tape, 1, h)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let c_pre = pre(tape, 2, rh)?;
    let cand = tape.tanh(c_pre)?;
    let keep = tape.affine(z, -1.0, 1.0)?;
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

/// GRU input for the emitted word: its embedding, concatenated with pooled
/// descriptors under visual feedback.
pub fn feedback_input(
    tape: &mut Tape,
    a: &AttentionVars,
    ctx: &StepContext,
    step: &StepVars,
    feedback: Feedback,
    word: usize,
) -> Result<Var> {
    let e = embed_var(tape, a.embed, word)?;
    let pooled = match (feedback, &ctx.regions, step.log_joint, step.scores) {
        (Feedback::None, ..) => return Ok(e),
        (Feedback::Marginal, Some(rc), Some(lj), _) => {
            let p = region_marginal_var(tape, lj)?;
            pool_var(tape, p, rc.descriptors)?
        }
        (Feedback::Conditional, Some(rc), _, Some(s)) => {
            let p = region_conditional_var(tape, s, word)?;
            pool_var(tape, p, rc.descriptors)?
        }
        _ => return Err(invalid("visual feedback requires regions")),
    };
    tape.concat(&[e, pooled])
}

// ---------------------------------------------------------------------------
// Tensor-level API. Each call runs the tape functions above on constants.

/// Attention parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub embed: Tensor,
    pub word_state: Tensor,
    pub word_region: Tensor,
    pub region_state: Tensor,
    pub word_bias: Tensor,
    pub region_bias: Tensor,
    pub init_state: Tensor,
}

impl AttentionParams {
    pub fn from_store(p: &ParamStore) -> Result<Self> {
        Ok(Self {
            embed: p.get(EMBED)?.clone(),
            word_state: p.get(WORD_STATE)?.clone(),
            word_region: p.get(WORD_REGION)?.clone(),
            region_state: p.get(REGION_STATE)?.clone(),
            word_bias: p.get(WORD_BIAS)?.clone(),
            region_bias: p.get(REGION_BIAS)?.clone(),
            init_state: p.get(INIT_STATE)?.clone(),
        })
    }

    /// Zero-valued parameters of the given sizes.
    pub fn zeros(d: &AttentionDims) -> Self {
        Self {
            embed: Tensor::zeros(&[d.words, d.word]),
            word_state: Tensor::zeros(&[d.word, d.hidden]),
            word_region: Tensor::zeros(&[d.word, d.region]),
            region_state: Tensor::zeros(&[d.region, d.hidden]),
            word_bias: Tensor::zeros(&[d.word]),
            region_bias: Tensor::zeros(&[d.region]),
            init_state: Tensor::zeros(&[d.hidden, d.image]),
        }
    }

    pub fn into_store(self, p: &mut ParamStore) {
        p.insert(EMBED, self.embed);
        p.insert(WORD_STATE, self.word_state);
        p.insert(WORD_REGION, self.word_region);
        p.insert(REGION_STATE, self.region_state);
        p.insert(WORD_BIAS, self.word_bias);
        p.insert(REGION_BIAS, self.region_bias);
        p.insert(INIT_STATE, self.init_state);
    }

    fn record(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            embed: tape.constant(self.embed.clone()),
            word_state: tape.constant(self.word_state.clone()),
            word_region: tape.constant(self.word_region.clone()),
            region_state: tape.constant(self.region_state.clone()),
            word_bias: tape.constant(self.word_bias.clone()),
            region_bias: tape.constant(self.region_bias.clone()),
            init_state: tape.constant(self.init_state.clone()),
        }
    }
}

/// GRU parameter tensors, in the order of [`GRU_NAMES`].
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams(pub [Tensor; 9]);

impl GruParams {
    pub fn from_store(p: &ParamStore) -> Result<Self> {
        let t = |i: usize| p.get(GRU_NAMES[i]).cloned();
        Ok(Self([
            t(0)?,
            t(1)?,
            t(2)?,
            t(3)?,
            t(4)?,
            t(5)?,
            t(6)?,
            t(7)?,
            t(8)?,
        ]))
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, input]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        Self([w(), u(), b(), w(), u(), b(), w(), u(), b()])
    }

    /// Update-gate bias.
    pub fn update_bias_mut(&mut self) -> &mut Tensor {
        &mut self.0[2]
    }

    fn record(&self, tape: &mut Tape) -> GruVars {
        let v: Vec<Var> = self.0.iter().map(|t| tape.constant(t.clone())).collect();
        GruVars::from_vars(&v)
    }
}

pub fn init_state(phi: &Tensor, theta_hi: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let (a, b) = (t.constant(theta_hi.clone()), t.constant(phi.clone()));
    let h = initial_state(&mut t, a, b)?;
    Ok(t.value(h).clone())
}

/// Score matrix `[n_w, n_r]`.
pub fn score_joint(h: &Tensor, regions: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let a = params.record(&mut t);
    let r = t.constant(regions.clone());
    let ctx = step_context(&mut t, &a, Some(r))?;
    let hv = t.constant(h.clone());
    let s = attention_step(&mut t, &ctx, hv)?;
    Ok(t.value(s.scores.expect("regions present")).clone())
}

/// Softmax over every `(w, r)` pair.
pub fn joint_dist(scores: &Tensor) -> Result<Tensor> {
    if scores.shape().len() != 2 {
        return Err(invalid(format!(
            "scores must be [n_w, n_r], got {:?}",
            scores.shape()
        )));
    }
    let mut t = Tape::new();
    let s = t.constant(scores.clone());
    let p = t.softmax(s)?;
    Ok(t.value(p).clone())
}

fn reduce(joint: &Tensor, axis: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let j = t.constant(joint.clone());
    let m = t.sum_axis(j, axis)?;
    Ok(t.value(m).clone())
}

/// `p(w | h)`: row sums of the joint.
pub fn word_marginal(joint: &Tensor) -> Result<Tensor> {
    reduce(joint, 1)
}

/// `p(r | h)`: column sums of the joint.
pub fn region_marginal(joint: &Tensor) -> Result<Tensor> {
    reduce(joint, 0)
}

/// `p(r | w, h)`: row `w` of the joint, renormalized.
pub fn region_conditional(joint: &Tensor, word: usize) -> Result<Tensor> {
    let s = joint.shape();
    if s.len() != 2 || word >= s[0] {
        return Err(invalid(format!("word {word} out of range for joint {s:?}")));
    }
    let row = &joint.data()[word * s[1]..(word + 1) * s[1]];
    let mass: f64 = row.iter().sum();
    if !(mass > 0.0) {
        return Err(invalid(format!("word {word} has no probability mass")));
    }
    Ok(Tensor::vector(row.iter().map(|p| p / mass).collect()))
}

/// Convex combination `pᵀ R` of descriptor rows.
pub fn pool_regions(p: &Tensor, regions: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let (pv, rv) = (t.constant(p.clone()), t.constant(regions.clone()));
    let v = pool_var(&mut t, pv, rv)?;
    Ok(t.value(v).clone())
}

pub fn gru_step(h: &Tensor, x: &Tensor, params: &GruParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let g = params.record(&mut t);
    let (hv, xv) = (t.constant(h.clone()), t.constant(x.clone()));
    let out = gru_var(&mut t, &g, hv, xv)?;
    Ok(t.value(out).clone())
}

/// Region-free word distribution `softmax(W θ_wh h)`.
pub fn baseline_word_dist(h: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let e = t.constant(params.embed.clone());
    let wh = t.constant(params.word_state.clone());
    let proj = t.matmul(e, wh)?;
    let hv = t.constant(h.clone());
    let logits = t.matmul(proj, hv)?;
    let p = t.softmax(logits)?;
    Ok(t.value(p).clone())
}

/// Result of one attention step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendOutput {
    pub word_dist: Tensor,
    /// The distribution used for pooling (marginal or conditional).
    pub region_dist: Tensor,
    pub h_next: Tensor,
}

/// One full step: scores, joint, word distribution, pooled feedback for the
/// emitted word and the state update.
pub fn attend_step(
    h: &Tensor,
    regions: &Tensor,
    emitted: usize,
    params: &AttentionParams,
    gru: &GruParams,
    feedback: Feedback,
) -> Result<AttendOutput> {
    if emitted >= params.embed.shape()[0] {
        return Err(invalid(format!("word index {emitted} out of range")));
    }
    let mut t = Tape::new();
    let a = params.record(&mut t);
    let g = gru.record(&mut t);
    let r = t.constant(regions.clone());
    let ctx = step_context(&mut t, &a, Some(r))?;
    let hv = t.constant(h.clone());
    let step = attention_step(&mut t, &ctx, hv)?;
    let word_dist = t.exp(step.word_log_probs)?;
    let region_dist = match feedback {
        Feedback::Conditional => region_conditional_var(&mut t, step.scores.unwrap(), emitted)?,
        _ => region_marginal_var(&mut t, step.log_joint.unwrap())?,
    };
    let x = feedback_input(&mut t, &a, &ctx, &step, feedback, emitted)?;
    let h_next = gru_var(&mut t, &g, hv, x)?;
    Ok(AttendOutput {
        word_dist: t.value(word_dist).clone(),
        region_dist: t.value(region_dist).clone(),
        h_next: t.value(h_next).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_zero_weights_halve_the_state() {
        let g = GruParams::zeros(2, 3);
        let h = gru_step(
            &Tensor::vector(vec![1.0, -1.0]),
            &Tensor::vector(vec![0.3, 0.1, -2.0]),
            &g,
        )
        .unwrap();
        assert_eq!(h.data(), &[0.5, -0.5]);
    }

    #[test]
    fn saturated_update_gate_replaces_the_state() {
        let mut g = GruParams::zeros(2, 1);
        *g.update_bias_mut() = Tensor::vector(vec![20.0, 20.0]);
        let h = gru_step(
            &Tensor::vector(vec![1.0, -1.0]),
            &Tensor::vector(vec![0.0]),
            &g,
        )
        .unwrap();
        assert!(h.data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn conditional_renormalizes_a_row() {
        let j = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let c = region_conditional(&j, 0).unwrap();
        assert!((c.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (c.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(region_conditional(&j, 2).is_err());
        let z = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        assert!(region_conditional(&z, 0).is_err());
    }
}
