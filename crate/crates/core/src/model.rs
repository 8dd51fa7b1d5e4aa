//! The captioning model: encoder, region provider, joint attention and GRU,
//! with the interaction ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, attention_step, feedback_input, gru_var, initial_state, region_marginal_var,
    AttentionDims, AttentionVars, Feedback, GruVars, StepContext,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{SceneRecord, Vocabulary, IMAGE_SIZE};
use crate::decode::{AttentionTrace, StepDist, StepModel};
use crate::encoder::{
    self, conv_stack, image_code, is_encoder_param, EncoderOutput, FEATURE_CHANNELS,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::Quad;
use crate::params::{Bound, ParamStore};
use crate::regions::{self, ProposalBox, ProposalMap, Selection};
use crate::rng::{derive_seed, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionProvider {
    Grid,
    Proposals,
    Stn,
}

/// Which pairwise interactions are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Word-state term only: the region-free baseline.
    #[serde(rename = "wh")]
    Wh,
    /// Adds the word-region term.
    #[serde(rename = "wh+wr")]
    WhWr,
    /// Adds the region-state term.
    #[serde(rename = "wh+wr+rh")]
    WhWrRh,
    /// All interactions plus visual feedback.
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Wh,
        Ablation::WhWr,
        Ablation::WhWrRh,
        Ablation::Full,
    ];

    /// Parameters held at zero and never updated.
    pub fn zeroed(self) -> &'static [&'static str] {
        match self {
            Ablation::Wh => &[
                attention::WORD_REGION,
                attention::REGION_STATE,
                attention::REGION_BIAS,
            ],
            Ablation::WhWr => &[attention::REGION_STATE],
            Ablation::WhWrRh | Ablation::Full => &[],
        }
    }

    pub fn uses_regions(self) -> bool {
        self != Ablation::Wh
    }
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(invalid(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
    };
}

text_enum!(RegionProvider { RegionProvider::Grid => "grid", RegionProvider::Proposals => "proposals", RegionProvider::Stn => "stn" });
text_enum!(Ablation { Ablation::Wh => "wh", Ablation::WhWr => "wh+wr", Ablation::WhWrRh => "wh+wr+rh", Ablation::Full => "full" });
text_enum!(Feedback { Feedback::None => "none", Feedback::Marginal => "marginal", Feedback::Conditional => "conditional" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub image_dim: usize,
    pub provider: RegionProvider,
    pub feedback: Feedback,
    pub ablation: Ablation,
    pub grid_stride: usize,
    /// Proposals used per image.
    pub proposal_k: usize,
    /// Random boxes added to the ground-truth boxes by the proposal oracle.
    pub proposal_distractors: usize,
    /// Corner jitter of oracle boxes, in pixels.
    pub proposal_jitter: f64,
    /// Give the 2x render its own conv stack instead of reusing the main one.
    #[serde(default)]
    pub separate_hires: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            hidden_dim: 32,
            image_dim: 64,
            provider: RegionProvider::Grid,
            feedback: Feedback::Marginal,
            ablation: Ablation::Full,
            grid_stride: 1,
            proposal_k: 50,
            proposal_distractors: 47,
            proposal_jitter: 2.0,
            separate_hires: true,
        }
    }
}

impl ModelConfig {
    /// Only the full model feeds regions back into the state update.
    pub fn validate(&self) -> Result<()> {
        if self.ablation != Ablation::Full && self.feedback != Feedback::None {
            return Err(invalid(format!(
                "ablation {} has no visual feedback; use feedback none",
                self.ablation
            )));
        }
        if self.grid_stride == 0 || self.proposal_k == 0 {
            return Err(invalid("grid stride and proposal count must be positive"));
        }
        Ok(())
    }

    /// Default feedback for an ablation.
    pub fn feedback_for(ablation: Ablation) -> Feedback {
        if ablation == Ablation::Full {
            Feedback::Marginal
        } else {
            Feedback::None
        }
    }

    pub fn dims(&self, words: usize) -> AttentionDims {
        AttentionDims {
            words,
            word: self.word_dim,
            hidden: self.hidden_dim,
            region: FEATURE_CHANNELS,
            image: self.image_dim,
        }
    }

    pub fn uses_regions(&self) -> bool {
        self.ablation.uses_regions()
    }

    fn needs_hires(&self) -> bool {
        self.uses_regions() && self.provider == RegionProvider::Proposals
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// One image ready for the model.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub id: String,
    /// `[64, 64, 3]` in [0, 1].
    pub image: Tensor,
    /// `[128, 128, 3]`, present for the proposal provider.
    pub hires: Option<Tensor>,
    pub proposals: Vec<ProposalBox>,
    /// Encoder output, valid while the encoder is unchanged.
    pub features: Option<EncoderOutput>,
}

/// State-independent terms of one image on a tape.
pub struct ImageGraph {
    pub context: StepContext,
    pub h0: Var,
    pub geometry: Vec<Quad>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let mut params = ParamStore::new();
        encoder::init_encoder(&mut params, IMAGE_SIZE, config.image_dim, &mut rng)?;
        if config.needs_hires() && config.separate_hires {
            encoder::init_conv_stack(&mut params, encoder::HIRES, &mut rng);
        }
        let dims = config.dims(vocab.len());
        attention::init_attention(&mut params, &dims, &mut rng);
        attention::init_gru(
            &mut params,
            dims.hidden,
            dims.gru_input(config.feedback),
            &mut rng,
        );
        if config.uses_regions() && config.provider == RegionProvider::Stn {
            regions::init_stn(&mut params, FEATURE_CHANNELS, &mut rng);
        }
        for name in config.ablation.zeroed() {
            let t = params.get_mut(name)?;
            t.data_mut().fill(0.0);
        }
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn words(&self) -> usize {
        self.vocab.len()
    }

    /// Whether `name` receives updates; encoder parameters only when
    /// `encoder_trainable`.
    pub fn trainable(&self, name: &str, encoder_trainable: bool) -> bool {
        if self.config.ablation.zeroed().contains(&name) {
            return false;
        }
        if is_encoder_param(name) {
            return encoder_trainable;
        }
        !name.starts_with("aux.")
    }

    /// Seed of the proposal oracle for a scene.
    pub fn proposal_seed(rec: &SceneRecord) -> u64 {
        derive_seed(0, &rec.id, 0)
    }

    /// Converts a record, generating oracle proposals when the provider
    /// needs them and `proposals` is `None`.
    pub fn prepare(&self, rec: &SceneRecord, proposals: Option<Vec<ProposalBox>>) -> SceneInput {
        let needs = self.config.needs_hires();
        let proposals = match (needs, proposals) {
            (false, _) => Vec::new(),
            (true, Some(p)) => p,
            (true, None) => regions::oracle_proposals(
                rec,
                self.config.proposal_distractors,
                self.config.proposal_jitter,
                Self::proposal_seed(rec),
            ),
        };
        SceneInput {
            id: rec.id.clone(),
            image: rec.image.to_tensor(),
            hires: needs.then(|| rec.hires_image().to_tensor()),
            proposals,
            features: None,
        }
    }

    /// [`Model::prepare`] with proposals looked up by scene id.
    pub fn prepare_from(&self, rec: &SceneRecord, proposals: Option<&ProposalMap>) -> SceneInput {
        self.prepare(rec, proposals.and_then(|m| m.get(&rec.id).cloned()))
    }

    pub fn encode(&self, input: &SceneInput) -> Result<EncoderOutput> {
        encoder::encode(&input.image, input.hires.as_ref(), &self.params)
    }

    /// Fills `input.features` with the current encoder output.
    pub fn cache_features(&self, input: &mut SceneInput) -> Result<()> {
        input.features = Some(self.encode(input)?);
        Ok(())
    }

    /// Encoder, regions and state-independent attention terms of one image.
    /// Cached features are used as constants unless the encoder trains.
    pub fn image_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &SceneInput,
        encoder_trainable: bool,
        selection: Selection<'_>,
    ) -> Result<ImageGraph> {
        let cfg = &self.config;
        let (phi, gamma, hires) = match (&input.features, encoder_trainable) {
            (Some(f), false) => {
                let hires = match (&f.gamma_hires, cfg.needs_hires()) {
                    (Some(g), true) => Some(tape.constant(g.clone())),
                    (None, true) => {
                        return Err(invalid("cached features lack the high-resolution map"))
                    }
                    _ => None,
                };
                (
                    tape.constant(f.phi.clone()),
                    tape.constant(f.gamma.clone()),
                    hires,
                )
            }
            _ => {
                let x = tape.constant(input.image.clone());
                let gamma = conv_stack(tape, bound, encoder::MAIN, x)?;
                let phi = image_code(tape, bound, gamma)?;
                let hires = if cfg.needs_hires() {
                    let img = input
                        .hires
                        .as_ref()
                        .ok_or_else(|| invalid("missing high-resolution image"))?;
                    let xh = tape.constant(img.clone());
                    Some(conv_stack(
                        tape,
                        bound,
                        encoder::hires_prefix(&self.params),
                        xh,
                    )?)
                } else {
                    None
                };
                (phi, gamma, hires)
            }
        };
        let size = IMAGE_SIZE as f64;
        let (regions, geometry) = if !cfg.uses_regions() {
            (None, Vec::new())
        } else {
            let (h, w) = (tape.shape(gamma)[0], tape.shape(gamma)[1]);
            match cfg.provider {
                RegionProvider::Grid => (
                    Some(regions::grid_descriptors(tape, gamma, cfg.grid_stride)?),
                    regions::grid_geometry(h, w, cfg.grid_stride, size)?,
                ),
                RegionProvider::Proposals => {
                    let chosen =
                        regions::select_proposals(&input.proposals, cfg.proposal_k, selection)?;
                    let d = regions::proposal_descriptors(
                        tape,
                        hires.expect("hires map"),
                        &chosen,
                        size,
                    )?;
                    let geo = chosen
                        .iter()
                        .map(|b| b.bbox.clip(size, size).to_quad())
                        .collect();
                    (Some(d), geo)
                }
                RegionProvider::Stn => {
                    let theta = regions::stn_transforms(tape, bound, gamma)?;
                    let (d, kept) =
                        regions::stn_descriptors(tape, bound, gamma, theta, cfg.grid_stride)?;
                    let geo = regions::stn_geometry(tape.value(kept), h, w, cfg.grid_stride, size)?;
                    (Some(d), geo)
                }
            }
        };
        let a = AttentionVars::from_bound(bound)?;
        let context = attention::step_context(tape, &a, regions)?;
        let h0 = initial_state(tape, a.init_state, phi)?;
        Ok(ImageGraph {
            context,
            h0,
            geometry,
        })
    }

    /// Teacher-forced negative log-likelihood of `tokens` (ending in STOP),
    /// summed over all tokens. Optionally records `p(r | h_t)` per step.
    pub fn caption_nll(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &ImageGraph,
        tokens: &[usize],
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(invalid("caption is empty"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.words()) {
            return Err(invalid(format!("token {bad} outside the vocabulary")));
        }
        let a = AttentionVars::from_bound(bound)?;
        let g = GruVars::from_bound(bound)?;
        let mut trace = trace;
        let mut h = graph.h0;
        let mut terms = Vec::with_capacity(tokens.len());
        for (t, &w) in tokens.iter().enumerate() {
            let step = attention_step(tape, &graph.context, h)?;
            terms.push(tape.gather_rows(step.word_log_probs, vec![w])?);
            if let (Some(tr), Some(lj)) = (trace.as_deref_mut(), step.log_joint) {
                tr.push(region_marginal_var(tape, lj)?);
            }
            if t + 1 < tokens.len() {
                let x = feedback_input(tape, &a, &graph.context, &step, self.config.feedback, w)?;
                h = gru_var(tape, &g, h, x)?;
            }
        }
        let all = tape.concat(&terms)?;
        let total = tape.sum(all)?;
        tape.affine(total, -1.0, 0.0)
    }

    /// `-ln p(tokens | image)` under evaluation-time region selection.
    pub fn caption_loss(&self, input: &SceneInput, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let graph = self.image_graph(&mut tape, &bound, input, false, Selection::TopK)?;
        let loss = self.caption_nll(&mut tape, &bound, &graph, tokens, None)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Teacher-forced region distributions along `tokens`.
    pub fn attention_trace(&self, input: &SceneInput, tokens: &[usize]) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let graph = self.image_graph(&mut tape, &bound, input, false, Selection::TopK)?;
        let mut vars = Vec::new();
        self.caption_nll(&mut tape, &bound, &graph, tokens, Some(&mut vars))?;
        Ok(AttentionTrace {
            steps: vars
                .iter()
                .map(|v| tape.value(*v).data().to_vec())
                .collect(),
            geometry: graph.geometry,
        })
    }

    /// Decoding session for one image.
    pub fn session(&self, input: &SceneInput) -> Result<Session<'_>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let graph = self.image_graph(&mut tape, &bound, input, false, Selection::TopK)?;
        let c = &graph.context;
        let regions = c.regions.map(|r| {
            [r.descriptors, r.word_region, r.region_state, r.region_bias]
                .map(|v| tape.value(v).clone())
        });
        Ok(Session {
            model: self,
            word_state: tape.value(c.word_state).clone(),
            word_bias: tape.value(c.word_bias).clone(),
            regions,
            h0: tape.value(graph.h0).clone(),
            geometry: graph.geometry,
        })
    }

    /// Copies every parameter of `source` that this model also has. Shapes
    /// must agree.
    pub fn warm_start_from(&mut self, source: &Model) -> Result<()> {
        if source.vocab.tokens() != self.vocab.tokens() {
            return Err(invalid("warm start: vocabularies differ"));
        }
        for (name, t) in source.params.iter() {
            if let Ok(dst) = self.params.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(invalid(format!(
                        "warm start: `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        dst.shape()
                    )));
                }
                *dst = t.clone();
            }
        }
        for name in self.config.ablation.zeroed() {
            self.params.get_mut(name)?.data_mut().fill(0.0);
        }
        Ok(())
    }
}

/// Per-image decoding state: state-independent terms precomputed once.
pub struct Session<'m> {
    model: &'m Model,
    word_state: Tensor,
    word_bias: Tensor,
    /// Descriptors, word-region, region-state and region-bias terms.
    regions: Option<[Tensor; 4]>,
    h0: Tensor,
    pub geometry: Vec<Quad>,
}

impl Session<'_> {
    fn context(&self, tape: &mut Tape) -> StepContext {
        StepContext {
            word_state: tape.constant(self.word_state.clone()),
            word_bias: tape.constant(self.word_bias.clone()),
            regions: self
                .regions
                .as_ref()
                .map(|[d, wr, rs, rb]| attention::RegionContext {
                    descriptors: tape.constant(d.clone()),
                    word_region: tape.constant(wr.clone()),
                    region_state: tape.constant(rs.clone()),
                    region_bias: tape.constant(rb.clone()),
                }),
        }
    }
}

impl StepModel for Session<'_> {
    type State = Tensor;

    fn initial(&self) -> Tensor {
        self.h0.clone()
    }

    fn step(&self, h: &Tensor) -> Result<StepDist> {
        let mut tape = Tape::new();
        let ctx = self.context(&mut tape);
        let hv = tape.constant(h.clone());
        let s = attention_step(&mut tape, &ctx, hv)?;
        let regions = match s.log_joint {
            Some(lj) => {
                let p = region_marginal_var(&mut tape, lj)?;
                Some(tape.value(p).data().to_vec())
            }
            None => None,
        };
        Ok(StepDist {
            log_probs: tape.value(s.word_log_probs).data().to_vec(),
            regions,
            scores: s.scores.map(|v| tape.value(v).clone()),
        })
    }

    fn advance(&self, h: &Tensor, dist: &StepDist, token: usize) -> Result<Tensor> {
        let params = &self.model.params;
        let mut tape = Tape::new();
        let embed = tape.constant(params.get(attention::EMBED)?.clone());
        let e = attention::embed_var(&mut tape, embed, token)?;
        let x = match (self.model.config.feedback, &self.regions) {
            (Feedback::None, _) => e,
            (fb, Some([d, ..])) => {
                let p = match fb {
                    Feedback::Marginal => {
                        let p = dist
                            .regions
                            .clone()
                            .ok_or_else(|| invalid("missing region distribution"))?;
                        tape.constant(Tensor::vector(p))
                    }
                    _ => {
                        let s = dist
                            .scores
                            .clone()
                            .ok_or_else(|| invalid("missing scores"))?;
                        let s = tape.constant(s);
                        attention::region_conditional_var(&mut tape, s, token)?
                    }
                };
                let dv = tape.constant(d.clone());
                let v = attention::pool_var(&mut tape, p, dv)?;
                tape.concat(&[e, v])?
            }
            (_, None) => return Err(invalid("visual feedback requires regions")),
        };
        let gv: Vec<Var> = attention::GRU_NAMES
            .iter()
            .map(|n| params.get(n).map(|t| tape.constant(t.clone())))
            .collect::<Result<_>>()?;
        let g = GruVars::from_vars(&gv);
        let hv = tape.constant(h.clone());
        let out = gru_var(&mut tape, &g, hv, x)?;
        Ok(tape.value(out).clone())
    }
}
