//! Mutual visual-textual guidance scoring.
//!
//! For each module the region is matched against the expression twice:
//!
//! * visual-guided language: word/visual cosine similarities, scaled by the
//!   module's word attention, reweight the words into `q̄`, which is scored
//!   against the pooled visual feature by cosine;
//! * language-guided visual: the phrase embedding `q` drives an additive
//!   attention over the visual elements, giving `v̄`, which is scored against
//!   `q` by a two-layer ReLU MLP on `[q ; v̄]`.
//!
//! The module score is the sum of the two, and the overall score is the
//! module-weighted sum of the three module scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::language::{ExpressionEncoding, ExpressionNodes};
use crate::params::{BoundParams, Module};
use crate::tensor::Tensor;
use crate::visual::{assemble_module_visuals, ModuleFeatures, ModuleVisuals, RegionFeatures};

/// Which guidance directions a module uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    /// Pooled visual against raw phrase embedding in both branches.
    None,
    /// Visual-guided language only; the visual attention is uniform.
    #[serde(rename = "v2l")]
    VisualToLanguage,
    /// Both directions.
    #[default]
    Mutual,
}

impl Guidance {
    pub fn name(self) -> &'static str {
        match self {
            Guidance::None => "none",
            Guidance::VisualToLanguage => "v2l",
            Guidance::Mutual => "mutual",
        }
    }
}

impl FromStr for Guidance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "off" => Ok(Guidance::None),
            "v2l" | "v->l" | "vl" => Ok(Guidance::VisualToLanguage),
            "mutual" | "v<->l" | "both" => Ok(Guidance::Mutual),
            other => Err(Error::Config(format!("unknown guidance mode {other:?}"))),
        }
    }
}

/// Guidance mode per module, e.g. `subj=mutual,loc=mutual,rel=none`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub subj: Guidance,
    pub loc: Guidance,
    pub rel: Guidance,
}

impl Ablation {
    pub fn uniform(mode: Guidance) -> Self {
        Self {
            subj: mode,
            loc: mode,
            rel: mode,
        }
    }

    pub fn get(&self, m: Module) -> Guidance {
        match m {
            Module::Subject => self.subj,
            Module::Location => self.loc,
            Module::Relationship => self.rel,
        }
    }

    pub fn set(&mut self, m: Module, mode: Guidance) {
        match m {
            Module::Subject => self.subj = mode,
            Module::Location => self.loc = mode,
            Module::Relationship => self.rel = mode,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "subj={},loc={},rel={}",
            self.subj.name(),
            self.loc.name(),
            self.rel.name()
        )
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Unlisted modules keep the default (mutual).
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (module, mode) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("ablation entry {part:?} is not MODULE=MODE")))?;
            let module = Module::parse(module)
                .ok_or_else(|| Error::Config(format!("unknown module {module:?}")))?;
            out.set(module, mode.parse()?);
        }
        Ok(out)
    }
}

/// `s_t = cos(v, e_t)` for every word.
pub fn word_visual_similarity(g: &mut Graph, pooled: Var, words: Var) -> Result<Var> {
    g.cosine_rows(words, pooled)
}

/// Returns the word weights `softmax(λ ⊙ s)` and `q̄ = Σ_t weight_t e_t`.
pub fn visual_guided_language(
    g: &mut Graph,
    words: Var,
    similarity: Var,
    attention: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let logits = g.mul(attention, similarity)?;
    let weights = g.softmax(logits, Some(mask))?;
    let guided = g.weighted_rows(weights, words)?;
    Ok((weights, guided))
}

pub fn vl_match_score(g: &mut Graph, pooled: Var, guided: Var) -> Result<Var> {
    g.cosine(pooled, guided)
}

/// Visual half of `W_1 [v_n, q]`, shared by every expression scored against
/// the same region.
fn visual_hidden(g: &mut Graph, params: &BoundParams, visuals: Var, module: Module) -> Result<Var> {
    let d = g.value(visuals).cols();
    let w1v = g.slice_rows(params.attn_w1(module), 0, d)?;
    g.matmul(visuals, w1v)
}

fn attention_from_hidden(
    g: &mut Graph,
    params: &BoundParams,
    visual_part: Var,
    mask: &[bool],
    phrase: Var,
    module: Module,
) -> Result<(Var, Var)> {
    let d = g.value(phrase).len();
    let n = g.value(visual_part).rows();
    let h = params.config().hidden_dim;
    let w1q = g.slice_rows(params.attn_w1(module), d, d)?;
    let q = g.reshape(phrase, &[1, d])?;
    let qh = g.matmul(q, w1q)?;
    let qh = g.reshape(qh, &[h])?;
    let shift = g.add(qh, params.attn_b(module))?;
    let pre = g.add_row(visual_part, shift)?;
    let hidden = g.tanh(pre);
    let logits = g.matmul(hidden, params.attn_w2(module))?;
    let logits = g.reshape(logits, &[n])?;
    let attention = g.softmax(logits, Some(mask))?;
    Ok((hidden, attention))
}

/// `h_n = tanh(W_1 [v_n, q] + b)`, `a = softmax_n(W_2 h_n)` over unmasked
/// slots. Returns `(h, a)`.
pub fn language_guided_attention(
    g: &mut Graph,
    params: &BoundParams,
    visuals: Var,
    mask: &[bool],
    phrase: Var,
    module: Module,
) -> Result<(Var, Var)> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask {
            op: "language_guided_attention",
        });
    }
    let vh = visual_hidden(g, params, visuals, module)?;
    attention_from_hidden(g, params, vh, mask, phrase, module)
}

/// `v̄ = Σ_n a_n v_n`.
pub fn language_guided_visual(g: &mut Graph, visuals: Var, attention: Var) -> Result<Var> {
    g.weighted_rows(attention, visuals)
}

/// Two-layer ReLU MLP on `[q ; v̄]`, producing an unbounded scalar.
pub fn lv_match_score(g: &mut Graph, params: &BoundParams, phrase: Var, guided: Var, module: Module) -> Result<Var> {
    let (dq, dv) = (g.value(phrase).len(), g.value(guided).len());
    let joint = g.concat(&[phrase, guided])?;
    let joint = g.reshape(joint, &[1, dq + dv])?;
    let hidden = g.matmul(joint, params.mlp_w1(module))?;
    let width = g.value(hidden).len();
    let hidden = g.reshape(hidden, &[width])?;
    let hidden = g.add(hidden, params.mlp_b1(module))?;
    let hidden = g.relu(hidden);
    let hidden = g.reshape(hidden, &[1, width])?;
    let out = g.matmul(hidden, params.mlp_w2(module))?;
    let out = g.reshape(out, &[1])?;
    let out = g.add(out, params.mlp_b2(module))?;
    g.reshape(out, &[])
}

/// A region's visual sets plus per-module attention inputs that do not depend
/// on the expression.
#[derive(Clone, Debug)]
pub struct PreparedRegion {
    pub visuals: ModuleVisuals,
    visual_hidden: [Option<Var>; 3],
}

pub fn prepare_region(
    g: &mut Graph,
    params: &BoundParams,
    region: &RegionFeatures,
    ablation: &Ablation,
) -> Result<PreparedRegion> {
    let visuals = assemble_module_visuals(g, params, region)?;
    let mut visual_hidden = [None; 3];
    for m in Module::ALL {
        let f = visuals.get(m);
        if ablation.get(m) == Guidance::Mutual && f.has_elements() {
            visual_hidden[m.index()] = Some(visual_hidden_for(g, params, f, m)?);
        }
    }
    Ok(PreparedRegion { visuals, visual_hidden })
}

fn visual_hidden_for(g: &mut Graph, params: &BoundParams, f: &ModuleFeatures, m: Module) -> Result<Var> {
    visual_hidden(g, params, f.features, m)
}

/// Graph handles for one module's score.
#[derive(Clone, Debug)]
pub struct ModuleScoreNodes {
    pub module: Module,
    pub mode: Guidance,
    pub vl_score: Var,
    pub lv_score: Var,
    pub combined: Var,
    /// `s_t`; absent without visual-guided language.
    pub word_similarities: Option<Var>,
    /// `softmax(λ ⊙ s)`; absent without visual-guided language.
    pub word_weights: Option<Var>,
    /// `a_n`; absent when the module has no visual elements.
    pub visual_attention: Option<Var>,
    /// `h_n`; present only under mutual guidance.
    pub hidden: Option<Var>,
    pub guided_language: Var,
    pub guided_visual: Var,
}

/// Scores one module of a prepared region against an encoded expression.
pub fn module_score(
    g: &mut Graph,
    params: &BoundParams,
    region: &PreparedRegion,
    expr: &ExpressionNodes,
    module: Module,
    mode: Guidance,
) -> Result<ModuleScoreNodes> {
    let f = region.visuals.get(module);
    let phrase = expr.phrases[module.index()];
    let lambda = expr.attention[module.index()];

    let (vl_score, word_similarities, word_weights, guided_language) = match mode {
        Guidance::None => (g.cosine(f.pooled, phrase)?, None, None, phrase),
        Guidance::VisualToLanguage | Guidance::Mutual => {
            let s = word_visual_similarity(g, f.pooled, expr.words)?;
            let (w, q_bar) = visual_guided_language(g, expr.words, s, lambda, &expr.mask)?;
            (vl_match_score(g, f.pooled, q_bar)?, Some(s), Some(w), q_bar)
        }
    };

    let (visual_attention, hidden, guided_visual) = match mode {
        Guidance::Mutual if f.has_elements() => {
            let vh = match region.visual_hidden[module.index()] {
                Some(v) => v,
                None => visual_hidden_for(g, params, f, module)?,
            };
            let (h, a) = attention_from_hidden(g, params, vh, &f.mask, phrase, module)?;
            let v_bar = language_guided_visual(g, f.features, a)?;
            (Some(a), Some(h), v_bar)
        }
        Guidance::VisualToLanguage if f.has_elements() => {
            let live = f.mask.iter().filter(|&&m| m).count() as f64;
            let uniform = f.mask.iter().map(|&m| if m { 1.0 / live } else { 0.0 }).collect();
            (Some(g.constant(Tensor::vector(uniform))), None, f.pooled)
        }
        _ => (None, None, f.pooled),
    };

    let lv_score = lv_match_score(g, params, phrase, guided_visual, module)?;
    let combined = g.add(vl_score, lv_score)?;
    Ok(ModuleScoreNodes {
        module,
        mode,
        vl_score,
        lv_score,
        combined,
        word_similarities,
        word_weights,
        visual_attention,
        hidden,
        guided_language,
        guided_visual,
    })
}

#[derive(Clone, Debug)]
pub struct OverallScoreNodes {
    pub modules: [ModuleScoreNodes; 3],
    pub module_weights: Var,
    pub total: Var,
}

/// `F(r|E) = Σ_m ω_m (F(v^m, q̄^m) + F(q^m, v̄^m))`.
pub fn overall_score(
    g: &mut Graph,
    params: &BoundParams,
    region: &PreparedRegion,
    expr: &ExpressionNodes,
    ablation: &Ablation,
) -> Result<OverallScoreNodes> {
    let mut scores = Vec::with_capacity(3);
    for m in Module::ALL {
        scores.push(module_score(g, params, region, expr, m, ablation.get(m))?);
    }
    let combined: Vec<Var> = scores.iter().map(|s| s.combined).collect();
    let stacked = g.concat(&combined)?;
    let total = g.dot(expr.module_weights, stacked)?;
    let modules: [ModuleScoreNodes; 3] = scores.try_into().expect("three modules");
    Ok(OverallScoreNodes {
        modules,
        module_weights: expr.module_weights,
        total,
    })
}

/// Materialized per-module score and intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleScore {
    pub module: Module,
    pub mode: Guidance,
    pub vl_score: f64,
    pub lv_score: f64,
    pub combined: f64,
    pub word_similarities: Option<Tensor>,
    pub word_weights: Option<Tensor>,
    pub visual_attention: Option<Tensor>,
    pub hidden: Option<Tensor>,
    pub guided_language: Tensor,
    pub guided_visual: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverallScore {
    pub modules: [ModuleScore; 3],
    pub module_weights: Tensor,
    pub total: f64,
}

impl ModuleScoreNodes {
    pub fn values(&self, g: &Graph) -> ModuleScore {
        let opt = |v: Option<Var>| v.map(|v| g.value(v).clone());
        ModuleScore {
            module: self.module,
            mode: self.mode,
            vl_score: g.scalar(self.vl_score),
            lv_score: g.scalar(self.lv_score),
            combined: g.scalar(self.combined),
            word_similarities: opt(self.word_similarities),
            word_weights: opt(self.word_weights),
            visual_attention: opt(self.visual_attention),
            hidden: opt(self.hidden),
            guided_language: g.value(self.guided_language).clone(),
            guided_visual: g.value(self.guided_visual).clone(),
        }
    }
}

impl OverallScoreNodes {
    pub fn values(&self, g: &Graph) -> OverallScore {
        OverallScore {
            modules: [
                self.modules[0].values(g),
                self.modules[1].values(g),
                self.modules[2].values(g),
            ],
            module_weights: g.value(self.module_weights).clone(),
            total: g.scalar(self.total),
        }
    }
}

/// Scores for every candidate region of one expression.
#[derive(Clone, Debug)]
pub struct RankedRegions {
    pub scores: Vec<f64>,
    pub encoding: ExpressionEncoding,
    /// Per-region breakdown, filled only when requested.
    pub details: Vec<OverallScore>,
}

/// Value-only scoring of several regions against one expression.
pub fn score_regions(
    params: &crate::params::ModelParams,
    regions: &[RegionFeatures],
    token_ids: &[usize],
    ablation: &Ablation,
    detailed: bool,
) -> Result<RankedRegions> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let expr = crate::language::encode_expression(&mut g, &bound, token_ids)?;
    let mut scores = Vec::with_capacity(regions.len());
    let mut details = Vec::with_capacity(regions.len());
    for region in regions {
        let prepared = prepare_region(&mut g, &bound, region, ablation)?;
        let s = overall_score(&mut g, &bound, &prepared, &expr, ablation)?;
        scores.push(g.scalar(s.total));
        if detailed {
            details.push(s.values(&g));
        }
    }
    Ok(RankedRegions {
        scores,
        encoding: expr.values(&g),
        details,
    })
}
