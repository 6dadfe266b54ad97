//! Masked multimodal input sequences.
//!
//! A page with `N` regions becomes `N + 2` slots: `[CLS]`, the regions in
//! order, `[SEP]`. Both special slots carry the whole-page visual feature
//! and the full-page layout vector. Each slot has a visual and a textual
//! stream:
//!
//! ```text
//! visual_i  = W_v · Ṽ_i + W_p · p_i + seg_V
//! textual_i = W_s · S̃_i + W_p · p_i + seg_T
//! ```
//!
//! where `Ṽ`/`S̃` are the RoI features and sentence embeddings after masking.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::config::ModelConfig;
use crate::corpus::NormalizedBox;
use crate::error::{Error, Result};
use crate::params::{Initializer, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text_encoder::{SentenceEmbedding, SpecialSentence, TextEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Cls,
    Region,
    Sep,
}

/// What a masked sentence is replaced with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskCategory {
    /// The special mask sentence (80% of masked sentences).
    Mask,
    /// A sentence from another document (10%).
    Random,
    /// Left unchanged (10%).
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentenceMask {
    /// Slot index, `1..=N`.
    pub slot: usize,
    pub category: MaskCategory,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub sentences: Vec<SentenceMask>,
    /// Slot indices, `1..=N`.
    pub visual: Vec<usize>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty() && self.visual.is_empty()
    }

    pub fn random_count(&self) -> usize {
        self.sentences
            .iter()
            .filter(|m| m.category == MaskCategory::Random)
            .count()
    }

    /// Zero-based region indices of masked sentences.
    pub fn masked_sentence_regions(&self) -> Vec<usize> {
        self.sentences.iter().map(|m| m.slot - 1).collect()
    }

    /// Zero-based region indices of masked RoI features.
    pub fn masked_visual_regions(&self) -> Vec<usize> {
        self.visual.iter().map(|&s| s - 1).collect()
    }
}

/// Samples sentence and visual masks independently for `n` regions.
///
/// Each region's sentence is masked with probability `p_sentence`, then
/// assigned a category with probabilities 0.8 / 0.1 / 0.1; its RoI feature is
/// independently masked with probability `p_visual`.
pub fn sample_mask_plan(n: usize, p_sentence: f64, p_visual: f64, rng: &mut impl Rng) -> MaskPlan {
    let mut plan = MaskPlan::default();
    for slot in 1..=n {
        if rng.gen_bool(p_sentence) {
            let u: f64 = rng.gen();
            let category = if u < 0.8 {
                MaskCategory::Mask
            } else if u < 0.9 {
                MaskCategory::Random
            } else {
                MaskCategory::Keep
            };
            plan.sentences.push(SentenceMask { slot, category });
        }
        if rng.gen_bool(p_visual) {
            plan.visual.push(slot);
        }
    }
    plan
}

/// Input embedding parameters.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub position: Linear,
    pub visual_in: Linear,
    pub text_in: Linear,
    pub segment_visual: ParamId,
    pub segment_text: ParamId,
}

impl Embeddings {
    pub fn register(init: &mut Initializer, store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            position: init.add_linear(store, "embed.position", 6, d),
            visual_in: init.add_linear(store, "embed.visual", cfg.d_visual(), d),
            text_in: init.add_linear(store, "embed.text", cfg.d_text, d),
            segment_visual: store.insert("embed.segment_visual", init.uniform(vec![1, d], bound)),
            segment_text: store.insert("embed.segment_text", init.uniform(vec![1, d], bound)),
        }
    }

    /// Affine map of `[R, 6]` layout vectors to `[R, d]`.
    pub fn embed_position(&self, g: &mut Graph, store: &ParamStore, positions: NodeId) -> NodeId {
        self.position.forward(g, store, positions)
    }
}

/// One assembled input sequence.
#[derive(Clone, Debug)]
pub struct MultimodalSequence {
    pub kinds: Vec<SlotKind>,
    /// `[N+2, d_v]` visual stream before projection (masked rows are zero).
    pub visual_raw: NodeId,
    /// `[N+2, d_s]` textual stream before projection.
    pub textual_raw: Tensor,
    /// `[N+2, 6]` layout vectors.
    pub positions: Tensor,
    /// Per slot: sentence mask category, if masked.
    pub sentence_mask: Vec<Option<MaskCategory>>,
    pub visual_mask: Vec<bool>,
    /// `[N+2, d]` encoder inputs.
    pub visual_input: NodeId,
    pub textual_input: NodeId,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn regions(&self) -> usize {
        self.kinds.len() - 2
    }
}

/// Assembles the masked sequence of one page.
///
/// `v` is `[N, d_v]`, `v_page` is `[1, d_v]`; `random_sentences` supplies one
/// replacement, in plan order, for every [`MaskCategory::Random`] entry.
#[allow(clippy::too_many_arguments)]
pub fn build_sequence(
    g: &mut Graph,
    store: &ParamStore,
    emb: &Embeddings,
    text: &TextEncoder,
    positions: &[NormalizedBox],
    v: NodeId,
    v_page: NodeId,
    sentences: &[SentenceEmbedding],
    plan: &MaskPlan,
    random_sentences: &[SentenceEmbedding],
) -> Result<MultimodalSequence> {
    let n = sentences.len();
    if positions.len() != n || g.value(v).rows() != n {
        return Err(Error::InvalidInput(format!(
            "{} sentences, {} boxes, {} RoI features",
            n,
            positions.len(),
            g.value(v).rows()
        )));
    }
    let in_range = |slot: usize| (1..=n).contains(&slot);
    if let Some(bad) = plan
        .sentences
        .iter()
        .map(|m| m.slot)
        .chain(plan.visual.iter().copied())
        .find(|&s| !in_range(s))
    {
        return Err(Error::InvalidInput(format!(
            "mask plan touches slot {bad} outside regions 1..={n}"
        )));
    }
    if plan.random_count() != random_sentences.len() {
        return Err(Error::InvalidInput(format!(
            "{} random replacements for {} random masks",
            random_sentences.len(),
            plan.random_count()
        )));
    }

    let mut kinds = vec![SlotKind::Region; n + 2];
    kinds[0] = SlotKind::Cls;
    kinds[n + 1] = SlotKind::Sep;

    let mut visual_mask = vec![false; n + 2];
    for &s in &plan.visual {
        visual_mask[s] = true;
    }
    let mut sentence_mask = vec![None; n + 2];
    let mut text_rows: Vec<Vec<f64>> = Vec::with_capacity(n + 2);
    text_rows.push(text.special(SpecialSentence::Cls).0.clone());
    text_rows.extend(sentences.iter().map(|s| s.0.clone()));
    text_rows.push(text.special(SpecialSentence::Sep).0.clone());
    let mut randoms = random_sentences.iter();
    for m in &plan.sentences {
        sentence_mask[m.slot] = Some(m.category);
        match m.category {
            MaskCategory::Mask => text_rows[m.slot] = text.special(SpecialSentence::Mask).0.clone(),
            MaskCategory::Random => {
                text_rows[m.slot] = randoms.next().expect("counted above").0.clone()
            }
            MaskCategory::Keep => {}
        }
    }
    let textual_raw = Tensor::from_rows(&text_rows);

    // Zero masked RoI features before projection.
    let d_v = g.value(v).cols();
    let v_masked = if plan.visual.is_empty() {
        v
    } else {
        let mut keep = Tensor::filled(vec![n, d_v], 1.0);
        for &s in &plan.visual {
            keep.data_mut()[(s - 1) * d_v..s * d_v].fill(0.0);
        }
        let keep = g.constant(keep);
        g.mul(v, keep)
    };
    let visual_raw = g.concat_rows(&[v_page, v_masked, v_page]);

    let mut pos_rows = Vec::with_capacity(n + 2);
    pos_rows.push(NormalizedBox::FULL_PAGE.0.to_vec());
    pos_rows.extend(positions.iter().map(|p| p.0.to_vec()));
    pos_rows.push(NormalizedBox::FULL_PAGE.0.to_vec());
    let positions = Tensor::from_rows(&pos_rows);

    let pos_node = g.constant(positions.clone());
    let pos_emb = emb.embed_position(g, store, pos_node);
    let vis = emb.visual_in.forward(g, store, visual_raw);
    let vis = g.add(vis, pos_emb);
    let seg_v = g.param(store, emb.segment_visual);
    let visual_input = g.add_row(vis, seg_v);

    let text_node = g.constant(textual_raw.clone());
    let txt = emb.text_in.forward(g, store, text_node);
    let txt = g.add(txt, pos_emb);
    let seg_t = g.param(store, emb.segment_text);
    let textual_input = g.add_row(txt, seg_t);

    Ok(MultimodalSequence {
        kinds,
        visual_raw,
        textual_raw,
        positions,
        sentence_mask,
        visual_mask,
        visual_input,
        textual_input,
    })
}
