//! The full model and its batched pretraining forward pass.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::checkpoint::{load_params, Checkpoint};
use crate::config::{LossConfig, RunConfig, TaskSet};
use crate::corpus::{normalize_box, BoundingBox, DocumentRecord, NormalizedBox, RasterImage};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::Result;
use crate::losses::{self, LossReport, TaskLosses};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::quantizer::{diversity_stats, sample_gumbel, Quantizer, Relaxation, QUANTIZER_PREFIX};
use crate::seeding;
use crate::sequence::{build_sequence, sample_mask_plan, Embeddings, MaskPlan, MultimodalSequence};
use crate::tensor::Tensor;
use crate::text_encoder::{SentenceEmbedding, TextEncoder};
use crate::visual_encoder::{Backbone, BACKBONE_PREFIX};

/// A page reduced to model inputs; region type labels are not carried over.
#[derive(Clone, Debug)]
pub struct DocInput {
    pub image: RasterImage,
    pub boxes: Vec<BoundingBox>,
    pub positions: Vec<NormalizedBox>,
    pub sentences: Vec<SentenceEmbedding>,
}

impl DocInput {
    pub fn prepare(doc: &DocumentRecord, text: &TextEncoder) -> Result<Self> {
        let boxes: Vec<BoundingBox> = doc.regions.iter().map(|r| r.bbox).collect();
        let positions = boxes
            .iter()
            .map(|b| normalize_box(b, doc.width, doc.height))
            .collect::<Result<_>>()?;
        let sentences = doc
            .regions
            .iter()
            .map(|r| text.encode(&r.tokens))
            .collect::<Result<_>>()?;
        Ok(Self {
            image: doc.image.clone(),
            boxes,
            positions,
            sentences,
        })
    }

    pub fn regions(&self) -> usize {
        self.boxes.len()
    }

    /// `[N, d_s]` sentence embeddings.
    pub fn sentence_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.sentences.iter().map(|s| s.0.clone()).collect::<Vec<_>>())
    }
}

pub fn prepare_docs(docs: &[DocumentRecord], text: &TextEncoder) -> Result<Vec<DocInput>> {
    docs.iter().map(|d| DocInput::prepare(d, text)).collect()
}

#[derive(Clone, Debug)]
pub struct UdocModel {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub quantizer: Quantizer,
    pub embeddings: Embeddings,
    pub encoder: Encoder,
    pub text: TextEncoder,
}

impl UdocModel {
    /// Freshly initialized parameters; every draw comes from `seed`.
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seeding::stream(seed, seeding::TAG_INIT, 0));
        let m = &cfg.model;
        let backbone = Backbone::register(&mut init, &mut store, m);
        let quantizer = Quantizer::register(&mut init, &mut store, m);
        let embeddings = Embeddings::register(&mut init, &mut store, m);
        let encoder = Encoder::register(&mut init, &mut store, m);
        let text = TextEncoder::new(cfg.corpus.vocab_size, m.d_text, cfg.train.text_seed);
        Self {
            store,
            backbone,
            quantizer,
            embeddings,
            encoder,
            text,
        }
    }

    /// A model whose parameters come from a checkpoint written by the trainer.
    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        let mut model = Self::new(&ckpt.config, ckpt.config.train.seed);
        load_params(&mut model.store, ckpt, origin)?;
        Ok(model)
    }

    /// Parameters updated when pretraining on `tasks`.
    pub fn trainable(&self, tasks: &TaskSet) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| {
                if name.starts_with(BACKBONE_PREFIX) {
                    !tasks.mvm
                } else if name.starts_with(QUANTIZER_PREFIX) || name.starts_with("head.vcl.") {
                    tasks.vcl
                } else if name.starts_with("head.vla.") {
                    tasks.vla
                } else if name.starts_with("head.mvm.") {
                    tasks.mvm
                } else if name.starts_with("head.msm.") {
                    tasks.msm
                } else {
                    true
                }
            })
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Complement of [`UdocModel::trainable`].
    pub fn frozen(&self, tasks: &TaskSet) -> Vec<ParamId> {
        let t: HashSet<ParamId> = self.trainable(tasks).into_iter().collect();
        self.store.ids().filter(|id| !t.contains(id)).collect()
    }

    /// Unmasked forward pass of one page.
    pub fn encode_doc(&self, g: &mut Graph, doc: &DocInput) -> Result<(MultimodalSequence, EncoderOutput)> {
        let (v, page) = self
            .backbone
            .extract_region_features(g, &self.store, &doc.image, &doc.boxes)?;
        let seq = build_sequence(
            g,
            &self.store,
            &self.embeddings,
            &self.text,
            &doc.positions,
            v,
            page,
            &doc.sentences,
            &MaskPlan::default(),
            &[],
        )?;
        let out = self.encoder.encode(g, &self.store, &seq)?;
        Ok((seq, out))
    }
}

/// Random inputs of one document in a pretraining batch.
#[derive(Clone, Debug)]
pub struct DocSample {
    pub doc: usize,
    pub plan: MaskPlan,
    /// Replacement sentences for the plan's random-category masks, in order.
    pub randoms: Vec<SentenceEmbedding>,
    /// `[N, C·E]` Gumbel draws.
    pub gumbel: Tensor,
}

/// Draws a batch: documents without replacement, mask plans, random
/// replacement sentences from other documents, and Gumbel noise.
pub fn sample_batch(
    docs: &[DocInput],
    batch_size: usize,
    p_sentence: f64,
    p_visual: f64,
    quantizer_width: usize,
    rng: &mut impl Rng,
) -> Vec<DocSample> {
    let k = batch_size.min(docs.len());
    let mut chosen = sample(rng, docs.len(), k).into_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|d| {
            let n = docs[d].regions();
            let plan = sample_mask_plan(n, p_sentence, p_visual, rng);
            let randoms = (0..plan.random_count())
                .map(|_| {
                    let other = if docs.len() == 1 {
                        d
                    } else {
                        let o = rng.gen_range(0..docs.len() - 1);
                        if o >= d {
                            o + 1
                        } else {
                            o
                        }
                    };
                    let src = &docs[other];
                    src.sentences[rng.gen_range(0..src.regions())].clone()
                })
                .collect();
            let gumbel = sample_gumbel(rng, n, quantizer_width);
            DocSample {
                doc: d,
                plan,
                randoms,
                gumbel,
            }
        })
        .collect()
}

/// Result of a batched pretraining forward pass.
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub total: NodeId,
    pub report: LossReport,
    /// Per-codebook perplexity of the batch, when the quantizer ran.
    pub perplexity: Vec<f64>,
    pub masked_sentences: usize,
    pub masked_visual: usize,
}

/// Builds the pretraining loss of a batch into `g`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_forward(
    g: &mut Graph,
    model: &UdocModel,
    docs: &[DocInput],
    batch: &[DocSample],
    loss_cfg: &LossConfig,
    tau: f64,
    relaxation: Relaxation,
) -> Result<PretrainOutput> {
    let tasks = loss_cfg.tasks;
    let store = &model.store;
    let mut msm_pred = Vec::new();
    let mut msm_target = Vec::new();
    let mut mvm_pred = Vec::new();
    let mut mvm_target = Vec::new();
    let mut vcl_sums = Vec::new();
    let mut vcl_count = 0;
    let mut clean_probs = Vec::new();
    let mut vla_terms = Vec::new();
    let (mut masked_sentences, mut masked_visual) = (0, 0);

    for s in batch {
        let doc = &docs[s.doc];
        let (v, page) = model
            .backbone
            .extract_region_features(g, store, &doc.image, &doc.boxes)?;
        let v_value = g.value(v).clone();
        let seq = build_sequence(
            g,
            store,
            &model.embeddings,
            &model.text,
            &doc.positions,
            v,
            page,
            &doc.sentences,
            &s.plan,
            &s.randoms,
        )?;
        let out = model.encoder.encode(g, store, &seq)?;
        let s_idx = s.plan.masked_sentence_regions();
        let v_idx = s.plan.masked_visual_regions();
        masked_sentences += s_idx.len();
        masked_visual += v_idx.len();

        if tasks.msm && !s_idx.is_empty() {
            msm_pred.push(g.gather_rows(out.s_hat, &s_idx));
            let rows: Vec<Vec<f64>> = s_idx.iter().map(|&i| doc.sentences[i].0.clone()).collect();
            msm_target.push(g.constant(Tensor::from_rows(&rows)));
        }
        if tasks.vcl {
            let q = model
                .quantizer
                .quantize(g, store, v, &s.gumbel, tau, relaxation)?;
            clean_probs.push(q.clean_probs);
            if !v_idx.is_empty() {
                let pred = g.gather_rows(out.v_hat, &v_idx);
                vcl_sums.push(losses::vcl_contrastive_sum(g, pred, q.v_q, &v_idx, loss_cfg.kappa)?);
                vcl_count += v_idx.len();
            }
        }
        if tasks.vla {
            let sm = g.constant(doc.sentence_matrix());
            vla_terms.push(losses::vla_loss(g, sm, out.z_vla)?);
        }
        if tasks.mvm && !v_idx.is_empty() {
            mvm_pred.push(g.gather_rows(out.mvm_pred, &v_idx));
            let rows: Vec<Vec<f64>> = v_idx.iter().map(|&i| v_value.row_slice(i).to_vec()).collect();
            mvm_target.push(g.constant(Tensor::from_rows(&rows)));
        }
    }

    let mut parts = TaskLosses::default();
    if tasks.msm {
        parts.msm = Some(regression(g, &msm_pred, &msm_target, loss_cfg.beta)?);
    }
    let mut perplexity = Vec::new();
    if tasks.vcl {
        let sum = sum_nodes(g, &vcl_sums);
        let probs = if clean_probs.len() == 1 {
            clean_probs[0]
        } else {
            g.concat_rows(&clean_probs)
        };
        perplexity = diversity_stats(g.value(probs), model.quantizer.entries)?.perplexity;
        parts.vcl = Some(losses::vcl_loss(g, sum, vcl_count, probs, loss_cfg.lambda));
    }
    if tasks.vla {
        let s = sum_nodes(g, &vla_terms);
        parts.vla = Some(g.scale(s, 1.0 / vla_terms.len().max(1) as f64));
    }
    if tasks.mvm {
        parts.mvm = Some(regression(g, &mvm_pred, &mvm_target, loss_cfg.beta)?);
    }
    let (total, report) = losses::total_loss(g, &parts, &tasks)?;
    Ok(PretrainOutput {
        total,
        report,
        perplexity,
        masked_sentences,
        masked_visual,
    })
}

fn regression(g: &mut Graph, preds: &[NodeId], targets: &[NodeId], beta: f64) -> Result<NodeId> {
    if preds.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let p = g.concat_rows(preds);
    let t = g.concat_rows(targets);
    losses::msm_loss(g, p, t, beta)
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> NodeId {
    match nodes.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &n| g.add(acc, n)),
    }
}
