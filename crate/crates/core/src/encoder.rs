//! Gated cross-attention transformer.
//!
//! Each block updates the visual stream by attending from it to the textual
//! stream and vice versa, with post-norm residuals:
//!
//! ```text
//! A  = LN(H_m + CrossAtt(H_m | H_n))
//! H⁺ = LN(A + FF(A))
//! ```
//!
//! A per-slot gate over `[H_V⁺; H_S⁺]` then rescales both streams by
//! `(1 + α)`.

use crate::autograd::{Graph, NodeId};
use crate::config::{AttnScale, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Initializer, LayerNormParams, Linear, ParamStore};
use crate::sequence::{MultimodalSequence, SlotKind};
use crate::tensor::Tensor;

/// One attention direction: queries from modality `m`, keys and values from `n`.
#[derive(Clone, Debug)]
pub struct Direction {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln_attn: LayerNormParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln_ff: LayerNormParams,
}

impl Direction {
    fn register(init: &mut Initializer, store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            query: init.add_linear(store, &format!("{prefix}.query"), d, d),
            key: init.add_linear(store, &format!("{prefix}.key"), d, d),
            value: init.add_linear(store, &format!("{prefix}.value"), d, d),
            output: init.add_linear(store, &format!("{prefix}.output"), d, d),
            ln_attn: init.add_layer_norm(store, &format!("{prefix}.ln_attn"), d),
            ff_in: init.add_linear(store, &format!("{prefix}.ff_in"), d, 4 * d),
            ff_out: init.add_linear(store, &format!("{prefix}.ff_out"), 4 * d, d),
            ln_ff: init.add_layer_norm(store, &format!("{prefix}.ln_ff"), d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub hidden: Linear,
    pub visual: Linear,
    pub textual: Linear,
}

#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub visual: Direction,
    pub textual: Direction,
    pub gate: Gate,
}

impl CrossAttentionBlock {
    pub fn register(init: &mut Initializer, store: &mut ParamStore, index: usize, d: usize) -> Self {
        let p = format!("block{index}");
        Self {
            visual: Direction::register(init, store, &format!("{p}.visual"), d),
            textual: Direction::register(init, store, &format!("{p}.textual"), d),
            gate: Gate {
                hidden: init.add_linear(store, &format!("{p}.gate.hidden"), 2 * d, 2 * d),
                visual: init.add_linear(store, &format!("{p}.gate.visual"), 2 * d, d),
                textual: init.add_linear(store, &format!("{p}.gate.textual"), 2 * d, d),
            },
        }
    }
}

/// Prediction heads on top of the final layer.
#[derive(Clone, Debug)]
pub struct Heads {
    pub msm: Linear,
    pub vcl: Linear,
    pub vla: Linear,
    pub mvm: Linear,
}

/// Test hook replacing the gate's pre-sigmoid outputs with a constant.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum GateOverride {
    #[default]
    None,
    Logits(f64),
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    /// `[N_m, d]` output after `U`.
    pub output: NodeId,
    /// Per head, `[N_m, N_n]` attention weights.
    pub weights: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub visual: NodeId,
    pub textual: NodeId,
    pub alpha_visual: NodeId,
    pub alpha_textual: NodeId,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[N+2, d]` final streams.
    pub h_visual: NodeId,
    pub h_textual: NodeId,
    /// REGION-slot predictions: `[N, d_q]`, `[N, d_s]`, `[N, d_s]`, `[N, d_v]`.
    pub v_hat: NodeId,
    pub s_hat: NodeId,
    pub z_vla: NodeId,
    pub mvm_pred: NodeId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<CrossAttentionBlock>,
    pub heads: Heads,
    pub d_model: usize,
    pub num_heads: usize,
    pub attn_scale: AttnScale,
}

impl Encoder {
    pub fn register(init: &mut Initializer, store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|i| CrossAttentionBlock::register(init, store, i, d))
            .collect();
        let heads = Heads {
            msm: init.add_linear(store, "head.msm", d, cfg.d_text),
            vcl: init.add_linear(store, "head.vcl", d, cfg.d_quant),
            vla: init.add_linear(store, "head.vla", d, cfg.d_text),
            mvm: init.add_linear(store, "head.mvm", d, cfg.d_visual()),
        };
        Self {
            blocks,
            heads,
            d_model: d,
            num_heads: cfg.heads,
            attn_scale: cfg.attn_scale,
        }
    }

    fn scale(&self) -> f64 {
        let denom = match self.attn_scale {
            AttnScale::Model => self.d_model,
            AttnScale::Head => self.d_model / self.num_heads,
        };
        1.0 / (denom as f64).sqrt()
    }

    /// Multi-head attention from `h_m` onto `h_n`.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dir: &Direction,
        h_m: NodeId,
        h_n: NodeId,
    ) -> Result<CrossAttention> {
        let (dm, dn) = (g.value(h_m).cols(), g.value(h_n).cols());
        if dm != self.d_model || dn != self.d_model {
            return Err(Error::InvalidInput(format!(
                "stream widths {dm}/{dn}, expected {}",
                self.d_model
            )));
        }
        let q = dir.query.forward(g, store, h_m);
        let k = dir.key.forward(g, store, h_n);
        let v = dir.value.forward(g, store, h_n);
        let dh = self.d_model / self.num_heads;
        let scale = self.scale();
        let mut outs = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for i in 0..self.num_heads {
            let qi = g.slice_cols(q, i * dh, dh);
            let ki = g.slice_cols(k, i * dh, dh);
            let vi = g.slice_cols(v, i * dh, dh);
            let scores = g.matmul_t(qi, ki);
            let scores = g.scale(scores, scale);
            let w = g.softmax(scores);
            outs.push(g.matmul(w, vi));
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let output = dir.output.forward(g, store, cat);
        Ok(CrossAttention { output, weights })
    }

    pub fn direction_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dir: &Direction,
        h_m: NodeId,
        h_n: NodeId,
    ) -> Result<NodeId> {
        let att = self.cross_attention(g, store, dir, h_m, h_n)?.output;
        let res = g.add(h_m, att);
        let a = dir.ln_attn.forward(g, store, res);
        let hidden = dir.ff_in.forward(g, store, a);
        let hidden = g.gelu(hidden);
        let ff = dir.ff_out.forward(g, store, hidden);
        let res = g.add(a, ff);
        Ok(dir.ln_ff.forward(g, store, res))
    }

    pub fn block_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &CrossAttentionBlock,
        h_visual: NodeId,
        h_textual: NodeId,
        gate_override: GateOverride,
    ) -> Result<BlockOutput> {
        let (nv, nt) = (g.value(h_visual).rows(), g.value(h_textual).rows());
        if nv != nt {
            return Err(Error::InvalidInput(format!(
                "stream lengths differ: {nv} visual, {nt} textual"
            )));
        }
        let v_plus = self.direction_forward(g, store, &block.visual, h_visual, h_textual)?;
        let t_plus = self.direction_forward(g, store, &block.textual, h_textual, h_visual)?;

        let (alpha_visual, alpha_textual) = match gate_override {
            GateOverride::None => {
                let both = g.concat_cols(&[v_plus, t_plus]);
                let hidden = block.gate.hidden.forward(g, store, both);
                let hidden = g.tanh(hidden);
                let lv = block.gate.visual.forward(g, store, hidden);
                let lt = block.gate.textual.forward(g, store, hidden);
                (g.sigmoid(lv), g.sigmoid(lt))
            }
            GateOverride::Logits(c) => {
                let a = crate::autograd::sigmoid(c);
                let alpha = Tensor::filled(vec![nv, self.d_model], a);
                (g.constant(alpha.clone()), g.constant(alpha))
            }
        };
        let gv = g.add_scalar(alpha_visual, 1.0);
        let gt = g.add_scalar(alpha_textual, 1.0);
        Ok(BlockOutput {
            visual: g.mul(v_plus, gv),
            textual: g.mul(t_plus, gt),
            alpha_visual,
            alpha_textual,
        })
    }

    /// Runs all blocks over `(visual, textual)` inputs.
    pub fn forward_streams(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        visual: NodeId,
        textual: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (mut hv, mut ht) = (visual, textual);
        for block in &self.blocks {
            let out = self.block_forward(g, store, block, hv, ht, GateOverride::None)?;
            hv = out.visual;
            ht = out.textual;
        }
        Ok((hv, ht))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seq: &MultimodalSequence) -> Result<EncoderOutput> {
        let (h_visual, h_textual) =
            self.forward_streams(g, store, seq.visual_input, seq.textual_input)?;
        let regions = region_slots(&seq.kinds);
        let hv = g.gather_rows(h_visual, &regions);
        let ht = g.gather_rows(h_textual, &regions);
        Ok(EncoderOutput {
            h_visual,
            h_textual,
            v_hat: self.heads.vcl.forward(g, store, hv),
            s_hat: self.heads.msm.forward(g, store, ht),
            z_vla: self.heads.vla.forward(g, store, hv),
            mvm_pred: self.heads.mvm.forward(g, store, hv),
        })
    }
}

/// Indices of REGION slots.
pub fn region_slots(kinds: &[SlotKind]) -> Vec<usize> {
    kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == SlotKind::Region)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::seeding;
    use rand::Rng;

    fn encoder(cfg: &ModelConfig) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seeding::stream(5, seeding::TAG_INIT, 0));
        let e = Encoder::register(&mut init, &mut store, cfg);
        (e, store)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seeding::stream(seed, 99, 0);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let cfg = RunConfig::tiny().model;
        let (e, store) = encoder(&cfg);
        let mut g = Graph::new();
        let hm = g.constant(random(4, 8, 1));
        let row = random(1, 8, 2);
        let hn = g.constant(Tensor::from_rows(&vec![row.data().to_vec(); 5]));
        let att = e.cross_attention(&mut g, &store, &e.blocks[0].visual, hm, hn).unwrap();
        for w in &att.weights {
            assert!(g.value(*w).data().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        }
        let out = g.value(att.output);
        for r in 1..4 {
            for c in 0..8 {
                assert!((out.at(r, c) - out.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_gets_weight_one() {
        let cfg = RunConfig::tiny().model;
        let (e, store) = encoder(&cfg);
        let dir = &e.blocks[0].textual;
        let mut g = Graph::new();
        let hm = g.constant(random(3, 8, 3));
        let hn = g.constant(random(1, 8, 4));
        let att = e.cross_attention(&mut g, &store, dir, hm, hn).unwrap();
        for w in &att.weights {
            assert!(g.value(*w).data().iter().all(|&x| x == 1.0));
        }
        let v = dir.value.forward(&mut g, &store, hn);
        let expected = dir.output.forward(&mut g, &store, v);
        for r in 0..3 {
            assert!(g
                .value(att.output)
                .row_slice(r)
                .iter()
                .zip(g.value(expected).data())
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn permuting_keys_leaves_outputs_unchanged() {
        let cfg = RunConfig::tiny().model;
        let (e, store) = encoder(&cfg);
        let hn_t = random(5, 8, 6);
        let perm = [3, 0, 4, 2, 1];
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| hn_t.row_slice(i).to_vec()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let hm = g.constant(random(5, 8, 5));
        let a = g.constant(hn_t);
        let b = g.constant(permuted);
        let oa = e.cross_attention(&mut g, &store, &e.blocks[0].visual, hm, a).unwrap();
        let ob = e.cross_attention(&mut g, &store, &e.blocks[0].visual, hm, b).unwrap();
        assert!(g.value(oa.output).max_abs_diff(g.value(ob.output)) < 1e-12);
        for w in &oa.weights {
            let wv = g.value(*w);
            for r in 0..wv.rows() {
                assert!((wv.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert!(wv.data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn gate_overrides() {
        let cfg = RunConfig::tiny().model;
        let (e, store) = encoder(&cfg);
        let block = &e.blocks[0];
        let mut g = Graph::new();
        let hv = g.constant(random(4, 8, 7));
        let ht = g.constant(random(4, 8, 8));
        let off = e
            .block_forward(&mut g, &store, block, hv, ht, GateOverride::Logits(f64::NEG_INFINITY))
            .unwrap();
        let half = e.block_forward(&mut g, &store, block, hv, ht, GateOverride::Logits(0.0)).unwrap();
        let open = e.block_forward(&mut g, &store, block, hv, ht, GateOverride::None).unwrap();
        let v_plus = e.direction_forward(&mut g, &store, &block.visual, hv, ht).unwrap();
        let t_plus = e.direction_forward(&mut g, &store, &block.textual, ht, hv).unwrap();
        assert_eq!(g.value(off.visual), g.value(v_plus));
        assert_eq!(g.value(off.textual), g.value(t_plus));
        let scaled = g.value(v_plus).map(|x| 1.5 * x);
        assert!(g.value(half.visual).max_abs_diff(&scaled) < 1e-15);
        for a in [open.alpha_visual, open.alpha_textual] {
            assert!(g.value(a).data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let cfg = RunConfig::tiny().model;
        let (e, store) = encoder(&cfg);
        let mut g = Graph::new();
        let hv = g.constant(random(4, 8, 1));
        let ht = g.constant(random(3, 8, 2));
        assert!(e
            .block_forward(&mut g, &store, &e.blocks[0], hv, ht, GateOverride::None)
            .is_err());
    }

    #[test]
    fn head_scale_switch() {
        let mut cfg = RunConfig::tiny().model;
        let (e, _) = encoder(&cfg);
        assert!((e.scale() - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        cfg.attn_scale = AttnScale::Head;
        let (e, _) = encoder(&cfg);
        assert!((e.scale() - 0.5).abs() < 1e-15);
    }
}
