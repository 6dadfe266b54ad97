//! Gumbel-softmax product quantization of RoI features.
//!
//! A RoI feature is mapped to `C×E` logits. For each codebook `c`,
//! `p_{c,e} = softmax_e((logit_{c,e} + g_e) / τ)` with `g` i.i.d. Gumbel(0, 1);
//! the forward pass takes the argmax entry of each codebook, concatenates the
//! `C` chosen entry vectors and applies a linear output map. Gradients flow
//! through the relaxed probabilities (straight-through estimator).

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autograd::{softmax_groups, xlogx, Graph, NodeId};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::params::{Initializer, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const QUANTIZER_PREFIX: &str = "quant.";

/// How the forward pass turns probabilities into entry weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// One-hot argmax forward, soft backward.
    StraightThrough,
    /// Soft probabilities in both passes; the differentiable surrogate whose
    /// gradient the straight-through estimator uses.
    Soft,
}

#[derive(Clone, Debug)]
pub struct Quantizer {
    pub logits: Linear,
    /// `[C·E, d_e]`, row `c·E + e` is entry `e` of codebook `c`.
    pub codebooks: ParamId,
    pub out: Linear,
    pub groups: usize,
    pub entries: usize,
    pub entry_dim: usize,
}

/// Graph nodes produced by [`Quantizer::quantize`].
#[derive(Clone, Debug)]
pub struct QuantizeOutput {
    /// `[R, d_q]` quantized representations.
    pub v_q: NodeId,
    /// `[R, C·E]` noisy tempered probabilities.
    pub probs: NodeId,
    /// `[R, C·E]` noise-free tempered probabilities, for the diversity term.
    pub clean_probs: NodeId,
    /// Chosen entry per codebook for every row.
    pub selections: Vec<Vec<usize>>,
}

/// Value-level result of quantizing one feature.
#[derive(Clone, Debug)]
pub struct QuantizedFeature {
    pub v_q: Vec<f64>,
    pub selections: Vec<usize>,
    /// `C` rows of `E` probabilities.
    pub probs: Vec<Vec<f64>>,
}

impl Quantizer {
    pub fn register(init: &mut Initializer, store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let (c, e, de) = (cfg.codebooks, cfg.entries, cfg.entry_dim);
        let logits = init.add_linear(store, "quant.logits", cfg.d_visual(), c * e);
        let codebooks = store.insert("quant.codebooks", init.uniform(vec![c * e, de], 1.0));
        let out = init.add_linear(store, "quant.out", c * de, cfg.d_quant);
        Self {
            logits,
            codebooks,
            out,
            groups: c,
            entries: e,
            entry_dim: de,
        }
    }

    pub fn width(&self) -> usize {
        self.groups * self.entries
    }

    /// Quantizes every row of `v` (`[R, d_v]`) with Gumbel draws `noise`
    /// (`[R, C·E]`) at temperature `tau`.
    pub fn quantize(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v: NodeId,
        noise: &Tensor,
        tau: f64,
        relaxation: Relaxation,
    ) -> Result<QuantizeOutput> {
        let logits = self.logits.forward(g, store, v);
        if !g.value(logits).is_finite() {
            return Err(Error::NonFinite("quantizer logits".into()));
        }
        let rows = g.value(logits).rows();
        assert_eq!(noise.shape(), &[rows, self.width()], "gumbel noise shape");
        let noise_n = g.constant(noise.clone());
        let perturbed = g.add(logits, noise_n);
        let tempered = g.scale(perturbed, 1.0 / tau);
        let probs = g.softmax_groups(tempered, self.entries);
        let clean_logits = g.scale(logits, 1.0 / tau);
        let clean_probs = g.softmax_groups(clean_logits, self.entries);

        // Argmax of the perturbed logits equals argmax of the probabilities.
        let pv = g.value(tempered);
        let mut hard = Tensor::zeros(vec![rows, self.width()]);
        let mut selections = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = pv.row_slice(r);
            let sel: Vec<usize> = row
                .chunks(self.entries)
                .map(|chunk| argmax(chunk))
                .collect();
            for (c, &e) in sel.iter().enumerate() {
                hard.data_mut()[r * self.width() + c * self.entries + e] = 1.0;
            }
            selections.push(sel);
        }
        let weights = match relaxation {
            Relaxation::StraightThrough => g.straight_through(probs, hard),
            Relaxation::Soft => probs,
        };

        let book = g.param(store, self.codebooks);
        let mut chosen = Vec::with_capacity(self.groups);
        for c in 0..self.groups {
            let w = g.slice_cols(weights, c * self.entries, self.entries);
            let entries = g.slice_rows(book, c * self.entries, self.entries);
            chosen.push(g.matmul(w, entries));
        }
        let concat = if chosen.len() == 1 {
            chosen[0]
        } else {
            g.concat_cols(&chosen)
        };
        let v_q = self.out.forward(g, store, concat);
        Ok(QuantizeOutput {
            v_q,
            probs,
            clean_probs,
            selections,
        })
    }

    /// Quantizes a single feature vector, drawing fresh Gumbel noise from `rng`.
    pub fn quantize_value(
        &self,
        store: &ParamStore,
        v: &[f64],
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<QuantizedFeature> {
        let noise = sample_gumbel(rng, 1, self.width());
        let mut g = Graph::new();
        let vn = g.constant(Tensor::row(v.to_vec()));
        let out = self.quantize(&mut g, store, vn, &noise, tau, Relaxation::StraightThrough)?;
        Ok(QuantizedFeature {
            v_q: g.value(out.v_q).data().to_vec(),
            selections: out.selections[0].clone(),
            probs: g
                .value(out.probs)
                .data()
                .chunks(self.entries)
                .map(<[f64]>::to_vec)
                .collect(),
        })
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `[rows, cols]` i.i.d. Gumbel(0, 1) draws.
pub fn sample_gumbel(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Softmax over groups of `entries` columns, as a plain function.
pub fn grouped_softmax(logits: &Tensor, entries: usize) -> Tensor {
    softmax_groups(logits, entries)
}

/// Temperature `τ(step) = max(τ_min, τ_0 · γ^step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub min: f64,
    pub decay: f64,
}

impl TemperatureSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            start: cfg.tau_start,
            min: cfg.tau_min,
            decay: cfg.tau_decay,
        }
    }

    pub fn tau_at(&self, step: u64) -> f64 {
        (self.start * self.decay.powf(step as f64)).max(self.min)
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 2.0,
            min: 0.5,
            decay: 0.999995,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerState {
    pub tau: f64,
    pub step: u64,
}

impl QuantizerState {
    pub fn new(schedule: &TemperatureSchedule) -> Self {
        Self {
            tau: schedule.tau_at(0),
            step: 0,
        }
    }

    pub fn at(schedule: &TemperatureSchedule, step: u64) -> Self {
        Self {
            tau: schedule.tau_at(step),
            step,
        }
    }
}

/// Advances the temperature by one iteration.
pub fn anneal(state: QuantizerState, schedule: &TemperatureSchedule) -> QuantizerState {
    QuantizerState::at(schedule, state.step + 1)
}

/// Codebook-usage statistics of a batch of noise-free probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityStats {
    /// `(1/(C·E)) Σ_c Σ_e p̄ log p̄`, in `[-log(E)/E, 0]`.
    pub penalty: f64,
    /// `exp(entropy)` of the batch-averaged distribution of each codebook.
    pub perplexity: Vec<f64>,
}

/// Statistics of `[R, C·E]` probabilities averaged over the `R` rows.
pub fn diversity_stats(probs: &Tensor, entries: usize) -> Result<DiversityStats> {
    if probs.rows() == 0 {
        return Err(Error::InvalidInput("diversity statistics of an empty batch".into()));
    }
    let (r, w) = (probs.rows(), probs.cols());
    let mut mean = vec![0.0; w];
    for row in probs.data().chunks(w) {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= r as f64;
    }
    let total: f64 = mean.iter().map(|&p| xlogx(p)).sum();
    let perplexity = mean
        .chunks(entries)
        .map(|c| (-c.iter().map(|&p| xlogx(p)).sum::<f64>()).exp())
        .collect();
    Ok(DiversityStats {
        penalty: total / w as f64,
        perplexity,
    })
}

/// Differentiable diversity penalty of `[R, C·E]` probabilities.
pub fn diversity_penalty(g: &mut Graph, clean_probs: NodeId) -> NodeId {
    let w = g.value(clean_probs).cols();
    let mean = g.mean_rows(clean_probs);
    let plogp = g.xlogx(mean);
    let s = g.sum(plogp);
    g.scale(s, 1.0 / w as f64)
}
