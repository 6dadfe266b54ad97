//! Pretraining objectives: masked sentence modeling (MSM), visual contrastive
//! learning (VCL), vision-language alignment (VLA) and masked RoI-feature
//! regression (MVM).

use crate::autograd::{Graph, NodeId};
use crate::config::{LossConfig, TaskSet};
use crate::error::{Error, Result};
use crate::quantizer::diversity_penalty;
use crate::tensor::Tensor;

/// Norm guard in cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;
const GRAM_EPS: f64 = 1e-12;

/// Per-task loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub msm: f64,
    pub vcl: f64,
    pub vla: f64,
    pub mvm: Option<f64>,
    pub total: f64,
}

/// Graph nodes of the individual task losses; `None` for tasks not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskLosses {
    pub msm: Option<NodeId>,
    pub vcl: Option<NodeId>,
    pub vla: Option<NodeId>,
    pub mvm: Option<NodeId>,
}

/// Smooth-L1 over masked sentences, averaged over items and dimensions.
pub fn msm_loss(g: &mut Graph, predicted: NodeId, targets: NodeId, beta: f64) -> Result<NodeId> {
    check_aligned(g, predicted, targets, "MSM")?;
    Ok(g.smooth_l1(predicted, targets, beta))
}

/// Smooth-L1 regression of masked RoI features.
pub fn mvm_loss(g: &mut Graph, predicted: NodeId, targets: NodeId, beta: f64) -> Result<NodeId> {
    check_aligned(g, predicted, targets, "MVM")?;
    Ok(g.smooth_l1(predicted, targets, beta))
}

fn check_aligned(g: &Graph, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::InvalidInput(format!(
            "{what}: predictions {sa:?} and targets {sb:?} are misaligned"
        )));
    }
    Ok(())
}

/// Summed InfoNCE of predictions `[M, d_q]` against a candidate set `[N, d_q]`,
/// where row `positives[i]` of the candidates is the positive of prediction `i`.
pub fn vcl_contrastive_sum(
    g: &mut Graph,
    predicted: NodeId,
    candidates: NodeId,
    positives: &[usize],
    kappa: f64,
) -> Result<NodeId> {
    let n = g.value(candidates).rows();
    if g.value(predicted).rows() != positives.len() {
        return Err(Error::InvalidInput("VCL: one positive per prediction required".into()));
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidInput(format!("VCL: positive {p} outside {n} candidates")));
    }
    let a = g.row_normalize(predicted, COSINE_EPS);
    let b = g.row_normalize(candidates, COSINE_EPS);
    let sims = g.matmul_t(a, b);
    let logits = g.scale(sims, 1.0 / kappa);
    Ok(g.cross_entropy_sum(logits, positives))
}

/// The diversity-regularized contrastive loss: `contrastive_sum / count +
/// λ · penalty(clean_probs)`.
pub fn vcl_loss(
    g: &mut Graph,
    contrastive_sum: NodeId,
    count: usize,
    clean_probs: NodeId,
    lambda: f64,
) -> NodeId {
    let first = if count == 0 {
        g.scale(contrastive_sum, 0.0)
    } else {
        g.scale(contrastive_sum, 1.0 / count as f64)
    };
    let penalty = diversity_penalty(g, clean_probs);
    let weighted = g.scale(penalty, lambda);
    g.add(first, weighted)
}

/// `(1/N²)·‖G_s − G_v‖²_F` between row-normalized cosine Gram matrices.
pub fn vla_loss(g: &mut Graph, sentences: NodeId, projected: NodeId) -> Result<NodeId> {
    let n = g.value(sentences).rows();
    if n == 0 {
        return Err(Error::InvalidInput("VLA: no regions".into()));
    }
    if g.value(projected).rows() != n {
        return Err(Error::InvalidInput("VLA: row counts differ".into()));
    }
    let gs = normalized_gram(g, sentences);
    let gv = normalized_gram(g, projected);
    let diff = g.sub(gs, gv);
    let sq = g.sum_squares(diff);
    Ok(g.scale(sq, 1.0 / (n * n) as f64))
}

fn normalized_gram(g: &mut Graph, x: NodeId) -> NodeId {
    let unit = g.row_normalize(x, GRAM_EPS);
    let gram = g.matmul_t(unit, unit);
    g.row_normalize(gram, GRAM_EPS)
}

/// Unweighted sum of the enabled task losses.
pub fn total_loss(g: &mut Graph, parts: &TaskLosses, tasks: &TaskSet) -> Result<(NodeId, LossReport)> {
    if tasks.is_empty() {
        return Err(Error::Config("no pretraining task enabled".into()));
    }
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    let entries = [
        (tasks.msm, parts.msm, "msm"),
        (tasks.vcl, parts.vcl, "vcl"),
        (tasks.vla, parts.vla, "vla"),
        (tasks.mvm, parts.mvm, "mvm"),
    ];
    for (enabled, node, name) in entries {
        if !enabled {
            continue;
        }
        let node = node.ok_or_else(|| Error::InvalidInput(format!("enabled task {name} has no loss")))?;
        let v = g.value(node).item();
        match name {
            "msm" => report.msm = v,
            "vcl" => report.vcl = v,
            "vla" => report.vla = v,
            _ => report.mvm = Some(v),
        }
        terms.push(node);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    report.total = g.value(total).item();
    Ok((total, report))
}

/// Value-level smooth-L1 mean of two equally long slices.
pub fn smooth_l1_mean(pred: &[f64], target: &[f64], beta: f64) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| crate::autograd::smooth_l1(p - t, beta))
        .sum();
    total / pred.len() as f64
}

/// Value-level InfoNCE term for one prediction given its candidate cosine
/// similarities.
pub fn info_nce(sims: &[f64], positive: usize, kappa: f64) -> f64 {
    let logits: Vec<f64> = sims.iter().map(|s| s / kappa).collect();
    crate::autograd::log_sum_exp(&logits) - logits[positive]
}

/// Value-level VLA between `[N, d]` matrices.
pub fn vla_value(sentences: &Tensor, projected: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(sentences.clone());
    let z = g.constant(projected.clone());
    let l = vla_loss(&mut g, s, z)?;
    Ok(g.value(l).item())
}

/// Check that a loss configuration is usable.
pub fn validate(cfg: &LossConfig) -> Result<()> {
    if !(cfg.kappa > 0.0) {
        return Err(Error::Config(format!("kappa must be positive, got {}", cfg.kappa)));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", cfg.lambda)));
    }
    if cfg.tasks.is_empty() {
        return Err(Error::Config("no pretraining task enabled".into()));
    }
    Ok(())
}
