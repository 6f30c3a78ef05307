//! Dense position-aligned and semantic-aligned losses, simplified box
//! losses, and the total training loss, built on tape nodes so gradients
//! flow to every input.

use serde::{Deserialize, Serialize};

use crate::align::{ComponentLabels, RowRole, TextDistribution};
use crate::decouple::ComponentKind;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Positive-term weights per component.
    pub w_main: f64,
    pub w_attribute: f64,
    pub w_pronoun: f64,
    pub w_relationship: f64,
    /// Negative-term weight on auxiliary-component positions; 1 elsewhere.
    pub w_minus_auxi: f64,
    pub w_minus_default: f64,
    /// Alignment weight in the total loss.
    pub alpha: f64,
    /// Box regression weight in the total loss.
    pub box_weight: f64,
    /// Decoder depth divisor N_D; one prediction head here, so 0 by default.
    pub decoder_layers: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            w_main: 1.0,
            w_attribute: 0.2,
            w_pronoun: 0.2,
            w_relationship: 0.1,
            w_minus_auxi: 2.0,
            w_minus_default: 1.0,
            alpha: 1.0,
            box_weight: 5.0,
            decoder_layers: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        for (name, w) in [
            ("w_main", self.w_main),
            ("w_attribute", self.w_attribute),
            ("w_pronoun", self.w_pronoun),
            ("w_relationship", self.w_relationship),
            ("w_minus_auxi", self.w_minus_auxi),
            ("w_minus_default", self.w_minus_default),
            ("alpha", self.alpha),
            ("box_weight", self.box_weight),
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn w_plus(&self, kind: ComponentKind) -> f64 {
        match kind {
            ComponentKind::MainObject => self.w_main,
            ComponentKind::Attribute => self.w_attribute,
            ComponentKind::Pronoun => self.w_pronoun,
            ComponentKind::Relationship => self.w_relationship,
            // the auxiliary candidate's own positives and the null slot
            ComponentKind::AuxiliaryObject | ComponentKind::None => 1.0,
        }
    }
}

/// Positive text positions per candidate and positive candidates per token,
/// plus the negative weights and padding mask shared by both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveSets {
    /// Text capacity l (the last slot is the null position).
    pub l: usize,
    /// Per candidate: positive positions keyed by component kind.
    pub candidate_positives: Vec<Vec<(ComponentKind, Vec<usize>)>>,
    /// Per text position: candidates for which this position is positive.
    pub token_positives: Vec<Vec<usize>>,
    /// Per text position: positive-term weight on the token side.
    pub token_w_plus: Vec<f64>,
    /// Per text position: negative-term weight.
    pub w_minus: Vec<f64>,
    /// Real token positions plus the null slot; padding is excluded from
    /// contrastive denominators.
    pub valid: Vec<bool>,
}

impl PositiveSets {
    /// Assemble positive sets from the component labels and the candidate
    /// roles. `token_count` is the number of real tokens in the utterance.
    pub fn build(
        labels: &ComponentLabels,
        roles: &[RowRole],
        token_count: usize,
        cfg: &LossConfig,
    ) -> Result<PositiveSets> {
        let l = labels.main.capacity();
        if token_count > l - 1 {
            return Err(Error::Capacity {
                got: token_count,
                limit: l - 1,
            });
        }
        let mut valid = vec![false; l];
        for v in valid.iter_mut().take(token_count) {
            *v = true;
        }
        valid[l - 1] = true;

        let mut candidate_positives = Vec::with_capacity(roles.len());
        let mut token_positives = vec![Vec::new(); l];
        let mut token_w_plus = vec![0.0; l];
        for (c, role) in roles.iter().enumerate() {
            let mut per_kind: Vec<(ComponentKind, Vec<usize>)> = Vec::new();
            match role {
                RowRole::Main => {
                    for kind in [
                        ComponentKind::MainObject,
                        ComponentKind::Attribute,
                        ComponentKind::Pronoun,
                        ComponentKind::Relationship,
                    ] {
                        let idx = labels.get(kind).unwrap().indices();
                        if !idx.is_empty() {
                            per_kind.push((kind, idx));
                        }
                    }
                }
                RowRole::Auxiliary => {
                    let idx = labels.auxiliary.indices();
                    if idx.is_empty() {
                        return Err(Error::Config(
                            "auxiliary candidate without auxiliary tokens".into(),
                        ));
                    }
                    per_kind.push((ComponentKind::AuxiliaryObject, idx));
                }
                RowRole::Other => {
                    per_kind.push((ComponentKind::None, vec![l - 1]));
                }
            }
            for (kind, idx) in &per_kind {
                for p in idx {
                    token_positives[*p].push(c);
                    token_w_plus[*p] = cfg.w_plus(*kind);
                }
            }
            candidate_positives.push(per_kind);
        }

        let mut w_minus = vec![cfg.w_minus_default; l];
        for p in labels.auxiliary.indices() {
            w_minus[p] = cfg.w_minus_auxi;
        }

        Ok(PositiveSets {
            l,
            candidate_positives,
            token_positives,
            token_w_plus,
            w_minus,
            valid,
        })
    }

    pub fn candidates(&self) -> usize {
        self.candidate_positives.len()
    }

    fn positive_count(&self, candidate: usize) -> usize {
        self.candidate_positives[candidate]
            .iter()
            .map(|(_, idx)| idx.len())
            .sum()
    }
}

/// KL divergence between the ground-truth text distribution and the
/// softmaxed predicted logits, summed over candidates.
pub fn position_loss(tape: &Tape, l_pred: NodeId, p_text: &TextDistribution) -> Result<NodeId> {
    let (k, l) = tape.shape(l_pred);
    if (k, l) != p_text.rows.shape() {
        return Err(Error::Shape(format!(
            "position_loss: logits {}x{} vs P_text {}x{}",
            k, l, p_text.rows.rows, p_text.rows.cols
        )));
    }
    p_text.validate()?;
    // cross-entropy via the log-sum-exp identity: every P_text row sums to
    // one, so sum(-P log softmax(x)) = sum_i LSE_i - sum(P * x). The
    // constant per-row max shift keeps exp from overflowing and never takes
    // log of a rounded-to-zero softmax entry.
    let x = tape.value(l_pred);
    let row_max: Vec<f64> = (0..k)
        .map(|i| x.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = Matrix::from_fn(k, l, |i, _| -row_max[i]);
    let shifted = tape.add_const(l_pred, &shift)?;
    let lse_rows = tape.log(tape.row_sum(tape.exp(shifted)))?;
    let lse = tape.add_scalar(tape.sum(lse_rows), row_max.iter().sum());
    let dot = tape.sum(tape.mul_const(l_pred, &p_text.rows)?);
    let cross = tape.sub(lse, dot)?;
    // constant entropy term sum p log p, with 0 log 0 = 0
    let entropy: f64 = p_text
        .rows
        .data
        .iter()
        .map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    Ok(tape.add_scalar(cross, entropy))
}

/// Shared shape checks for the two contrastive directions.
fn check_semantic_shapes(tape: &Tape, o: NodeId, t: NodeId, pos: &PositiveSets) -> Result<()> {
    let (k, d_o) = tape.shape(o);
    let (l, d_t) = tape.shape(t);
    if d_o != d_t {
        return Err(Error::Shape(format!(
            "feature dims disagree: o is {k}x{d_o}, t is {l}x{d_t}"
        )));
    }
    if l != pos.l {
        return Err(Error::Shape(format!(
            "text features have {l} rows, positive sets expect {}",
            pos.l
        )));
    }
    if k != pos.candidates() {
        return Err(Error::Shape(format!(
            "object features have {k} rows, positive sets expect {}",
            pos.candidates()
        )));
    }
    Ok(())
}

/// Object-side contrastive loss: each candidate against all valid text
/// positions, positives weighted by w_plus and negatives by w_minus inside
/// the exponent.
pub fn semantic_object_loss(
    tape: &Tape,
    o: NodeId,
    t: NodeId,
    pos: &PositiveSets,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    check_semantic_shapes(tape, o, t, pos)?;
    let k = pos.candidates();
    let l = pos.l;
    for c in 0..k {
        if pos.positive_count(c) == 0 {
            return Err(Error::Config(format!("candidate {c} has no positives")));
        }
    }

    let sim = tape.scale(tape.matmul_nt(o, t)?, 1.0 / cfg.tau);

    // denominator: log sum over valid positions of exp(w_minus * sim),
    // stabilized by a constant per-row shift
    let w_minus_row = Matrix::from_fn(k, l, |_, j| pos.w_minus[j]);
    let weighted = tape.mul_const(sim, &w_minus_row)?;
    let weighted_val = tape.value(weighted);
    let row_max: Vec<f64> = (0..k)
        .map(|i| {
            (0..l)
                .filter(|j| pos.valid[*j])
                .map(|j| weighted_val.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift = Matrix::from_fn(k, l, |i, _| -row_max[i]);
    let mask = Matrix::from_fn(k, l, |_, j| if pos.valid[j] { 1.0 } else { 0.0 });
    let shifted = tape.add_const(weighted, &shift)?;
    let masked = tape.mul_const(tape.exp(shifted), &mask)?;
    let log_den = tape.log(tape.row_sum(masked))?;
    let lse = tape.add_scalar(tape.sum(log_den), row_max.iter().sum());

    // numerator: average of w_plus * sim over each candidate's positives
    let mut w_num = Matrix::zeros(k, l);
    for (c, per_kind) in pos.candidate_positives.iter().enumerate() {
        let count = pos.positive_count(c) as f64;
        for (kind, idx) in per_kind {
            for p in idx {
                w_num.data[c * l + p] += cfg.w_plus(*kind) / count;
            }
        }
    }
    let num = tape.sum(tape.mul_const(sim, &w_num)?);

    tape.sub(lse, num)
}

/// Text-side contrastive loss: each token with a non-empty positive set
/// against all k candidates, scaled by the token's component weight.
pub fn semantic_text_loss(
    tape: &Tape,
    t: NodeId,
    o: NodeId,
    pos: &PositiveSets,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    check_semantic_shapes(tape, o, t, pos)?;
    let k = pos.candidates();
    let l = pos.l;

    let sim = tape.scale(tape.matmul_nt(t, o)?, 1.0 / cfg.tau); // l x k
    let sim_val = tape.value(sim);

    // tokens without positives are skipped entirely
    let active: Vec<usize> = (0..l)
        .filter(|i| !pos.token_positives[*i].is_empty())
        .collect();
    if active.is_empty() {
        return Ok(tape.leaf(Matrix::scalar(0.0)));
    }

    let row_max: Vec<f64> = (0..l)
        .map(|i| {
            (0..k)
                .map(|j| sim_val.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift = Matrix::from_fn(l, k, |i, _| -row_max[i]);
    let shifted = tape.add_const(sim, &shift)?;
    let e = tape.exp(shifted);
    let log_den = tape.log(tape.row_sum(e))?; // l x 1

    let weight_col = Matrix::from_fn(l, 1, |i, _| {
        if pos.token_positives[i].is_empty() {
            0.0
        } else {
            pos.token_w_plus[i]
        }
    });
    let lse_weighted = tape.sum(tape.mul_const(log_den, &weight_col)?);
    let shift_term: f64 = active.iter().map(|i| weight_col.get(*i, 0) * row_max[*i]).sum();
    let lse = tape.add_scalar(lse_weighted, shift_term);

    let mut w_num = Matrix::zeros(l, k);
    for i in &active {
        let positives = &pos.token_positives[*i];
        let w = pos.token_w_plus[*i] / positives.len() as f64;
        for c in positives {
            w_num.data[i * k + c] += w;
        }
    }
    let num = tape.sum(tape.mul_const(sim, &w_num)?);

    tape.sub(lse, num)
}

/// Mean of the two contrastive directions.
pub fn semantic_loss(
    tape: &Tape,
    o: NodeId,
    t: NodeId,
    pos: &PositiveSets,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let lo = semantic_object_loss(tape, o, t, pos, cfg)?;
    let lt = semantic_text_loss(tape, t, o, pos, cfg)?;
    Ok(tape.scale(tape.add(lo, lt)?, 0.5))
}

/// Mean absolute error between predicted and matched boxes (center + size).
pub fn box_l1_loss(tape: &Tape, pred: NodeId, gt: &Matrix) -> Result<NodeId> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::Shape("box_l1_loss shape mismatch".into()));
    }
    let diff = tape.add_const(pred, &gt.map(|v| -v))?;
    Ok(tape.mean(tape.abs(diff)))
}

/// 1 - mean 3D IoU for axis-aligned boxes given as center xyz + size whd.
pub fn iou3d_loss(tape: &Tape, pred: NodeId, gt: &Matrix) -> Result<NodeId> {
    let (k, cols) = tape.shape(pred);
    if cols != 6 || gt.shape() != (k, 6) {
        return Err(Error::Shape("iou3d_loss expects k x 6 boxes".into()));
    }
    // selector matrices mapping (center, size) to box corners
    let lo_sel = Matrix::from_fn(6, 3, |r, c| {
        if r == c {
            1.0
        } else if r == c + 3 {
            -0.5
        } else {
            0.0
        }
    });
    let hi_sel = Matrix::from_fn(6, 3, |r, c| {
        if r == c {
            1.0
        } else if r == c + 3 {
            0.5
        } else {
            0.0
        }
    });
    let size_sel = Matrix::from_fn(6, 3, |r, c| if r == c + 3 { 1.0 } else { 0.0 });

    let lo = tape.matmul(pred, tape.constant(lo_sel.clone()))?;
    let hi = tape.matmul(pred, tape.constant(hi_sel.clone()))?;
    let gt_lo = tape.constant(gt.matmul(&lo_sel)?);
    let gt_hi = tape.constant(gt.matmul(&hi_sel)?);

    let inner_lo = tape.max(lo, gt_lo)?;
    let inner_hi = tape.min(hi, gt_hi)?;
    let extent = tape.relu(tape.sub(inner_hi, inner_lo)?);

    let col = |m: NodeId, j: usize| -> Result<NodeId> {
        let sel = Matrix::from_fn(3, 1, |r, _| if r == j { 1.0 } else { 0.0 });
        tape.matmul(m, tape.constant(sel))
    };
    let inter = tape.mul(tape.mul(col(extent, 0)?, col(extent, 1)?)?, col(extent, 2)?)?;

    let sizes = tape.matmul(pred, tape.constant(size_sel.clone()))?;
    let vol = tape.mul(tape.mul(col(sizes, 0)?, col(sizes, 1)?)?, col(sizes, 2)?)?;
    let gt_sizes = gt.matmul(&size_sel)?;
    let gt_vol = Matrix::from_fn(k, 1, |r, _| {
        gt_sizes.get(r, 0) * gt_sizes.get(r, 1) * gt_sizes.get(r, 2)
    });
    let union = tape.sub(tape.add_const(vol, &gt_vol)?, inter)?;
    let iou = tape.div(inter, union)?;
    Ok(tape.add_scalar(tape.scale(tape.mean(iou), -1.0), 1.0))
}

/// The individual terms of the total loss; absent terms count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub position: Option<NodeId>,
    pub semantic: Option<NodeId>,
    pub box_l1: Option<NodeId>,
    pub iou: Option<NodeId>,
}

/// (alpha (L_pos + L_sem) + box_weight L_box + L_iou) / (N_D + 1).
pub fn total_loss(tape: &Tape, parts: LossParts, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let zero = || tape.leaf(Matrix::scalar(0.0));
    let pos = parts.position.unwrap_or_else(zero);
    let sem = parts.semantic.unwrap_or_else(zero);
    let box_l1 = parts.box_l1.unwrap_or_else(zero);
    let iou = parts.iou.unwrap_or_else(zero);

    let aligned = tape.scale(tape.add(pos, sem)?, cfg.alpha);
    let boxes = tape.add(tape.scale(box_l1, cfg.box_weight), iou)?;
    let total = tape.add(aligned, boxes)?;
    Ok(tape.scale(total, 1.0 / (cfg.decoder_layers as f64 + 1.0)))
}
