//! Explicit target selection: score every candidate against each semantic
//! component, combine the component scores, and take the argmax.

use crate::align::ComponentLabels;
use crate::decouple::ComponentKind;
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use serde::Serialize;

/// Per-candidate scores for one semantic component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentScore {
    pub kind: ComponentKind,
    /// Softmax over the k candidates; all zeros when the component is absent.
    pub scores: Vec<f64>,
    /// True when the utterance has no tokens for this component.
    pub absent: bool,
}

/// Score candidates against one component: mean-pool the component's token
/// features, dot with each candidate feature, scale by 1/tau, softmax.
pub fn component_score(
    object_features: &Matrix,
    text_features: &Matrix,
    positions: &[usize],
    kind: ComponentKind,
    tau: f64,
) -> Result<ComponentScore> {
    if tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    if object_features.cols != text_features.cols {
        return Err(Error::Shape(format!(
            "feature dims disagree: objects {} vs text {}",
            object_features.cols, text_features.cols
        )));
    }
    let k = object_features.rows;
    if positions.is_empty() {
        return Ok(ComponentScore {
            kind,
            scores: vec![0.0; k],
            absent: true,
        });
    }
    let d = text_features.cols;
    let mut pooled = vec![0.0; d];
    for p in positions {
        if *p >= text_features.rows {
            return Err(Error::Shape(format!(
                "component position {p} out of range for {} text rows",
                text_features.rows
            )));
        }
        for (acc, v) in pooled.iter_mut().zip(text_features.row(*p)) {
            *acc += v;
        }
    }
    for v in pooled.iter_mut() {
        *v /= positions.len() as f64;
    }

    let mut logits = Matrix::zeros(1, k);
    for c in 0..k {
        let dot: f64 = object_features
            .row(c)
            .iter()
            .zip(&pooled)
            .map(|(a, b)| a * b)
            .sum();
        logits.set(0, c, dot / tau);
    }
    Ok(ComponentScore {
        kind,
        scores: logits.softmax_rows().data,
        absent: false,
    })
}

fn scores_for(
    object_features: &Matrix,
    text_features: &Matrix,
    labels: &ComponentLabels,
    kind: ComponentKind,
    tau: f64,
) -> Result<ComponentScore> {
    let positions = labels.get(kind).map(|l| l.indices()).unwrap_or_default();
    component_score(object_features, text_features, &positions, kind, tau)
}

/// Sum the component scores with the auxiliary score subtracted; absent
/// components are all-zero and contribute nothing.
pub fn combined_score(scores: &[ComponentScore]) -> Result<Vec<f64>> {
    let k = scores
        .first()
        .map(|s| s.scores.len())
        .ok_or_else(|| Error::Invariant("combined_score with no components".into()))?;
    let mut all = vec![0.0; k];
    for cs in scores {
        if cs.scores.len() != k {
            return Err(Error::Shape(format!(
                "component {:?} has {} scores, expected {k}",
                cs.kind,
                cs.scores.len()
            )));
        }
        let sign = if cs.kind == ComponentKind::AuxiliaryObject {
            -1.0
        } else {
            1.0
        };
        for (acc, s) in all.iter_mut().zip(&cs.scores) {
            *acc += sign * s;
        }
    }
    Ok(all)
}

/// Compute all five component scores from features and labels.
pub fn all_component_scores(
    object_features: &Matrix,
    text_features: &Matrix,
    labels: &ComponentLabels,
    tau: f64,
) -> Result<Vec<ComponentScore>> {
    [
        ComponentKind::MainObject,
        ComponentKind::Attribute,
        ComponentKind::Pronoun,
        ComponentKind::Relationship,
        ComponentKind::AuxiliaryObject,
    ]
    .into_iter()
    .map(|kind| scores_for(object_features, text_features, labels, kind, tau))
    .collect()
}

/// Argmax with the lowest index winning ties.
pub fn argmax(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Invariant("argmax over zero candidates".into()));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite score {s} at {i}")));
        }
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Pick the main grounding target: argmax of the combined score.
pub fn select_target(s_all: &[f64]) -> Result<usize> {
    argmax(s_all)
}

/// Full pipeline from features to the chosen candidate index.
pub fn ground(
    object_features: &Matrix,
    text_features: &Matrix,
    labels: &ComponentLabels,
    tau: f64,
) -> Result<usize> {
    let scores = all_component_scores(object_features, text_features, labels, tau)?;
    select_target(&combined_score(&scores)?)
}

/// Pick the auxiliary object by scoring candidates against the auxiliary
/// component. With `attribute_only` the attribute score is used instead,
/// mirroring a published variant of this selection rule.
pub fn select_auxiliary(
    object_features: &Matrix,
    text_features: &Matrix,
    labels: &ComponentLabels,
    tau: f64,
    attribute_only: bool,
) -> Result<usize> {
    let kind = if attribute_only {
        ComponentKind::Attribute
    } else {
        ComponentKind::AuxiliaryObject
    };
    let cs = scores_for(object_features, text_features, labels, kind, tau)?;
    if cs.absent {
        return Err(Error::Config(format!(
            "cannot select auxiliary: no {kind:?} tokens in the utterance"
        )));
    }
    argmax(&cs.scores)
}
