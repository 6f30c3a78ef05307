//! Per-component position labels and ground-truth text distributions.

use serde::{Deserialize, Serialize};

use crate::decouple::{ComponentKind, SemanticComponents};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Length-l binary mask marking the token positions of one component.
/// The final position is reserved for the "matches no text" slot and is
/// never set by `position_label` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLabel {
    pub bits: Vec<u8>,
    pub component: ComponentKind,
    pub utterance_id: String,
}

impl PositionLabel {
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    pub fn capacity(&self) -> usize {
        self.bits.len()
    }
}

/// Weights of the main-object text distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for AlignmentWeights {
    fn default() -> Self {
        AlignmentWeights {
            lambda1: 0.6,
            lambda2: 0.2,
            lambda3: 0.2,
            lambda4: 0.1,
        }
    }
}

impl AlignmentWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("lambda weights must be non-negative".into()));
        }
        if self.lambda1 <= 0.0 {
            return Err(Error::Config("lambda1 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowRole {
    Main,
    Auxiliary,
    Other,
}

/// Ground-truth text distribution for all k candidates; every row sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextDistribution {
    pub rows: Matrix,
    pub row_roles: Vec<RowRole>,
}

impl TextDistribution {
    pub fn candidates(&self) -> usize {
        self.rows.rows
    }

    pub fn capacity(&self) -> usize {
        self.rows.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_roles.len() != self.rows.rows {
            return Err(Error::Shape("row_roles length != row count".into()));
        }
        let l = self.rows.cols;
        for r in 0..self.rows.rows {
            let row = self.rows.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!("row {r} sums to {sum}")));
            }
            if row.iter().any(|v| *v < 0.0) {
                return Err(Error::Invariant(format!("row {r} has negative mass")));
            }
            if self.row_roles[r] == RowRole::Other
                && (row[l - 1] - 1.0).abs() > 1e-12
            {
                return Err(Error::Invariant(format!("Other row {r} is not the null one-hot")));
            }
        }
        Ok(())
    }
}

/// Binary position label of one component kind.
pub fn position_label(
    components: &SemanticComponents,
    kind: ComponentKind,
    l: usize,
) -> Result<PositionLabel> {
    let n = components.assignment.len();
    // the final slot is reserved for the null position
    if n > l.saturating_sub(1) {
        return Err(Error::Capacity { got: n, limit: l - 1 });
    }
    let mut bits = vec![0u8; l];
    for (i, k) in components.assignment.iter().enumerate() {
        if *k == kind {
            bits[i] = 1;
        }
    }
    Ok(PositionLabel {
        bits,
        component: kind,
        utterance_id: components.utterance_id.clone(),
    })
}

/// All five component labels of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentLabels {
    pub main: PositionLabel,
    pub attribute: PositionLabel,
    pub pronoun: PositionLabel,
    pub relationship: PositionLabel,
    pub auxiliary: PositionLabel,
}

impl ComponentLabels {
    pub fn build(components: &SemanticComponents, l: usize) -> Result<Self> {
        Ok(ComponentLabels {
            main: position_label(components, ComponentKind::MainObject, l)?,
            attribute: position_label(components, ComponentKind::Attribute, l)?,
            pronoun: position_label(components, ComponentKind::Pronoun, l)?,
            relationship: position_label(components, ComponentKind::Relationship, l)?,
            auxiliary: position_label(components, ComponentKind::AuxiliaryObject, l)?,
        })
    }

    pub fn get(&self, kind: ComponentKind) -> Option<&PositionLabel> {
        match kind {
            ComponentKind::MainObject => Some(&self.main),
            ComponentKind::Attribute => Some(&self.attribute),
            ComponentKind::Pronoun => Some(&self.pronoun),
            ComponentKind::Relationship => Some(&self.relationship),
            ComponentKind::AuxiliaryObject => Some(&self.auxiliary),
            ComponentKind::None => None,
        }
    }

    /// Clear every label except the main object's (sparse-alignment ablation)
    /// or any selected subset.
    pub fn restrict(&self, keep: impl Fn(ComponentKind) -> bool) -> ComponentLabels {
        let clear = |label: &PositionLabel| -> PositionLabel {
            if keep(label.component) {
                label.clone()
            } else {
                PositionLabel {
                    bits: vec![0; label.bits.len()],
                    component: label.component,
                    utterance_id: label.utterance_id.clone(),
                }
            }
        };
        ComponentLabels {
            main: self.main.clone(),
            attribute: clear(&self.attribute),
            pronoun: clear(&self.pronoun),
            relationship: clear(&self.relationship),
            auxiliary: clear(&self.auxiliary),
        }
    }
}

/// Weighted sum of the main object's component labels, L1-normalized so the
/// KL of the position loss is well defined.
pub fn main_distribution(labels: &ComponentLabels, w: &AlignmentWeights) -> Result<Vec<f64>> {
    w.validate()?;
    let l = labels.main.capacity();
    for lbl in [&labels.attribute, &labels.pronoun, &labels.relationship] {
        if lbl.capacity() != l || lbl.utterance_id != labels.main.utterance_id {
            return Err(Error::Shape("component labels disagree on capacity or id".into()));
        }
    }
    let mut row = vec![0.0; l];
    for i in 0..l {
        row[i] = w.lambda1 * labels.main.bits[i] as f64
            + w.lambda2 * labels.attribute.bits[i] as f64
            + w.lambda3 * labels.pronoun.bits[i] as f64
            + w.lambda4 * labels.relationship.bits[i] as f64;
    }
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Invariant("main distribution has no mass".into()));
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(row)
}

/// Assemble the k x l ground-truth text distribution. `roles[i]` is the role
/// of candidate i; exactly one candidate must be Main.
pub fn build_ptext(
    main_row: &[f64],
    auxi_label: &PositionLabel,
    roles: &[RowRole],
) -> Result<TextDistribution> {
    let l = main_row.len();
    if auxi_label.capacity() != l {
        return Err(Error::Shape("auxiliary label capacity mismatch".into()));
    }
    if roles.iter().filter(|r| **r == RowRole::Main).count() != 1 {
        return Err(Error::Config("exactly one candidate must have the Main role".into()));
    }
    let auxi_count = auxi_label.count();
    let mut rows = Matrix::zeros(roles.len(), l);
    for (i, role) in roles.iter().enumerate() {
        match role {
            RowRole::Main => {
                for (j, v) in main_row.iter().enumerate() {
                    rows.set(i, j, *v);
                }
            }
            RowRole::Auxiliary => {
                if auxi_count == 0 {
                    return Err(Error::Config(
                        "Auxiliary role assigned but the auxiliary label is empty".into(),
                    ));
                }
                for j in 0..l {
                    if auxi_label.bits[j] == 1 {
                        rows.set(i, j, 1.0 / auxi_count as f64);
                    }
                }
            }
            RowRole::Other => rows.set(i, l - 1, 1.0),
        }
    }
    let dist = TextDistribution {
        rows,
        row_roles: roles.to_vec(),
    };
    dist.validate()?;
    Ok(dist)
}
