//! Per-class running-mean prototypes and the prototype recalibration loss.
//!
//! The bank stores one mean feature vector and one sample count per class.
//! Each observed sample updates its class mean with
//! `p_{k+1} = (k * p_k + h) / (k + 1)`, one sample at a time in batch order.
//!
//! The recalibration loss feeds every seen prototype through the FC layer as
//! if it were an input row, restricts the softmax to the seen classes, and
//! takes the cross-entropy against the prototype's own class. Gradients flow
//! into the FC layer only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{masked_cross_entropy, ClassSet};
use crate::numkit::Matrix;

/// Reduction applied to the summed prototype cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoNorm {
    /// Divide by the number of seen classes.
    #[default]
    MeanOverSeen,
    /// Divide by the total number of classes.
    OverNumClasses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    means: Matrix,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoLoss {
    pub loss: f64,
    pub grad_w: Matrix,
    pub grad_b: Matrix,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            means: Matrix::zeros(num_classes, feature_dim),
            counts: vec![0; num_classes],
        }
    }

    pub fn from_parts(means: Matrix, counts: Vec<u64>) -> Result<Self> {
        if means.rows() != counts.len() {
            return Err(Error::shape(
                "PrototypeBank::from_parts",
                format!("{} means for {} counts", means.rows(), counts.len()),
            ));
        }
        Ok(Self { means, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.cols()
    }

    /// `c x l`; row `j` is the prototype of class `j`.
    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        self.means.row(class)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() || features.cols() != self.feature_dim() {
            return Err(Error::shape(
                "PrototypeBank::update",
                format!(
                    "{:?} features with {} labels for a {}-dim bank",
                    features.shape(),
                    labels.len(),
                    self.feature_dim()
                ),
            ));
        }
        let c = self.num_classes();
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {y} >= {c} classes")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("prototype update features".into()));
        }
        for (i, &y) in labels.iter().enumerate() {
            let k = self.counts[y] as f64;
            let h = features.row(i);
            for (p, &v) in self.means.row_mut(y).iter_mut().zip(h) {
                *p = (k * *p + v) / (k + 1.0);
            }
            self.counts[y] += 1;
        }
        Ok(())
    }

    /// Classes with at least one observed sample.
    pub fn old_classes(&self) -> ClassSet {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(j, _)| j)
            .collect()
    }

    /// Persistent scalars held by the bank (`c * l` means plus `c` counts).
    pub fn state_size(&self) -> usize {
        self.means.len() + self.counts.len()
    }
}

/// Prototype cross-entropy restricted to `mask` (the caller passes the
/// bank's seen classes).
pub fn proto_loss(
    bank: &PrototypeBank,
    fc_weight: &Matrix,
    fc_bias: &Matrix,
    mask: &ClassSet,
    norm: ProtoNorm,
) -> Result<ProtoLoss> {
    let (l, c) = fc_weight.shape();
    if l != bank.feature_dim() || c != bank.num_classes() || fc_bias.shape() != (1, c) {
        return Err(Error::shape(
            "proto_loss",
            format!(
                "fc {:?}/{:?} for a bank of {} classes x {} dims",
                fc_weight.shape(),
                fc_bias.shape(),
                bank.num_classes(),
                bank.feature_dim()
            ),
        ));
    }
    if mask.is_empty() {
        return Ok(ProtoLoss {
            loss: 0.0,
            grad_w: Matrix::zeros(l, c),
            grad_b: Matrix::zeros(1, c),
        });
    }
    let labels: Vec<usize> = mask.iter().copied().collect();
    let rows: Vec<&[f64]> = labels.iter().map(|&j| bank.mean(j)).collect();
    let protos = Matrix::from_rows(&rows)?;
    let logits = protos.matmul(fc_weight)?.add_row_broadcast(fc_bias)?;
    let (mut loss, mut dlogits) = masked_cross_entropy(&logits, &labels, mask)?;
    if norm == ProtoNorm::OverNumClasses {
        let s = labels.len() as f64 / c as f64;
        loss *= s;
        dlogits = dlogits.scale(s);
    }
    Ok(ProtoLoss {
        loss,
        grad_w: protos.t_matmul(&dlogits)?,
        grad_b: dlogits.column_sums(),
    })
}
