//! Classification losses on differentiable logits.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Training instances per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(LabError::contract("class counts are empty"));
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(LabError::contract(format!(
                "class {k} has zero training instances"
            )));
        }
        Ok(Self(counts))
    }

    pub fn uniform(classes: usize, count: usize) -> Result<Self> {
        Self::new(vec![count; classes])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn get(&self, class: usize) -> usize {
        self.0[class]
    }

    /// Classes ordered by descending count, ties by class index.
    pub fn by_frequency(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].cmp(&self.0[a]).then(a.cmp(&b)));
        order
    }
}

fn check_labels(g: &Graph, logits: Var, labels: &[usize]) -> Result<usize> {
    let (n, k) = g
        .value(logits)
        .dims2()
        .map_err(|_| LabError::dim("cross_entropy", g.shape(logits), &[]))?;
    if labels.len() != n {
        return Err(LabError::dim(
            "cross_entropy",
            g.shape(logits),
            &[labels.len()],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(LabError::contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(k)
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g, logits, labels)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.gather(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Cross-entropy on `logits + ln(counts)`, i.e. the mean of
/// `-log(n_y e^{z_y} / Σ_j n_j e^{z_j})`.
pub fn balanced_softmax_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    counts: &ClassCounts,
) -> Result<Var> {
    let k = check_labels(g, logits, labels)?;
    if counts.num_classes() != k {
        return Err(LabError::dim(
            "balanced_softmax_loss",
            g.shape(logits),
            &[counts.num_classes()],
        ));
    }
    let prior = g.constant(Tensor::vector(
        counts.as_slice().iter().map(|&c| (c as f64).ln()).collect(),
    ));
    let shifted = g.add(logits, prior)?;
    cross_entropy(g, shifted, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "balanced")]
    BalancedSoftmax,
}

/// A loss ready to apply, carrying the class prior when it needs one.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    CrossEntropy,
    BalancedSoftmax(ClassCounts),
}

impl Loss {
    pub fn new(kind: LossKind, counts: &ClassCounts) -> Self {
        match kind {
            LossKind::CrossEntropy => Loss::CrossEntropy,
            LossKind::BalancedSoftmax => Loss::BalancedSoftmax(counts.clone()),
        }
    }

    pub fn apply(&self, g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
        match self {
            Loss::CrossEntropy => cross_entropy(g, logits, labels),
            Loss::BalancedSoftmax(c) => balanced_softmax_loss(g, logits, labels, c),
        }
    }
}
