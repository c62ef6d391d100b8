//! Label distributions and cross-entropy losses.
//!
//! Three target distributions over the `K` training classes:
//!
//! * [`one_hot`] — the classical ground-truth target;
//! * [`lsr_distribution`] — smoothed target: `ε/K` off the true class and
//!   `1 - ε + ε/K` on it;
//! * [`lsro_distribution`] — the uniform target `1/K` assigned to outlier
//!   (generated, unlabeled) samples.
//!
//! The combined outlier loss ([`lsro_loss`]) switches between the one-hot
//! term and the uniform term on the per-sample [`SourceFlag`]:
//! `-(1-Z)·log p(y) - (Z/K)·Σ_k log p(k)`.
//!
//! Two competing integration strategies are provided for comparison:
//! [`all_in_one_label`] sends every outlier to a single new class `K+1`,
//! and [`pseudo_label`] picks the argmax of the current prediction.
//!
//! Losses are built from graph ops so they differentiate through the
//! prediction; distributions are plain vectors constructed analytically
//! from the formulas above (never renormalized numerically).

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

/// Whether a sample is real training data or a generated outlier.
///
/// The numeric value is the `Z` switch in the outlier loss: 0 selects the
/// one-hot term, 1 selects the uniform term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceFlag {
    Real,
    Generated,
}

impl SourceFlag {
    pub fn z(self) -> f64 {
        match self {
            SourceFlag::Real => 0.0,
            SourceFlag::Generated => 1.0,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(SourceFlag::Real),
            1 => Ok(SourceFlag::Generated),
            _ => Err(Error::invalid(format!("source flag must be 0 or 1, got {b}"))),
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            SourceFlag::Real => 0,
            SourceFlag::Generated => 1,
        }
    }
}

/// Which formula produced a [`LabelDistribution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    OneHot,
    Lsr,
    LsroUniform,
}

/// A probability vector over training classes used as a loss target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
    kind: LabelKind,
}

impl LabelDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_class(y: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!("class count must be at least 2, got {k}")));
    }
    if y >= k {
        return Err(Error::invalid(format!(
            "class index {y} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Ground-truth distribution: 1 on class `y`, 0 elsewhere.
pub fn one_hot(y: usize, k: usize) -> Result<LabelDistribution> {
    check_class(y, k)?;
    let mut probs = vec![0.0; k];
    probs[y] = 1.0;
    Ok(LabelDistribution {
        probs,
        kind: LabelKind::OneHot,
    })
}

/// Smoothed ground truth: `ε/K` off the true class, `1 - ε + ε/K` on it.
/// With `ε = 0` this reduces to [`one_hot`]; with `ε = 1` it is uniform.
pub fn lsr_distribution(y: usize, k: usize, epsilon: f64) -> Result<LabelDistribution> {
    check_class(y, k)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "smoothing epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    let off = epsilon / k as f64;
    let mut probs = vec![off; k];
    probs[y] = 1.0 - epsilon + off;
    Ok(LabelDistribution {
        probs,
        kind: LabelKind::Lsr,
    })
}

/// Uniform target for outlier samples: every entry `1/K`.
pub fn lsro_distribution(k: usize) -> Result<LabelDistribution> {
    if k < 2 {
        return Err(Error::invalid(format!("class count must be at least 2, got {k}")));
    }
    Ok(LabelDistribution {
        probs: vec![1.0 / k as f64; k],
        kind: LabelKind::LsroUniform,
    })
}

/// Target for the all-in-one strategy: one-hot on the new class `K` over
/// `K + 1` classes. Real samples under this strategy keep their one-hot
/// label embedded in the widened head (`probs[K] = 0`).
pub fn all_in_one_label(k: usize) -> Result<LabelDistribution> {
    if k < 2 {
        return Err(Error::invalid(format!("class count must be at least 2, got {k}")));
    }
    one_hot(k, k + 1)
}

/// Argmax class of a prediction vector; ties break toward the smallest
/// index so assignment is deterministic.
pub fn pseudo_label(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy `-Σ_k q(k)·log p(k)`, differentiable through `p`.
///
/// `p` is a predicted distribution on the graph (shape `[K]` or `[1, K]`);
/// the target is a constant.
pub fn cross_entropy(g: &mut Graph, p: TensorId, q: &LabelDistribution) -> Result<TensorId> {
    let numel: usize = g.shape(p).iter().product();
    if numel != q.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: g.shape(p).to_vec(),
            rhs: vec![q.len()],
        });
    }
    let shape = g.shape(p).to_vec();
    let target = g.leaf(&shape, q.probs().to_vec())?;
    let lp = g.log(p)?;
    let weighted = g.mul(target, lp)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0)
}

/// Smoothed cross-entropy `-(1-ε)·log p(y) - (ε/K)·Σ_k log p(k)`.
///
/// Built directly from that formula (not by delegating to [`cross_entropy`]
/// with a smoothed target), so the algebraic identity between the two
/// routes can be checked independently.
pub fn lsr_loss(g: &mut Graph, p: TensorId, y: usize, k: usize, epsilon: f64) -> Result<TensorId> {
    check_class(y, k)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "smoothing epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    let numel: usize = g.shape(p).iter().product();
    if numel != k {
        return Err(Error::ShapeMismatch {
            op: "lsr_loss",
            lhs: g.shape(p).to_vec(),
            rhs: vec![k],
        });
    }
    let lp = g.log(p)?;
    let shape = g.shape(p).to_vec();
    let mut onehot = vec![0.0; k];
    onehot[y] = 1.0;
    let target = g.leaf(&shape, onehot)?;
    let picked = g.mul(target, lp)?;
    let picked_sum = g.sum(picked)?;
    let truth_term = g.scale(picked_sum, -(1.0 - epsilon))?;
    if epsilon == 0.0 {
        return Ok(truth_term);
    }
    let all_sum = g.sum(lp)?;
    let smooth_term = g.scale(all_sum, -(epsilon / k as f64))?;
    g.add(truth_term, smooth_term)
}

/// Outlier-aware cross-entropy `-(1-Z)·log p(y) - (Z/K)·Σ_k log p(k)`.
///
/// Real samples (`Z = 0`) must carry a label and reduce to plain
/// cross-entropy on it; generated samples (`Z = 1`) must not carry one and
/// pull the prediction toward uniform.
pub fn lsro_loss(
    g: &mut Graph,
    p: TensorId,
    y: Option<usize>,
    z: SourceFlag,
    k: usize,
) -> Result<TensorId> {
    let numel: usize = g.shape(p).iter().product();
    if numel != k {
        return Err(Error::ShapeMismatch {
            op: "lsro_loss",
            lhs: g.shape(p).to_vec(),
            rhs: vec![k],
        });
    }
    match (z, y) {
        (SourceFlag::Real, None) => Err(Error::invalid(
            "real sample (Z=0) requires a class label".to_string(),
        )),
        (SourceFlag::Generated, Some(_)) => Err(Error::invalid(
            "generated sample (Z=1) must not carry a class label".to_string(),
        )),
        (SourceFlag::Real, Some(y)) => {
            check_class(y, k)?;
            let lp = g.log(p)?;
            let shape = g.shape(p).to_vec();
            let mut onehot = vec![0.0; k];
            onehot[y] = 1.0;
            let target = g.leaf(&shape, onehot)?;
            let picked = g.mul(target, lp)?;
            let picked_sum = g.sum(picked)?;
            g.scale(picked_sum, -1.0)
        }
        (SourceFlag::Generated, None) => {
            if k < 2 {
                return Err(Error::invalid(format!(
                    "class count must be at least 2, got {k}"
                )));
            }
            let lp = g.log(p)?;
            let all_sum = g.sum(lp)?;
            g.scale(all_sum, -1.0 / k as f64)
        }
    }
}
