//! Global instance-level contrastive objective with progressive softened
//! targets.
//!
//! Targets are always built from detached similarity values (no gradient
//! flows through them) and move through three phases over training: hard
//! one-hot, uniform smoothing, then importance-aware softening where each
//! negative's share follows its similarity score.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Temperature bounds; the learnable scale is stored as log(1/tau) and
/// clamped after every optimizer step.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
pub const TAU_INIT: f64 = 0.07;

pub fn log_inv_tau_from_tau(tau: f64) -> f64 {
    (1.0 / tau).ln()
}

pub fn clamp_log_inv_tau(x: f64) -> f64 {
    x.clamp((1.0 / TAU_MAX).ln(), (1.0 / TAU_MIN).ln())
}

/// Scaled similarity logits for both retrieval directions, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityLogits {
    pub i2t: TensorId,
    pub t2i: TensorId,
    pub n: usize,
}

/// i2t[i][j] = dot(v_i, t_j) / tau and the transposed direction, built from
/// unit-norm global embeddings and the on-tape scale 1/tau.
pub fn similarity_logits(
    tape: &mut Tape,
    img_global: TensorId,
    txt_global: TensorId,
    inv_tau: TensorId,
) -> Result<SimilarityLogits> {
    let n = tape.shape(img_global)[0];
    if n < 2 {
        return Err(Error::Batch(format!(
            "contrastive loss needs n >= 2 paired samples, got {n}"
        )));
    }
    if tape.shape(img_global) != tape.shape(txt_global) {
        return Err(Error::ShapeMismatch {
            op: "similarity_logits",
            left: tape.shape(img_global).to_vec(),
            right: tape.shape(txt_global).to_vec(),
        });
    }
    let raw_i2t = tape.matmul_nt(img_global, txt_global)?;
    let raw_t2i = tape.matmul_nt(txt_global, img_global)?;
    Ok(SimilarityLogits {
        i2t: tape.mul_scalar_t(raw_i2t, inv_tau)?,
        t2i: tape.mul_scalar_t(raw_t2i, inv_tau)?,
        n,
    })
}

/// Row-stochastic matrix of contrastive targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub n: usize,
    pub rows: Vec<f64>,
}

impl TargetDistribution {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }
}

/// Hard one-hot targets (identity rows).
pub fn one_hot_targets(n: usize) -> Result<TargetDistribution> {
    if n < 2 {
        return Err(Error::Batch(format!("one_hot_targets needs n >= 2, got {n}")));
    }
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        rows[i * n + i] = 1.0;
    }
    Ok(TargetDistribution { n, rows })
}

/// Uniform smoothing: (1-delta) on the positive, delta/(n-1) on every
/// negative.
pub fn smooth_targets(one_hot: &TargetDistribution, delta: f64) -> Result<TargetDistribution> {
    let n = one_hot.n;
    if n < 2 {
        return Err(Error::Batch("smooth_targets needs n >= 2".into()));
    }
    let off = delta / (n - 1) as f64;
    let rows = one_hot
        .rows
        .iter()
        .map(|&y| (1.0 - delta) * y + off * (1.0 - y))
        .collect();
    Ok(TargetDistribution { n, rows })
}

/// What the softening softmax runs over.
///
/// `Logits` follows the surrounding prose: negatives are weighted by their
/// similarity scores. `LabelLiteral` reproduces the formula read literally
/// (softmax over the filled one-hot label row), which collapses to uniform
/// smoothing; it exists only for side-by-side comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillSource {
    #[default]
    Logits,
    LabelLiteral,
}

/// Importance-aware softened row: the positive holds 1-delta exactly and
/// the remaining delta is split over negatives by a softmax of the filled
/// row (the diagonal entry is masked to -inf, everything else kept).
pub fn importance_targets_row(
    logits_row: &[f64],
    diag_index: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    let n = logits_row.len();
    if n < 2 {
        return Err(Error::Batch("importance_targets needs n >= 2".into()));
    }
    if diag_index >= n {
        return Err(Error::Input(format!(
            "diag index {diag_index} out of range for row of {n}"
        )));
    }
    if !logits_row.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("importance_targets", "non-finite logit"));
    }
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in logits_row.iter().enumerate() {
        if j != diag_index && v > max {
            max = v;
        }
    }
    let mut out = vec![0.0; n];
    let mut z = 0.0;
    for (j, &v) in logits_row.iter().enumerate() {
        if j != diag_index {
            let e = (v - max).exp();
            out[j] = e;
            z += e;
        }
    }
    let scale = delta / z;
    for (j, o) in out.iter_mut().enumerate() {
        if j != diag_index {
            *o *= scale;
        }
    }
    out[diag_index] = 1.0 - delta;
    Ok(out)
}

/// Importance-aware targets for a full logits matrix; row i uses diagonal
/// index i. Logit values are treated as constants.
pub fn importance_targets(
    logits: &[f64],
    n: usize,
    delta: f64,
    source: FillSource,
) -> Result<TargetDistribution> {
    if logits.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "importance_targets",
            left: vec![n, n],
            right: vec![logits.len()],
        });
    }
    let one_hot = one_hot_targets(n)?;
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        let row_src = match source {
            FillSource::Logits => &logits[i * n..(i + 1) * n],
            FillSource::LabelLiteral => one_hot.row(i),
        };
        let row = importance_targets_row(row_src, i, delta)?;
        rows[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    Ok(TargetDistribution { n, rows })
}

/// Epoch-gated transition between the three target kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSchedule {
    pub total_epochs: usize,
    pub r1: f64,
    pub r2: f64,
    pub delta: f64,
}

impl LabelSchedule {
    pub fn new(total_epochs: usize, r1: f64, r2: f64, delta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r1) || !(0.0..=1.0).contains(&r2) || r1 >= r2 {
            return Err(Error::config(
                "schedule.r1/r2",
                format!("need 0 <= r1 < r2 <= 1, got r1={r1}, r2={r2}"),
            ));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::config("schedule.delta", format!("delta={delta} outside [0,1]")));
        }
        if total_epochs == 0 {
            return Err(Error::config("schedule.total_epochs", "must be positive"));
        }
        Ok(LabelSchedule {
            total_epochs,
            r1,
            r2,
            delta,
        })
    }

    pub fn phase_at(&self, epoch: usize) -> Result<Phase> {
        if epoch >= self.total_epochs {
            return Err(Error::Schedule(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let e = epoch as f64;
        let total = self.total_epochs as f64;
        Ok(if e < self.r1 * total {
            Phase::OneHot
        } else if e < self.r2 * total {
            Phase::Smoothed
        } else {
            Phase::ImportanceAware
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    OneHot,
    Smoothed,
    ImportanceAware,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::OneHot => "one-hot",
            Phase::Smoothed => "smoothed",
            Phase::ImportanceAware => "importance-aware",
        })
    }
}

/// Pick the target matrix for the epoch out of the three precomputed kinds.
pub fn select_targets<'a>(
    epoch: usize,
    schedule: &LabelSchedule,
    one_hot: &'a TargetDistribution,
    smoothed: &'a TargetDistribution,
    importance: &'a TargetDistribution,
) -> Result<&'a TargetDistribution> {
    Ok(match schedule.phase_at(epoch)? {
        Phase::OneHot => one_hot,
        Phase::Smoothed => smoothed,
        Phase::ImportanceAware => importance,
    })
}

/// Soft cross-entropy InfoNCE averaged over both directions:
/// L = 1/2 [ mean_i H(t_i, softmax(i2t_i)) + mean_i H(t'_i, softmax(t2i_i)) ].
pub fn infonce(
    tape: &mut Tape,
    logits: &SimilarityLogits,
    targets_i2t: &TargetDistribution,
    targets_t2i: &TargetDistribution,
) -> Result<TensorId> {
    let n = logits.n;
    if targets_i2t.n != n || targets_t2i.n != n {
        return Err(Error::ShapeMismatch {
            op: "infonce",
            left: vec![n, n],
            right: vec![targets_i2t.n, targets_t2i.n],
        });
    }
    let mut direction = |logit_id: TensorId, t: &TargetDistribution| -> Result<TensorId> {
        let lsm = tape.log_softmax_rows(logit_id)?;
        let tc = tape.constant(vec![n, n], t.rows.clone())?;
        let prod = tape.mul(lsm, tc)?;
        let s = tape.sum(prod)?;
        tape.scale(s, -1.0 / n as f64)
    };
    let l_i2t = direction(logits.i2t, targets_i2t)?;
    let l_t2i = direction(logits.t2i, targets_t2i)?;
    let both = tape.add(l_i2t, l_t2i)?;
    tape.scale(both, 0.5)
}
