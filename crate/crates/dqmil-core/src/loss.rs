//! The self-distillation objective and its constituent terms.
//!
//! The full loss is
//!
//! ```text
//! L = CE(p_sa, Y) + alpha * CE(p_mil, Y)
//!       + (1 - alpha) * KL(p_mil || p_sa) + lambda * ||t_sa - t_mil||^2
//! ```
//!
//! with the latent pathway as teacher: by default the teacher
//! distribution and token are detached so KL and hint gradients flow only
//! into the MIL pathway. Single-pathway variants reduce to the active
//! head's cross-entropy; the dual-path CE variant uses alpha = 1 and
//! lambda = 0, i.e. plain CE on both heads.
//!
//! Every term also exists as a plain-value function over probabilities,
//! used for evaluation and as the reference the graph build is tested
//! against.

use alloc::format;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::model::{BagOutput, BagOutputIds, Variant};
use crate::scalar::Scalar;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Balance weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// CE/KL balance; the KL term carries 1 - alpha.
    pub alpha: f64,
    /// Hint (token L2) weight.
    pub lambda: f64,
    /// Detach the teacher side of KL and hint. On by default; exposed
    /// because the alternative is a defensible reading.
    pub detach_teacher: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.7,
            lambda: 0.03,
            detach_teacher: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::Parameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.lambda < 0.0 {
            return Err(CoreError::Parameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F: Scalar> {
    pub total: F,
    pub ce_sa: F,
    pub ce_mil: F,
    pub kl: F,
    pub hint: F,
}

/// The (alpha, lambda) actually applied for a variant. Single-path and
/// plain-CE variants collapse to (1, 0) with no KL/hint terms, which
/// keeps the breakdown identity `total = ce_sa + a*ce_mil + (1-a)*kl +
/// l*hint` exact for every variant.
pub fn effective_weights(variant: Variant, weights: &LossWeights) -> (f64, f64) {
    match variant {
        Variant::DqSd => (weights.alpha, weights.lambda),
        Variant::DqCe | Variant::MilOnly | Variant::PerceiverOnly => (1.0, 0.0),
    }
}

// ── Plain-value terms ───────────────────────────────────────────────

/// -ln p[Y] with the probability floor.
pub fn cross_entropy<F: Scalar>(p: &[F], label: usize) -> Result<F> {
    if label >= p.len() {
        return Err(CoreError::Label {
            label,
            classes: p.len(),
        });
    }
    let floor = F::from_f64(PROB_FLOOR);
    Ok(-p[label].max(floor).ln())
}

/// KL(p_student || p_teacher) with the probability floor on both sides.
pub fn kl_divergence<F: Scalar>(p_student: &[F], p_teacher: &[F]) -> Result<F> {
    if p_student.len() != p_teacher.len() {
        return Err(CoreError::Dimension(format!(
            "kl_divergence: lengths {} and {} differ",
            p_student.len(),
            p_teacher.len()
        )));
    }
    let floor = F::from_f64(PROB_FLOOR);
    let mut acc = F::ZERO;
    for (&ps, &pt) in p_student.iter().zip(p_teacher) {
        acc += ps * (ps.max(floor).ln() - pt.max(floor).ln());
    }
    Ok(acc)
}

/// Squared Euclidean distance between two tokens.
pub fn hint_loss<F: Scalar>(t_sa: &[F], t_mil: &[F]) -> Result<F> {
    if t_sa.len() != t_mil.len() {
        return Err(CoreError::Dimension(format!(
            "hint_loss: token widths {} and {} differ",
            t_sa.len(),
            t_mil.len()
        )));
    }
    Ok(t_sa
        .iter()
        .zip(t_mil)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum())
}

/// Compose the variant's objective from a `BagOutput`'s plain values.
pub fn self_distillation_loss<F: Scalar>(
    out: &BagOutput<F>,
    label: usize,
    weights: &LossWeights,
    variant: Variant,
) -> Result<LossBreakdown<F>> {
    weights.validate()?;
    let (alpha, lambda) = effective_weights(variant, weights);
    let zero = F::ZERO;

    let sa = out.sa.as_ref();
    let mil = out.mil.as_ref();
    let need = |ok: bool, what: &'static str| {
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!(
                "variant {} needs the {what} pathway output",
                variant.as_str()
            )))
        }
    };

    let (ce_sa, ce_mil, kl, hint) = match variant {
        Variant::MilOnly => {
            need(mil.is_some(), "mil")?;
            (zero, cross_entropy(&mil.unwrap().dist, label)?, zero, zero)
        }
        Variant::PerceiverOnly => {
            need(sa.is_some(), "sa")?;
            (cross_entropy(&sa.unwrap().dist, label)?, zero, zero, zero)
        }
        Variant::DqCe => {
            need(sa.is_some(), "sa")?;
            need(mil.is_some(), "mil")?;
            (
                cross_entropy(&sa.unwrap().dist, label)?,
                cross_entropy(&mil.unwrap().dist, label)?,
                zero,
                zero,
            )
        }
        Variant::DqSd => {
            need(sa.is_some(), "sa")?;
            need(mil.is_some(), "mil")?;
            let sa = sa.unwrap();
            let mil = mil.unwrap();
            (
                cross_entropy(&sa.dist, label)?,
                cross_entropy(&mil.dist, label)?,
                kl_divergence(&mil.dist, &sa.dist)?,
                hint_loss(&sa.token, &mil.token)?,
            )
        }
    };

    let total = ce_sa
        + F::from_f64(alpha) * ce_mil
        + F::from_f64(1.0 - alpha) * kl
        + F::from_f64(lambda) * hint;
    Ok(LossBreakdown {
        total,
        ce_sa,
        ce_mil,
        kl,
        hint,
    })
}

// ── Graph-side composition ──────────────────────────────────────────

/// Graph handles of the loss terms; missing terms read as zero.
pub struct LossIds {
    pub total: TensorId,
    pub ce_sa: Option<TensorId>,
    pub ce_mil: Option<TensorId>,
    pub kl: Option<TensorId>,
    pub hint: Option<TensorId>,
}

impl LossIds {
    pub fn breakdown<F: Scalar>(&self, g: &Graph<F>) -> LossBreakdown<F> {
        let read = |id: Option<TensorId>| id.map(|i| g.scalar_value(i)).unwrap_or(F::ZERO);
        LossBreakdown {
            total: g.scalar_value(self.total),
            ce_sa: read(self.ce_sa),
            ce_mil: read(self.ce_mil),
            kl: read(self.kl),
            hint: read(self.hint),
        }
    }
}

fn graph_cross_entropy<F: Scalar>(
    g: &mut Graph<F>,
    dist: TensorId,
    label: usize,
) -> Result<TensorId> {
    let classes = g.shape(dist)[0];
    if label >= classes {
        return Err(CoreError::Label { label, classes });
    }
    let picked = g.pick(dist, label)?;
    let logp = g.ln_floor(picked, F::from_f64(PROB_FLOOR))?;
    g.scale(logp, -F::ONE)
}

/// Build the variant's objective inside the graph so it can be
/// backpropagated. Mirrors `self_distillation_loss` term by term.
pub fn sd_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    out: &BagOutputIds,
    label: usize,
    weights: &LossWeights,
    variant: Variant,
) -> Result<LossIds> {
    weights.validate()?;
    let (alpha, lambda) = effective_weights(variant, weights);
    let floor = F::from_f64(PROB_FLOOR);

    let need = |id: Option<TensorId>, what: &'static str| {
        id.ok_or_else(|| {
            CoreError::Config(format!(
                "variant {} needs the {what} pathway output",
                variant.as_str()
            ))
        })
    };

    match variant {
        Variant::MilOnly => {
            let ce_mil = graph_cross_entropy(g, need(out.mil_dist, "mil")?, label)?;
            Ok(LossIds {
                total: ce_mil,
                ce_sa: None,
                ce_mil: Some(ce_mil),
                kl: None,
                hint: None,
            })
        }
        Variant::PerceiverOnly => {
            let ce_sa = graph_cross_entropy(g, need(out.sa_dist, "sa")?, label)?;
            Ok(LossIds {
                total: ce_sa,
                ce_sa: Some(ce_sa),
                ce_mil: None,
                kl: None,
                hint: None,
            })
        }
        Variant::DqCe => {
            let ce_sa = graph_cross_entropy(g, need(out.sa_dist, "sa")?, label)?;
            let ce_mil = graph_cross_entropy(g, need(out.mil_dist, "mil")?, label)?;
            let total = g.add(ce_sa, ce_mil)?;
            Ok(LossIds {
                total,
                ce_sa: Some(ce_sa),
                ce_mil: Some(ce_mil),
                kl: None,
                hint: None,
            })
        }
        Variant::DqSd => {
            let sa_dist = need(out.sa_dist, "sa")?;
            let mil_dist = need(out.mil_dist, "mil")?;
            let sa_token = need(out.sa_token, "sa")?;
            let mil_token = need(out.mil_token, "mil")?;

            let ce_sa = graph_cross_entropy(g, sa_dist, label)?;
            let ce_mil = graph_cross_entropy(g, mil_dist, label)?;

            // Teacher side: detached unless configured otherwise.
            let teacher_dist = if weights.detach_teacher {
                g.detach(sa_dist)?
            } else {
                sa_dist
            };
            let teacher_token = if weights.detach_teacher {
                g.detach(sa_token)?
            } else {
                sa_token
            };

            let ln_s = g.ln_floor(mil_dist, floor)?;
            let ln_t = g.ln_floor(teacher_dist, floor)?;
            let diff = g.sub(ln_s, ln_t)?;
            let weighted = g.mul(mil_dist, diff)?;
            let kl = g.sum_all(weighted)?;

            let delta = g.sub(teacher_token, mil_token)?;
            let hint = g.l2_norm_sq(delta)?;

            let ce_mil_w = g.scale(ce_mil, F::from_f64(alpha))?;
            let kl_w = g.scale(kl, F::from_f64(1.0 - alpha))?;
            let hint_w = g.scale(hint, F::from_f64(lambda))?;
            let total = g.add(ce_sa, ce_mil_w)?;
            let total = g.add(total, kl_w)?;
            let total = g.add(total, hint_w)?;
            Ok(LossIds {
                total,
                ce_sa: Some(ce_sa),
                ce_mil: Some(ce_mil),
                kl: Some(kl),
                hint: Some(hint),
            })
        }
    }
}
