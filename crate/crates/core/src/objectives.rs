//! Task losses, pseudo-labels, consistency losses and the combined objective
//! `α·L_S + (1−α)·L_T + MSE(r_S, r_T) + KL(p_S ‖ p_T)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Structured,
    Span,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Structured => "structured",
            TaskKind::Span => "span",
        }
    }

    /// Balance weight `α` and scheduled-sampling decay `k` tuned per task family.
    pub fn default_alpha(self) -> f64 {
        match self {
            TaskKind::Classification => 0.4,
            TaskKind::Structured => 0.8,
            TaskKind::Span => 0.2,
        }
    }

    pub fn default_schedule_k(self) -> f64 {
        match self {
            TaskKind::Classification | TaskKind::Structured => 1000.0,
            TaskKind::Span => 2000.0,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "structured" => Ok(TaskKind::Structured),
            "span" => Ok(TaskKind::Span),
            other => Err(Error::invalid(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task_source: f64,
    pub task_target: f64,
    pub mse: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_source: f64,
    pub task_target: f64,
    pub mse: f64,
    pub kl: f64,
    pub total: f64,
    pub alpha: f64,
}

fn check_distribution(op: &'static str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE || p.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid(format!("{op}: not a probability distribution (sum {s})")));
    }
    Ok(())
}

fn floored_ln(p: f64) -> f64 {
    if p < PROB_FLOOR {
        log::debug!("probability {p:e} clamped to {PROB_FLOOR:e}");
    }
    p.max(PROB_FLOOR).ln()
}

/// `−Σⱼ yⱼ log pⱼ`.
pub fn classification_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape("classification_loss", format!("{} probs vs {} labels", p.len(), y.len())));
    }
    check_distribution("classification_loss", p)?;
    check_distribution("classification_loss", y)?;
    let loss: f64 = -p
        .iter()
        .zip(y)
        .filter(|(_, &yj)| yj != 0.0)
        .map(|(&pj, &yj)| yj * floored_ln(pj))
        .sum::<f64>();
    Ok(loss.max(0.0))
}

/// Sum of per-token cross-entropies over unmasked rows.
pub fn token_level_loss(p: &Tensor, y: &Tensor, mask: &[bool]) -> Result<f64> {
    if !p.same_shape(y) || mask.len() != p.rows() {
        return Err(Error::shape("token_level_loss", "probabilities, labels and mask disagree"));
    }
    let mut total = 0.0;
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            total += classification_loss(p.row(i), y.row(i))?;
        }
    }
    Ok(total)
}

/// Source-head predictions reused verbatim as soft targets for the target stream.
pub fn pseudo_labels(source_probs: &Tensor) -> Result<Tensor> {
    for i in 0..source_probs.rows() {
        check_distribution("pseudo_labels", source_probs.row(i))?;
    }
    Ok(source_probs.clone())
}

/// Tape form of [`pseudo_labels`]: the returned node has no path back to `source_probs`.
pub fn pseudo_labels_vars(tape: &mut Tape, source_probs: Var) -> Result<Var> {
    pseudo_labels(tape.value(source_probs))?;
    Ok(tape.detach(source_probs))
}

/// `KL(p ‖ q) = Σ p (log p − log q)` with floored logs.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", "length mismatch"));
    }
    check_distribution("kl_divergence", p)?;
    check_distribution("kl_divergence", q)?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (floored_ln(a) - floored_ln(b)))
        .sum();
    Ok(kl.max(0.0))
}

pub fn mean_squared_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("mse", format!("{} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `(MSE(r_S, r_T), KL(p_S ‖ p_T))`; the KL term only exists for classification.
pub fn consistency_loss(
    r_s: &[f64],
    r_t: &[f64],
    p_s: Option<&[f64]>,
    p_t: Option<&[f64]>,
    kind: TaskKind,
) -> Result<(f64, f64)> {
    let mse = mean_squared_error(r_s, r_t)?;
    let kl = match (kind, p_s, p_t) {
        (TaskKind::Classification, Some(ps), Some(pt)) => kl_divergence(ps, pt)?,
        (TaskKind::Classification, _, _) => {
            return Err(Error::invalid("classification consistency needs both prediction vectors"))
        }
        (_, None, None) => 0.0,
        _ => return Err(Error::invalid("prediction consistency only applies to classification")),
    };
    Ok((mse, kl))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// Combines task and consistency parts; `kl` must be zero outside classification.
pub fn total_loss(parts: LossParts, alpha: f64, kind: TaskKind) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    if kind != TaskKind::Classification && parts.kl != 0.0 {
        return Err(Error::invalid("KL consistency is only defined for classification"));
    }
    let total = alpha * parts.task_source + (1.0 - alpha) * parts.task_target + parts.mse + parts.kl;
    Ok(LossBreakdown {
        task_source: parts.task_source,
        task_target: parts.task_target,
        mse: parts.mse,
        kl: parts.kl,
        total,
        alpha,
    })
}

// ── tape forms ─────────────────────────────────────────────────────────

/// `−Σ_{i ∈ rows} Σⱼ Yᵢⱼ log Pᵢⱼ`; `targets` should be a constant or detached node.
pub fn cross_entropy_vars(tape: &mut Tape, probs: Var, targets: Var, rows: &[usize]) -> Result<Var> {
    let logp = tape.log_clamped(probs, PROB_FLOOR);
    let prod = tape.mul(targets, logp)?;
    let n_rows = tape.value(prod).rows();
    let selected = if rows.len() == n_rows && rows.iter().enumerate().all(|(i, &r)| i == r) {
        prod
    } else {
        if rows.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        tape.gather_rows(prod, rows)?
    };
    let s = tape.sum(selected);
    Ok(tape.scale(s, -1.0))
}

pub fn mse_vars(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).len() as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n))
}

/// `KL(p ‖ q)` with gradients into both arguments.
pub fn kl_vars(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let lp = tape.log_clamped(p, PROB_FLOOR);
    let lq = tape.log_clamped(q, PROB_FLOOR);
    let diff = tape.sub(lp, lq)?;
    let prod = tape.mul(p, diff)?;
    Ok(tape.sum(prod))
}

/// Tape handles for the loss parts of one example (or batch).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub task_source: Var,
    pub task_target: Var,
    pub mse: Option<Var>,
    pub kl: Option<Var>,
}

/// `α·L_S + (1−α)·L_T + MSE + KL`, summed in that order.
pub fn total_loss_vars(tape: &mut Tape, parts: &LossVars, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let s = tape.scale(parts.task_source, alpha);
    let t = tape.scale(parts.task_target, 1.0 - alpha);
    let mut total = tape.add(s, t)?;
    if let Some(mse) = parts.mse {
        total = tape.add(total, mse)?;
    }
    if let Some(kl) = parts.kl {
        total = tape.add(total, kl)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_match_has_zero_loss() {
        assert_eq!(classification_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_ln_c() {
        let p = [1.0 / 3.0; 3];
        let l = classification_loss(&p, &[1.0, 0.0, 0.0]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_label_matches_calculator() {
        // −(0.5·ln 0.9 + 0.5·ln 0.1), evaluated by hand.
        let l = classification_loss(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!((l - 1.203972804325936).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_probability_is_floored() {
        let l = classification_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn token_loss_ignores_masked_rows() {
        let p = Tensor::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = token_level_loss(&p, &y, &[true, false]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let exact = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(token_level_loss(&exact, &exact, &[true, true]).unwrap(), 0.0);
    }

    #[test]
    fn two_token_hand_case() {
        // −ln 0.8 − ln 0.3
        let p = Tensor::from_rows(&[vec![0.8, 0.2], vec![0.7, 0.3]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = token_level_loss(&p, &y, &[true, true]).unwrap();
        assert!((l - 1.4271163556401458).abs() < 1e-12, "{l}");
    }

    #[test]
    fn pseudo_labels_pass_through_and_validate() {
        let one_hot = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(pseudo_labels(&one_hot).unwrap(), one_hot);
        let uniform = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(pseudo_labels(&uniform).unwrap(), uniform);
        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(pseudo_labels(&bad).is_err());
    }

    #[test]
    fn consistency_terms() {
        let (mse, kl) =
            consistency_loss(&[1.0, 2.0], &[1.0, 2.0], Some(&[0.3, 0.7]), Some(&[0.3, 0.7]), TaskKind::Classification)
                .unwrap();
        assert_eq!((mse, kl), (0.0, 0.0));
        // 0.8·ln(0.8/0.5) + 0.2·ln(0.2/0.5)
        let (_, kl) =
            consistency_loss(&[0.0], &[0.0], Some(&[0.8, 0.2]), Some(&[0.5, 0.5]), TaskKind::Classification).unwrap();
        assert!((kl - 0.19274475702175742).abs() < 1e-12, "{kl}");
        let (mse, kl) = consistency_loss(&[0.0, 0.0], &[1.0, 3.0], None, None, TaskKind::Structured).unwrap();
        assert_eq!((mse, kl), (5.0, 0.0));
        assert!(consistency_loss(&[0.0], &[0.0, 1.0], None, None, TaskKind::Span).is_err());
    }

    #[test]
    fn total_loss_combinations() {
        let parts = LossParts {
            task_source: 2.0,
            task_target: 1.0,
            mse: 0.0,
            kl: 0.0,
        };
        assert_eq!(total_loss(parts, 1.0, TaskKind::Classification).unwrap().total, 2.0);
        let parts = LossParts {
            task_source: 1.5,
            task_target: 0.5,
            mse: 0.25,
            kl: 0.125,
        };
        let b = total_loss(parts, 0.4, TaskKind::Classification).unwrap();
        assert!((b.total - (0.6 + 0.3 + 0.25 + 0.125)).abs() < 1e-15);
        assert_eq!(total_loss(LossParts::default(), 0.4, TaskKind::Span).unwrap().total, 0.0);
        assert!(total_loss(parts, 1.5, TaskKind::Classification).is_err());
    }

    #[test]
    fn task_defaults() {
        assert_eq!(TaskKind::Classification.default_alpha(), 0.4);
        assert_eq!(TaskKind::Structured.default_alpha(), 0.8);
        assert_eq!(TaskKind::Span.default_alpha(), 0.2);
        assert_eq!(TaskKind::Span.default_schedule_k(), 2000.0);
    }
}
