//! Label-smoothed negative log-likelihood and the context-discounted loss.
//!
//! Losses are sums over tokens, never means; normalization by token count
//! happens in the optimizer step so that the context/current weighting is
//! exact whatever the segment lengths.

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Discount on context-token losses, in `[0, 1]`; 1 is the standard loss.
    pub cd: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cd: 0.5,
            label_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cd) {
            return Err(Error::Config(format!("context discount {} outside [0, 1]", self.cd)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Context and current parts of a context-discounted loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdLoss {
    pub total: f64,
    pub context: f64,
    pub current: f64,
}

fn check_shapes(logprobs: &ArrayView2<'_, f64>, targets: &[TokenId], pad_mask: Option<&[bool]>) -> Result<()> {
    if logprobs.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} rows of log-probabilities for {} targets",
            logprobs.nrows(),
            targets.len()
        )));
    }
    if logprobs.ncols() < 2 {
        return Err(Error::Shape("label smoothing needs at least two classes".into()));
    }
    if let Some(m) = pad_mask {
        if m.len() != targets.len() {
            return Err(Error::Shape(format!(
                "pad mask of {} for {} targets",
                m.len(),
                targets.len()
            )));
        }
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logprobs.ncols()) {
        return Err(Error::TokenOutOfRange {
            id: t as usize,
            size: logprobs.ncols(),
        });
    }
    Ok(())
}

fn token_loss(row: ArrayView1<'_, f64>, target: usize, eps: f64) -> f64 {
    let nll = -row[target];
    if eps == 0.0 {
        return nll;
    }
    let others = -row.sum() - nll;
    (1.0 - eps) * nll + eps / (row.len() - 1) as f64 * others
}

/// `Σ_t (1-ε)·(-log p[y_t]) + ε/(V-1)·Σ_{v≠y_t} (-log p[v])` over rows not
/// flagged in `pad_mask` (`true` = padding).
pub fn nll(logprobs: ArrayView2<'_, f64>, targets: &[TokenId], eps: f64, pad_mask: Option<&[bool]>) -> Result<f64> {
    nll_range(logprobs, targets, eps, pad_mask, 0..targets.len())
}

fn nll_range(
    logprobs: ArrayView2<'_, f64>,
    targets: &[TokenId],
    eps: f64,
    pad_mask: Option<&[bool]>,
    range: std::ops::Range<usize>,
) -> Result<f64> {
    check_shapes(&logprobs, targets, pad_mask)?;
    Ok(range
        .filter(|&t| !pad_mask.is_some_and(|m| m[t]))
        .map(|t| token_loss(logprobs.row(t), targets[t] as usize, eps))
        .sum())
}

/// `CD·L_context + L_current`, splitting the targets at `current_start`.
pub fn cd_loss(
    logprobs: ArrayView2<'_, f64>,
    targets: &[TokenId],
    cfg: &LossConfig,
    current_start: usize,
    pad_mask: Option<&[bool]>,
) -> Result<CdLoss> {
    cfg.validate()?;
    if current_start > targets.len() {
        return Err(Error::Shape(format!(
            "current sentence starts at {current_start} beyond {} targets",
            targets.len()
        )));
    }
    let eps = cfg.label_smoothing;
    let context = nll_range(logprobs, targets, eps, pad_mask, 0..current_start)?;
    let current = nll_range(logprobs, targets, eps, pad_mask, current_start..targets.len())?;
    Ok(CdLoss {
        total: cfg.cd * context + current,
        context,
        current,
    })
}

/// Gradient of [`cd_loss`] with respect to the log-probabilities. The loss
/// is linear in them, so this is a fixed weighting per token.
pub fn cd_loss_grad(
    logprobs: ArrayView2<'_, f64>,
    targets: &[TokenId],
    cfg: &LossConfig,
    current_start: usize,
    pad_mask: Option<&[bool]>,
) -> Result<Mat> {
    cfg.validate()?;
    check_shapes(&logprobs, targets, pad_mask)?;
    if current_start > targets.len() {
        return Err(Error::Shape(format!(
            "current sentence starts at {current_start} beyond {} targets",
            targets.len()
        )));
    }
    let v = logprobs.ncols();
    let eps = cfg.label_smoothing;
    let off = -eps / (v - 1) as f64;
    let mut g = Mat::zeros(logprobs.dim());
    for (t, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        if pad_mask.is_some_and(|m| m[t]) {
            continue;
        }
        let w = if t < current_start { cfg.cd } else { 1.0 };
        row.fill(w * off);
        row[targets[t] as usize] = -w * (1.0 - eps);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_and_perfect() {
        let v = 7;
        let lp = Mat::from_elem((1, v), -(v as f64).ln());
        assert_abs_diff_eq!(
            nll(lp.view(), &[3], 0.0, None).unwrap(),
            (v as f64).ln(),
            epsilon = 1e-12
        );
        let mut lp = Mat::from_elem((1, 3), -50.0);
        lp[[0, 1]] = 0.0;
        assert_abs_diff_eq!(nll(lp.view(), &[1], 0.0, None).unwrap(), 0.0);
    }

    #[test]
    fn smoothed_hand_value() {
        let lp = array![[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]];
        let expected = 0.9 * -(0.7f64.ln()) + 0.05 * (-(0.2f64.ln()) - 0.1f64.ln());
        assert_abs_diff_eq!(expected, 0.516609, epsilon = 1e-6);
        assert_abs_diff_eq!(nll(lp.view(), &[0], 0.1, None).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn pad_rows_excluded_and_errors() {
        let lp = array![[0.5f64.ln(), 0.5f64.ln()], [0.9f64.ln(), 0.1f64.ln()]];
        let with_pad = nll(lp.view(), &[0, 1], 0.0, Some(&[false, true])).unwrap();
        assert_abs_diff_eq!(with_pad, 2f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            nll(lp.view(), &[0, 2], 0.0, None),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(nll(lp.view(), &[0], 0.0, None).is_err());
        let cfg = LossConfig {
            cd: 0.5,
            label_smoothing: 0.0,
        };
        assert!(cd_loss(lp.view(), &[0, 1], &cfg, 3, None).is_err());
        assert!(cd_loss(lp.view(), &[0, 1], &LossConfig { cd: 1.5, ..cfg }, 1, None).is_err());
    }

    #[test]
    fn cd_hand_value() {
        // context token p=e^-2, current token p=e^-3: L_context=2, L_current=3
        let mut lp = Mat::from_elem((2, 2), 0.0);
        lp[[0, 0]] = -2.0;
        lp[[0, 1]] = (1.0 - (-2f64).exp()).ln();
        lp[[1, 1]] = -3.0;
        lp[[1, 0]] = (1.0 - (-3f64).exp()).ln();
        let cfg = LossConfig {
            cd: 0.5,
            label_smoothing: 0.0,
        };
        let l = cd_loss(lp.view(), &[0, 1], &cfg, 1, None).unwrap();
        assert_abs_diff_eq!(l.context, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.current, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.total, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn nll_decreases_toward_target() {
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let lp = array![[f64::ln(p), f64::ln((1.0 - p) / 2.0), f64::ln((1.0 - p) / 2.0)]];
            let l = nll(lp.view(), &[0], 0.0, None).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn grad_matches_difference_quotient() {
        let lp = array![[-1.0, -2.0, -0.5], [-0.3, -1.1, -2.2], [-0.7, -0.9, -1.3]];
        let targets = [2, 0, 1];
        let cfg = LossConfig {
            cd: 0.3,
            label_smoothing: 0.1,
        };
        let g = cd_loss_grad(lp.view(), &targets, &cfg, 1, None).unwrap();
        // linear in logprobs, so a unit step is exact
        for idx in ndarray::indices(lp.dim()) {
            let mut bumped = lp.clone();
            bumped[idx] += 1.0;
            let d = cd_loss(bumped.view(), &targets, &cfg, 1, None).unwrap().total
                - cd_loss(lp.view(), &targets, &cfg, 1, None).unwrap().total;
            assert_abs_diff_eq!(g[idx], d, epsilon = 1e-12);
        }
    }
}
