//! Differentiable training objectives.
//!
//! Segmentation losses take soft masks `p` and targets `g`, both `N`-channel
//! volumes (channel 0 is background). Per foreground class `c` the soft
//! Tversky index is
//!
//! ```text
//! TI_c = (TP + ε) / (TP + α·FP + β·FN + ε)
//! TP = Σ p_c g_c,   FP = Σ p_c (1 − g_c),   FN = Σ (1 − p_c) g_c
//! ```
//!
//! and the loss is the mean of `1 − TI_c` over foreground classes. The
//! background channel never enters the loss directly.
//!
//! The quantile losses work on plain `f64` predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Volume};

/// FP weight `alpha`, FN weight `beta`, smoothing `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl TverskyParams {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        Self::with_epsilon(alpha, beta, Self::DEFAULT_EPSILON)
    }

    pub fn with_epsilon(alpha: f64, beta: f64, epsilon: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::config(format!(
                "Tversky weights must be nonnegative, got alpha={alpha}, beta={beta}"
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::config(format!("Tversky epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self {
            alpha,
            beta,
            epsilon,
        })
    }

    pub fn dice() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }
}

/// The single hyperparameter of the three-head loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriadLossConfig {
    gamma: f64,
}

impl TriadLossConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 0.5) {
            return Err(Error::config(format!(
                "gamma must lie in the open interval (0, 0.5), got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Tversky weights of the (lower, mean, upper) heads.
    pub fn head_params(&self, epsilon: f64) -> [TverskyParams; 3] {
        let g = self.gamma;
        [
            TverskyParams {
                alpha: 1.0 - g,
                beta: g,
                epsilon,
            },
            TverskyParams {
                alpha: 0.5,
                beta: 0.5,
                epsilon,
            },
            TverskyParams {
                alpha: g,
                beta: 1.0 - g,
                epsilon,
            },
        ]
    }
}

fn check_pair<T: Real>(p: &Volume<T>, g: &Volume<T>) -> Result<()> {
    if p.channels() != g.channels() || p.dims() != g.dims() {
        return Err(Error::shape(
            "segmentation loss",
            (g.channels(), g.dims()),
            (p.channels(), p.dims()),
        ));
    }
    if p.channels() < 2 {
        return Err(Error::shape("segmentation loss (classes >= 2)", 2, p.channels()));
    }
    Ok(())
}

/// Soft (TP, FP, FN) of one class channel.
fn confusion<T: Real>(p: &[T], g: &[T]) -> (f64, f64, f64) {
    let (mut tp, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(g) {
        let (pi, gi) = (pi.f64(), gi.f64());
        tp += pi * gi;
        sp += pi;
        sg += gi;
    }
    (tp, sp - tp, sg - tp)
}

fn index_of(tp: f64, fp: f64, fneg: f64, prm: &TverskyParams) -> (f64, f64, f64) {
    let num = tp + prm.epsilon;
    let den = tp + prm.alpha * fp + prm.beta * fneg + prm.epsilon;
    (num / den, num, den)
}

pub fn tversky_loss<T: Real>(p: &Volume<T>, g: &Volume<T>, params: &TverskyParams) -> Result<T> {
    check_pair(p, g)?;
    let n = p.channels();
    let mut total = 0.0;
    for c in 1..n {
        let (tp, fp, fneg) = confusion(p.channel(c), g.channel(c));
        let (ti, _, _) = index_of(tp, fp, fneg, params);
        total += 1.0 - ti;
    }
    Ok(T::of(total / (n - 1) as f64))
}

/// Loss value and its gradient with respect to `p`.
pub fn tversky_loss_grad<T: Real>(
    p: &Volume<T>,
    g: &Volume<T>,
    params: &TverskyParams,
) -> Result<(T, Volume<T>)> {
    check_pair(p, g)?;
    let n = p.channels();
    let scale = 1.0 / (n - 1) as f64;
    let mut grad = Volume::zeros(n, p.dims());
    let mut total = 0.0;
    for c in 1..n {
        let (tp, fp, fneg) = confusion(p.channel(c), g.channel(c));
        let (ti, num, den) = index_of(tp, fp, fneg, params);
        total += 1.0 - ti;
        // dTI/dp = (g·den − num·(g + α(1−g) − βg)) / den²
        let inv_den2 = 1.0 / (den * den);
        let (a, b) = (params.alpha, params.beta);
        for (dst, &gi) in grad.channel_mut(c).iter_mut().zip(g.channel(c)) {
            let gi = gi.f64();
            let dden = gi + a * (1.0 - gi) - b * gi;
            let dti = (gi * den - num * dden) * inv_den2;
            *dst = T::of(-dti * scale);
        }
    }
    Ok((T::of(total * scale), grad))
}

pub fn dice_loss<T: Real>(p: &Volume<T>, g: &Volume<T>) -> Result<T> {
    tversky_loss(p, g, &TverskyParams::dice())
}

pub fn dice_loss_grad<T: Real>(p: &Volume<T>, g: &Volume<T>) -> Result<(T, Volume<T>)> {
    tversky_loss_grad(p, g, &TverskyParams::dice())
}

/// Sum of the lower (FP-averse), mean (Dice) and upper (FN-averse) Tversky
/// terms.
pub fn triad_loss<T: Real>(
    p_lower: &Volume<T>,
    p_mean: &Volume<T>,
    p_upper: &Volume<T>,
    g: &Volume<T>,
    cfg: &TriadLossConfig,
) -> Result<T> {
    let [pl, pm, pu] = cfg.head_params(TverskyParams::DEFAULT_EPSILON);
    Ok(tversky_loss(p_lower, g, &pl)? + tversky_loss(p_mean, g, &pm)? + tversky_loss(p_upper, g, &pu)?)
}

/// Triad loss and its gradients with respect to each head's probabilities.
pub fn triad_loss_grad<T: Real>(
    heads: [&Volume<T>; 3],
    g: &Volume<T>,
    cfg: &TriadLossConfig,
) -> Result<(T, [Volume<T>; 3])> {
    let [pl, pm, pu] = cfg.head_params(TverskyParams::DEFAULT_EPSILON);
    let (ll, gl) = tversky_loss_grad(heads[0], g, &pl)?;
    let (lm, gm) = tversky_loss_grad(heads[1], g, &pm)?;
    let (lu, gu) = tversky_loss_grad(heads[2], g, &pu)?;
    Ok((ll + lm + lu, [gl, gm, gu]))
}

fn check_quantile(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::config(format!("quantile level must lie in (0, 1), got {t}")));
    }
    Ok(())
}

/// `max(t·(y − ŷ), (t − 1)·(y − ŷ))`.
pub fn pinball_loss(pred: f64, target: f64, t: f64) -> Result<f64> {
    check_quantile(t)?;
    let u = target - pred;
    Ok((t * u).max((t - 1.0) * u))
}

/// Derivative of [`pinball_loss`] with respect to `pred` (0 at the kink).
pub fn pinball_grad(pred: f64, target: f64, t: f64) -> Result<f64> {
    check_quantile(t)?;
    let u = target - pred;
    Ok(if u > 0.0 {
        -t
    } else if u < 0.0 {
        1.0 - t
    } else {
        0.0
    })
}

/// Quantile levels `(α/2, 0.5, 1 − α/2)` of the compound loss.
pub fn compound_levels(alpha: f64) -> Result<[f64; 3]> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok([alpha / 2.0, 0.5, 1.0 - alpha / 2.0])
}

fn check_compound(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != 3 * targets.len() {
        return Err(Error::shape("pinball_compound_loss", 3 * targets.len(), preds.len()));
    }
    Ok(())
}

/// Sum over classes of `P_{α/2}(lower) + P_{0.5}(median) + P_{1−α/2}(upper)`.
///
/// `preds` holds `(lower, median, upper)` triples per class.
pub fn pinball_compound_loss(preds: &[f64], targets: &[f64], alpha: f64) -> Result<f64> {
    check_compound(preds, targets)?;
    let levels = compound_levels(alpha)?;
    let mut total = 0.0;
    for (triple, &y) in preds.chunks_exact(3).zip(targets) {
        for (&pred, &t) in triple.iter().zip(&levels) {
            total += pinball_loss(pred, y, t)?;
        }
    }
    Ok(total)
}

pub fn pinball_compound_grad(preds: &[f64], targets: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    check_compound(preds, targets)?;
    let levels = compound_levels(alpha)?;
    let mut grad = Vec::with_capacity(preds.len());
    for (triple, &y) in preds.chunks_exact(3).zip(targets) {
        for (&pred, &t) in triple.iter().zip(&levels) {
            grad.push(pinball_grad(pred, y, t)?);
        }
    }
    Ok((pinball_compound_loss(preds, targets, alpha)?, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::one_hot;
    use proptest::prelude::*;

    /// Two-class hard masks over `n` voxels from explicit foreground sets.
    fn hard_pair(pred: &[u8], truth: &[u8]) -> (Volume<f64>, Volume<f64>) {
        let dims = [1, 1, pred.len()];
        (one_hot(pred, 2, dims).unwrap(), one_hot(truth, 2, dims).unwrap())
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let (p, g) = hard_pair(&[1, 0, 1, 1], &[1, 0, 1, 1]);
        let prm = TverskyParams::new(0.3, 0.7).unwrap();
        assert_eq!(tversky_loss(&p, &g, &prm).unwrap(), 0.0);
    }

    #[test]
    fn tversky_hand_example() {
        // TP=2, FP=1, FN=1
        let (p, g) = hard_pair(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]);
        let prm = TverskyParams::with_epsilon(0.3, 0.7, 0.0).unwrap();
        let loss = tversky_loss(&p, &g, &prm).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_hand_examples() {
        let (p, g) = hard_pair(&[1, 1, 0], &[0, 1, 1]);
        let prm = TverskyParams::with_epsilon(0.5, 0.5, 0.0).unwrap();
        assert!((tversky_loss(&p, &g, &prm).unwrap() - 0.5).abs() < 1e-15);

        let (p, g) = hard_pair(&[1, 1, 0, 0], &[0, 0, 1, 1]);
        let prm = TverskyParams::with_epsilon(0.5, 0.5, 1e-12).unwrap();
        assert!((tversky_loss(&p, &g, &prm).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(
            dice_loss(&p, &g).unwrap(),
            tversky_loss(&p, &g, &TverskyParams::dice()).unwrap()
        );
    }

    #[test]
    fn triad_gamma_bounds() {
        assert!(TriadLossConfig::new(0.5).is_err());
        assert!(TriadLossConfig::new(0.0).is_err());
        assert!(TriadLossConfig::new(0.2).is_ok());
        let [l, m, u] = TriadLossConfig::new(0.2).unwrap().head_params(0.0);
        assert_eq!((l.alpha, l.beta), (0.8, 0.2));
        assert_eq!((m.alpha, m.beta), (0.5, 0.5));
        assert_eq!((u.alpha, u.beta), (0.2, 0.8));
    }

    #[test]
    fn triad_zero_at_perfection() {
        let (p, g) = hard_pair(&[1, 0, 1], &[1, 0, 1]);
        let cfg = TriadLossConfig::new(0.1).unwrap();
        assert_eq!(triad_loss(&p, &p, &p, &g, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Volume::<f64>::zeros(2, [1, 1, 3]);
        let g = Volume::<f64>::zeros(3, [1, 1, 3]);
        assert!(tversky_loss(&p, &g, &TverskyParams::dice()).is_err());
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(2.0, 2.0, 0.3).unwrap(), 0.0);
        assert!((pinball_loss(0.0, 1.0, 0.9).unwrap() - 0.9).abs() < 1e-15);
        assert!((pinball_loss(1.0, 0.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!((pinball_loss(1.0, 3.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!(pinball_loss(1.0, 3.0, 1.0).is_err());
        assert!(pinball_loss(1.0, 3.0, 0.0).is_err());
    }

    #[test]
    fn compound_examples() {
        let l = pinball_compound_loss(&[9.0, 10.0, 11.0], &[10.0], 0.1).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert_eq!(pinball_compound_loss(&[1.0, 1.0, 1.0, 2.0, 2.0, 2.0], &[1.0, 2.0], 0.1).unwrap(), 0.0);
        assert!(pinball_compound_loss(&[1.0, 2.0], &[1.0], 0.1).is_err());

        let preds = [1.0, 2.5, 4.0, 0.5, 0.7, 3.0, 5.0, 6.0, 6.5];
        let targets = [2.0, 1.0, 6.2];
        let looped: f64 = (0..3)
            .map(|c| pinball_compound_loss(&preds[3 * c..3 * c + 3], &targets[c..c + 1], 0.1).unwrap())
            .sum();
        assert!((pinball_compound_loss(&preds, &targets, 0.1).unwrap() - looped).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pinball_nonnegative_and_zero_only_at_target(
            pred in -50.0f64..50.0, target in -50.0f64..50.0, t in 0.01f64..0.99
        ) {
            let l = pinball_loss(pred, target, t).unwrap();
            prop_assert!(l >= 0.0);
            if pred != target {
                prop_assert!(l > 0.0);
            }
        }

        #[test]
        fn tversky_loss_in_unit_interval(
            probs in prop::collection::vec(0.0f64..1.0, 8),
            labels in prop::collection::vec(0u8..2, 8),
            alpha in 0.0f64..1.0, beta in 0.0f64..1.0,
        ) {
            let dims = [1, 2, 4];
            let mut data = probs.iter().map(|p| 1.0 - p).collect::<Vec<_>>();
            data.extend_from_slice(&probs);
            let p = Volume::from_vec(2, dims, data).unwrap();
            let g = one_hot(&labels, 2, dims).unwrap();
            let l: f64 = tversky_loss(&p, &g, &TverskyParams::new(alpha, beta).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }
    }
}
