use crate::align::softmax;
use crate::data::SymbolicWordFeatures;
use crate::error::{Error, Result};
use crate::prosody::{emd2_grad, emd2_unchecked, PauseCategory};

/// Logits of the three symbolic heads for one word.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymbolicLogits {
    pub schwa: [f64; 2],
    pub liaison: [f64; 2],
    pub pause: [f64; PauseCategory::COUNT],
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

fn check_target(target: &[f64], n: usize) -> Result<()> {
    if target.len() != n {
        return Err(Error::Shape(format!("{n} logits, {} target weights", target.len())));
    }
    let s: f64 = target.iter().sum();
    if target.iter().any(|t| !(*t >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("target weights are not a distribution (sum {s})")));
    }
    Ok(())
}

/// Cross-entropy of token-weight logits against target attention weights.
pub fn style_weight_loss(pred_logits: &[f64], target: &[f64]) -> Result<f64> {
    check_target(target, pred_logits.len())?;
    Ok(-log_softmax(pred_logits).iter().zip(target).map(|(l, t)| t * l).sum::<f64>())
}

/// Gradient of [`style_weight_loss`] with respect to the logits.
pub fn style_weight_loss_grad(pred_logits: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_target(target, pred_logits.len())?;
    Ok(softmax(pred_logits).iter().zip(target).map(|(p, t)| p - t).collect())
}

fn one_hot<const N: usize>(i: usize) -> [f64; N] {
    let mut v = [0.0; N];
    v[i] = 1.0;
    v
}

fn ce_grad<const N: usize>(z: &[f64; N], k: usize) -> [f64; N] {
    let p = softmax(z);
    let mut g = [0.0; N];
    for i in 0..N {
        g[i] = p[i] - if i == k { 1.0 } else { 0.0 };
    }
    g
}

/// Cross-entropy of the schwa, liaison and pause heads plus `beta` times
/// the squared EMD between the pause distribution and the one-hot target.
pub fn symbolic_loss(pred: &SymbolicLogits, target: &SymbolicWordFeatures, beta: f64) -> f64 {
    let k = target.pause.index();
    let ce = -log_softmax(&pred.schwa)[target.schwa.index()]
        - log_softmax(&pred.liaison)[target.liaison.index()]
        - log_softmax(&pred.pause)[k];
    let emd = emd2_unchecked(&softmax(&pred.pause), &one_hot::<{ PauseCategory::COUNT }>(k));
    ce + beta * emd
}

pub fn symbolic_loss_grad(pred: &SymbolicLogits, target: &SymbolicWordFeatures, beta: f64) -> SymbolicLogits {
    let k = target.pause.index();
    let mut pause = ce_grad(&pred.pause, k);
    if beta != 0.0 {
        // chain the EMD gradient through the softmax Jacobian
        let p = softmax(&pred.pause);
        let gp = emd2_grad(&p, &one_hot::<{ PauseCategory::COUNT }>(k));
        let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
        for i in 0..pause.len() {
            pause[i] += beta * p[i] * (gp[i] - dot);
        }
    }
    SymbolicLogits {
        schwa: ce_grad(&pred.schwa, target.schwa.index()),
        liaison: ce_grad(&pred.liaison, target.liaison.index()),
        pause,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Liaison, Schwa};
    use approx::assert_abs_diff_eq;

    fn feats(pause: PauseCategory) -> SymbolicWordFeatures {
        SymbolicWordFeatures {
            schwa: Schwa::Reduced,
            liaison: Liaison::Realized,
            pause,
        }
    }

    #[test]
    fn uniform_cases_give_ln_ten() {
        let z = [0.0; 10];
        assert_abs_diff_eq!(style_weight_loss(&z, &[0.1; 10]).unwrap(), 10f64.ln(), epsilon = 1e-12);
        let mut t = [0.0; 10];
        t[0] = 0.5;
        t[1] = 0.5;
        assert_abs_diff_eq!(style_weight_loss(&z, &t).unwrap(), 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_match_goes_to_zero() {
        let mut z = [0.0; 10];
        z[3] = 40.0;
        let mut t = [0.0; 10];
        t[3] = 1.0;
        assert!(style_weight_loss(&z, &t).unwrap() < 1e-12);
        assert!(style_weight_loss(&z, &[0.5; 10]).is_err());
        assert!(style_weight_loss(&z, &[0.5; 2]).is_err());
    }

    #[test]
    fn far_pause_confusion_costs_more() {
        // all mass on class 0: EMD term against class 4 is 4, against class 1 is 1
        let z = SymbolicLogits {
            schwa: [0.0, 50.0],
            liaison: [50.0, 0.0],
            pause: [50.0, 0.0, 0.0, 0.0, 0.0],
        };
        let ce4 = symbolic_loss(&z, &feats(PauseCategory::ExtraLong), 0.0);
        let ce1 = symbolic_loss(&z, &feats(PauseCategory::Short), 0.0);
        assert_abs_diff_eq!(ce4, ce1, epsilon = 1e-9);
        assert_abs_diff_eq!(symbolic_loss(&z, &feats(PauseCategory::ExtraLong), 1.0) - ce4, 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(symbolic_loss(&z, &feats(PauseCategory::Short), 1.0) - ce1, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn saturated_prediction_has_no_loss() {
        let z = SymbolicLogits {
            schwa: [0.0, 60.0],
            liaison: [60.0, 0.0],
            pause: [0.0, 0.0, 60.0, 0.0, 0.0],
        };
        assert!(symbolic_loss(&z, &feats(PauseCategory::Medium), 2.0) < 1e-12);
    }
}
