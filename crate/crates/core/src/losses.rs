//! Segmentation losses and the combined training objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::reconstruct::MaskLogits;

pub const DICE_EPS: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Mean pixel binary cross-entropy of `logits` against `target`.
pub fn bce_loss(g: &mut Graph, logits: Var, target: &Mask) -> Var {
    g.bce_with_logits(logits, Arc::new(target.as_f64()))
}

/// `1 − (2Σpy + ε)/(Σp + Σy + ε)` with `p = σ(logits)` and `ε = 1`.
pub fn dice_loss(g: &mut Graph, logits: Var, target: &Mask) -> Var {
    g.dice(logits, Arc::new(target.as_f64()), DICE_EPS)
}

/// `(1 − λ)(l_bce + l_dice) + λ·l_con`.
pub fn total_loss(l_bce: f64, l_dice: f64, l_con: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * (l_bce + l_dice) + lambda * l_con
}

pub fn validate_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config(format!("lambda {lambda} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_con: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// Graph handles for one episode's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub bce: Var,
    pub dice: Var,
    pub contrastive: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            l_bce: g.value(self.bce).item(),
            l_dice: g.value(self.dice).item(),
            l_con: self.contrastive.map_or(0.0, |c| g.value(c).item()),
            l_total: g.value(self.total).item(),
            lambda,
        }
    }
}

/// BCE and Dice each averaged over the initial and refined masks, combined
/// with the contrastive term. A missing contrastive term counts as zero.
pub fn episode_objective(
    g: &mut Graph,
    logits: MaskLogits,
    target: &Mask,
    contrastive: Option<Var>,
    lambda: f64,
) -> LossVars {
    let bi = bce_loss(g, logits.init, target);
    let bp = bce_loss(g, logits.pred, target);
    let di = dice_loss(g, logits.init, target);
    let dp = dice_loss(g, logits.pred, target);
    let half = |g: &mut Graph, a: Var, b: Var| {
        let s = g.add(a, b);
        g.scale(s, 0.5)
    };
    let bce = half(g, bi, bp);
    let dice = half(g, di, dp);
    let seg = g.add(bce, dice);
    let mut total = g.scale(seg, 1.0 - lambda);
    if let Some(c) = contrastive {
        let c = g.scale(c, lambda);
        total = g.add(total, c);
    }
    LossVars {
        bce,
        dice,
        contrastive,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_relative_error;
    use crate::autograd::sigmoid;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn eval(f: impl Fn(&mut Graph, Var, &Mask) -> Var, z: &[f64], m: &Mask) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new([1, m.height, m.width], z.to_vec()));
        let l = f(&mut g, v, m);
        g.value(l).item()
    }

    #[test]
    fn bce_examples() {
        let m = Mask::from_fn(3, 3, |y, x| (y + x) % 2 == 0);
        assert!((eval(bce_loss, &[0.0; 9], &m) - std::f64::consts::LN_2).abs() < 1e-12);
        let sat: Vec<f64> = m.data.iter().map(|&b| if b { 50.0 } else { -50.0 }).collect();
        assert!(eval(bce_loss, &sat, &m) < 1e-20);
        let z = [0.3, -1.2, 2.5, 0.0, -0.7, 4.0, -3.3, 1.1, 0.05];
        let naive: f64 = z
            .iter()
            .zip(&m.data)
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 9.0;
        assert!((eval(bce_loss, &z, &m) - naive).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let m = Mask::from_fn(4, 4, |y, _| y == 0);
        let hard = |pred: &Mask| -> Vec<f64> { pred.data.iter().map(|&b| if b { 60.0 } else { -60.0 }).collect() };
        assert!(eval(dice_loss, &hard(&m), &m) < 1e-12);
        let big = Mask::from_fn(40, 40, |y, _| y < 20);
        let disjoint = Mask::from_fn(40, 40, |y, _| y >= 20);
        assert!(eval(dice_loss, &hard(&disjoint), &big) > 0.998);
        let half = Mask::from_fn(4, 4, |y, x| (y == 0 && x < 2) || (y == 1 && x < 2));
        let l = eval(dice_loss, &hard(&half), &m);
        assert!((l - (1.0 - 5.0 / 9.0)).abs() < 1e-12, "{l}");
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 1.0, 1.0, 0.2) - 1.8).abs() < 1e-15);
        assert_eq!(total_loss(0.3, 0.4, 9.0, 0.0), 0.3 + 0.4);
        assert_eq!(total_loss(0.3, 0.4, 9.0, 1.0), 9.0);
        assert!(validate_lambda(1.5).is_err());
    }

    #[test]
    fn segmentation_gradients() {
        let m = Mask::from_fn(3, 4, |y, x| y * 4 + x < 5);
        let z = Tensor::new([1, 3, 4], vec![0.3, -1.2, 2.5, 0.0, -0.7, 4.0, -3.3, 1.1, 0.05, 0.9, -0.2, 1.7]);
        for f in [bce_loss, dice_loss] {
            let err = max_relative_error(std::slice::from_ref(&z), 1e-6, |g, v| f(g, v[0], &m));
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn objective_matches_breakdown() {
        let m = Mask::from_fn(2, 2, |y, _| y == 0);
        let mut g = Graph::new();
        let init = g.constant(Tensor::new([1, 2, 2], vec![0.5, -0.5, 1.0, 2.0]));
        let pred = g.constant(Tensor::new([1, 2, 2], vec![1.5, 0.5, -1.0, -2.0]));
        let con = g.constant(Tensor::scalar(-0.8));
        let vars = episode_objective(&mut g, MaskLogits { init, pred }, &m, Some(con), 0.2);
        let b = vars.breakdown(&g, 0.2);
        assert!((b.l_total - total_loss(b.l_bce, b.l_dice, b.l_con, 0.2)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn total_loss_is_linear_in_each_term(
            x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0,
            dx in -5.0f64..5.0, lam in 0.0f64..1.0,
        ) {
            let base = total_loss(x, y, z, lam);
            prop_assert!((total_loss(x + dx, y, z, lam) - base - (1.0 - lam) * dx).abs() < 1e-12);
            prop_assert!((total_loss(x, y + dx, z, lam) - base - (1.0 - lam) * dx).abs() < 1e-12);
            prop_assert!((total_loss(x, y, z + dx, lam) - base - lam * dx).abs() < 1e-12);
        }
    }
}
