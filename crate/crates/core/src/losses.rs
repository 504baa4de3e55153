//! Training objectives: Dice segmentation loss, windowed SSIM, the
//! five-term luminance fusion loss, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::{directional_gradients_graph, sobel_magnitude_graph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ssim_vi: f64,
    pub mse_vi: f64,
    pub mse_ir: f64,
    pub sobel_ir: f64,
    pub grad: f64,
    pub lambda_fuse: f64,
    pub epsilon_dice: f64,
    /// Average foreground and background Dice instead of foreground only.
    pub two_class_dice: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssim_vi: 0.5,
            mse_vi: 0.5,
            mse_ir: 2.0,
            sobel_ir: 1.0,
            grad: 1.0,
            lambda_fuse: 1.0,
            epsilon_dice: 1.0,
            two_class_dice: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("ssim_vi", self.ssim_vi),
            ("mse_vi", self.mse_vi),
            ("mse_ir", self.mse_ir),
            ("sobel_ir", self.sobel_ir),
            ("grad", self.grad),
            ("lambda_fuse", self.lambda_fuse),
        ];
        if let Some((name, v)) = all.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("loss weight {name} = {v} must be finite and non-negative")));
        }
        if !(self.epsilon_dice.is_finite() && self.epsilon_dice > 0.0) {
            return Err(Error::invalid("epsilon_dice must be positive"));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn dice_term(g: &mut Graph, prob: Var, target: Var, eps: f64) -> Result<Var> {
    let overlap = g.mul(prob, target)?;
    let overlap = g.sum(overlap)?;
    let num = g.scale(overlap, 2.0)?;
    let num = g.add_scalar(num, eps)?;
    let sp = g.sum(prob)?;
    let st = g.sum(target)?;
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, eps)?;
    let ratio = g.div(num, den)?;
    g.one_minus(ratio)
}

/// `1 - (2 sum(P G) + eps) / (sum(P) + sum(G) + eps)`.
///
/// With `two_class` the background Dice of `(1 - P, 1 - G)` is averaged in.
pub fn dice_loss(g: &mut Graph, prob: Var, target: Var, eps: f64, two_class: bool) -> Result<Var> {
    same_shape(g, "dice_loss", prob, target)?;
    if g.value(target).data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("dice target must be binary"));
    }
    let fg = dice_term(g, prob, target, eps)?;
    if !two_class {
        return Ok(fg);
    }
    let inv_p = g.one_minus(prob)?;
    let inv_t = g.one_minus(target)?;
    let bg = dice_term(g, inv_p, inv_t, eps)?;
    let both = g.add(fg, bg)?;
    g.scale(both, 0.5)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 2-D Gaussian window as a `[1, 1, k, k]` kernel.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let center = (size / 2) as f64;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / total).collect();
    Tensor::from_fn(&[1, 1, size, size], |k| g1[k / size] * g1[k % size])
}

/// Mean SSIM over all full windows (no padding) of two `[1, 1, H, W]` planes.
pub fn ssim(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    same_shape(g, "ssim", x, y)?;
    match *g.shape(x) {
        [1, 1, h, w] if h >= SSIM_WINDOW && w >= SSIM_WINDOW => {}
        _ => {
            return Err(Error::invalid(format!(
                "ssim needs [1, 1, H, W] planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {:?}",
                g.shape(x)
            )))
        }
    }
    let win = g.constant(gaussian_window(SSIM_WINDOW, SSIM_SIGMA))?;
    let blur = |g: &mut Graph, v: Var| g.conv2d(v, win, None, 1, 0);
    let mu_x = blur(g, x)?;
    let mu_y = blur(g, y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = blur(g, xx)?;
    let e_yy = blur(g, yy)?;
    let e_xy = blur(g, xy)?;
    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_xx)?;
    let var_y = g.sub(e_yy, mu_yy)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let l_num = g.scale(mu_xy, 2.0)?;
    let l_num = g.add_scalar(l_num, SSIM_C1)?;
    let c_num = g.scale(cov, 2.0)?;
    let c_num = g.add_scalar(c_num, SSIM_C2)?;
    let l_den = g.add(mu_xx, mu_yy)?;
    let l_den = g.add_scalar(l_den, SSIM_C1)?;
    let c_den = g.add(var_x, var_y)?;
    let c_den = g.add_scalar(c_den, SSIM_C2)?;
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    g.mean(map)
}

/// Handles of the individual weighted fusion-loss terms.
#[derive(Debug, Clone, Copy)]
pub struct FusionLossTerms {
    pub ssim_vi: Var,
    pub mse_vi: Var,
    pub mse_ir: Var,
    pub sobel_ir: Var,
    pub grad: Var,
    pub total: Var,
}

/// Evaluated fusion-loss terms, already weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionLossBreakdown {
    pub ssim_vi: f64,
    pub mse_vi: f64,
    pub mse_ir: f64,
    pub sobel_ir: f64,
    pub grad: f64,
    pub total: f64,
}

impl FusionLossTerms {
    pub fn breakdown(&self, g: &Graph) -> FusionLossBreakdown {
        let v = |x: Var| g.value(x).item();
        FusionLossBreakdown {
            ssim_vi: v(self.ssim_vi),
            mse_vi: v(self.mse_vi),
            mse_ir: v(self.mse_ir),
            sobel_ir: v(self.sobel_ir),
            grad: v(self.grad),
            total: v(self.total),
        }
    }
}

fn mean_sq_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    g.mean(d)
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Luminance fusion loss over `[1, 1, H, W]` planes:
///
/// - `w_ssim (1 - SSIM(F, V))`
/// - `w_mse_vi mean((F - V)^2)` and `w_mse_ir mean((F - I)^2)`
/// - `w_sobel mean|S(F) - S(I)|` with `S` the Sobel magnitude
/// - `w_grad (mean|dx F - max(dx V, dx I)| + mean|dy F - max(dy V, dy I)|)`
pub fn fusion_loss(g: &mut Graph, fused: Var, vis: Var, ir: Var, w: &LossWeights) -> Result<FusionLossTerms> {
    same_shape(g, "fusion_loss", fused, vis)?;
    same_shape(g, "fusion_loss", fused, ir)?;

    let s = ssim(g, fused, vis)?;
    let s = g.one_minus(s)?;
    let ssim_vi = g.scale(s, w.ssim_vi)?;

    let m = mean_sq_diff(g, fused, vis)?;
    let mse_vi = g.scale(m, w.mse_vi)?;
    let m = mean_sq_diff(g, fused, ir)?;
    let mse_ir = g.scale(m, w.mse_ir)?;

    let sf = sobel_magnitude_graph(g, fused)?;
    let si = sobel_magnitude_graph(g, ir)?;
    let d = mean_abs_diff(g, sf, si)?;
    let sobel_ir = g.scale(d, w.sobel_ir)?;

    let (fx, fy) = directional_gradients_graph(g, fused)?;
    let (vx, vy) = directional_gradients_graph(g, vis)?;
    let (ix, iy) = directional_gradients_graph(g, ir)?;
    let tx = g.maximum(vx, ix)?;
    let ty = g.maximum(vy, iy)?;
    let dx = mean_abs_diff(g, fx, tx)?;
    let dy = mean_abs_diff(g, fy, ty)?;
    let d = g.add(dx, dy)?;
    let grad = g.scale(d, w.grad)?;

    let mut total = ssim_vi;
    for term in [mse_vi, mse_ir, sobel_ir, grad] {
        total = g.add(total, term)?;
    }
    Ok(FusionLossTerms {
        ssim_vi,
        mse_vi,
        mse_ir,
        sobel_ir,
        grad,
        total,
    })
}

/// `L_seg + lambda_fuse * L_fuse`.
pub fn total_loss(g: &mut Graph, seg: Var, fuse: Var, lambda_fuse: f64) -> Result<Var> {
    let weighted = g.scale(fuse, lambda_fuse)?;
    g.add(seg, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_dice(p: &[f64], t: &[f64], eps: f64) -> f64 {
        let mut g = Graph::new();
        let n = p.len();
        let pv = g.constant(Tensor::new(vec![1, 1, 1, n], p.to_vec()).unwrap()).unwrap();
        let tv = g.constant(Tensor::new(vec![1, 1, 1, n], t.to_vec()).unwrap()).unwrap();
        let l = dice_loss(&mut g, pv, tv, eps, false).unwrap();
        g.value(l).item()
    }

    #[test]
    fn dice_hand_examples() {
        let gt = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(eval_dice(&gt, &gt, 1.0), 0.0);
        assert_eq!(eval_dice(&gt, &gt, 0.3), 0.0);
        assert_eq!(eval_dice(&[0.0; 4], &[1.0; 4], 1.0), 1.0 - 1.0 / 5.0);
        assert_eq!(eval_dice(&[0.5; 4], &[1.0, 0.0, 0.0, 0.0], 1.0), 0.5);
    }

    #[test]
    fn dice_rejects_soft_target() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5)).unwrap();
        let t = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5)).unwrap();
        assert!(dice_loss(&mut g, p, t, 1.0, false).is_err());
    }

    #[test]
    fn two_class_dice_is_zero_on_exact_match() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = g.constant(t.clone()).unwrap();
        let t = g.constant(t).unwrap();
        let l = dice_loss(&mut g, p, t, 1.0, true).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0)).unwrap();
        let b = g.constant(Tensor::scalar(2.0)).unwrap();
        let t = total_loss(&mut g, a, b, 0.5).unwrap();
        assert_eq!(g.value(t).item(), 2.0);
        let t = total_loss(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.value(t).item(), 1.0);
    }

    #[test]
    fn gaussian_window_is_normalized() {
        let w = gaussian_window(11, 1.5);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert_eq!(w.data()[60], w.max_value());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            mse_ir: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            epsilon_dice: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
