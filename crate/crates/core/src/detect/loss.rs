//! Sigmoid focal loss and smooth-L1 box loss, each returning its value and
//! the gradient w.r.t. its input.

use super::targets::IGNORE;
use crate::tensor::Scalar;

pub const FOCAL_ALPHA: f64 = 0.5;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PT_FLOOR: f64 = 1e-12;
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: FOCAL_ALPHA,
            gamma: FOCAL_GAMMA,
        }
    }
}

/// `−α_t (1 − p_t)^γ ln p_t` for a single probability of the true label.
pub fn focal_term(p_t: f64, alpha_t: f64, gamma: f64) -> f64 {
    let p = p_t.max(PT_FLOOR);
    -alpha_t * (1.0 - p_t).powf(gamma) * p.ln()
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct LossOutput<T> {
    pub value: f64,
    pub grad: Vec<T>,
    /// Branch taken at each non-smooth point, for finite-difference checks.
    pub kinks: Vec<bool>,
}

/// Sigmoid focal loss over `logits` laid out `[anchor, class]` (K classes).
/// Ignored anchors contribute nothing; the sum is divided by the number of
/// foreground anchors (at least 1).
pub fn focal_loss<T: Scalar>(logits: &[T], labels: &[i32], num_classes: usize, params: FocalParams) -> LossOutput<T> {
    assert_eq!(logits.len(), labels.len() * num_classes, "focal_loss: layout");
    let fg = labels.iter().filter(|&&l| l >= 1).count().max(1) as f64;
    let FocalParams { alpha, gamma } = params;
    let log_floor = PT_FLOOR.ln();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); logits.len()];
    let mut kinks = Vec::new();
    for (a, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        for k in 0..num_classes {
            let x = logits[a * num_classes + k].as_f64();
            let positive = label == k as i32 + 1;
            // z is the logit of the true label, so p_t = σ(z).
            let (z, alpha_t) = if positive { (x, alpha) } else { (-x, 1.0 - alpha) };
            let log_pt_raw = log_sigmoid(z);
            let clamped = log_pt_raw < log_floor;
            let log_pt = log_pt_raw.max(log_floor);
            let p_t = sigmoid(z);
            let q = sigmoid(-z); // 1 − p_t without cancellation
            let mod_factor = q.powf(gamma);
            total += -alpha_t * mod_factor * log_pt;
            // d/dz of −α q^γ log p: α q^γ (γ p log p − q), with the log term
            // frozen when clamped.
            let dz = if clamped {
                alpha_t * gamma * q.powf(gamma) * p_t * log_pt
            } else {
                alpha_t * mod_factor * (gamma * p_t * log_pt - q)
            };
            let dx = if positive { dz } else { -dz };
            grad[a * num_classes + k] = T::from_f(dx / fg);
            kinks.push(clamped);
        }
    }
    LossOutput {
        value: total / fg,
        grad,
        kinks,
    }
}

pub fn smooth_l1(residual: f64, beta: f64) -> f64 {
    let r = residual.abs();
    if r < beta {
        0.5 * r * r / beta
    } else {
        r - 0.5 * beta
    }
}

/// Smooth-L1 over the four deltas of each foreground anchor, divided by the
/// foreground count; zero when there are no foreground anchors.
pub fn box_loss<T: Scalar>(pred: &[T], target: &[[f32; 4]], labels: &[i32], beta: f64) -> LossOutput<T> {
    assert_eq!(pred.len(), labels.len() * 4, "box_loss: layout");
    let fg = labels.iter().filter(|&&l| l >= 1).count();
    let mut grad = vec![T::zero(); pred.len()];
    let mut kinks = Vec::new();
    if fg == 0 {
        return LossOutput {
            value: 0.0,
            grad,
            kinks,
        };
    }
    let norm = fg as f64;
    let mut total = 0.0;
    for (a, &label) in labels.iter().enumerate() {
        if label < 1 {
            continue;
        }
        for j in 0..4 {
            let r = pred[a * 4 + j].as_f64() - target[a][j] as f64;
            total += smooth_l1(r, beta);
            let quadratic = r.abs() < beta;
            let d = if quadratic { r / beta } else { r.signum() };
            grad[a * 4 + j] = T::from_f(d / norm);
            kinks.push(quadratic);
            kinks.push(r > 0.0);
        }
    }
    LossOutput {
        value: total / norm,
        grad,
        kinks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_point_values() {
        assert_eq!(focal_term(1.0, 0.5, 2.0), 0.0);
        let half = focal_term(0.5, 0.5, 2.0);
        assert!((half - 0.5 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((half - 0.086643).abs() < 1e-6);
        let easy = focal_term(0.9, 0.5, 2.0);
        assert!((easy - 5.268e-4).abs() < 1e-6);
        assert!((half / easy - 164.5).abs() < 0.5);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let v = focal_term(0.0, 0.5, 2.0);
        assert!((v - 0.5 * -(PT_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_branches() {
        let b = 1.0 / 9.0;
        assert!((smooth_l1(1.0, b) - (1.0 - b / 2.0)).abs() < 1e-15);
        assert!((smooth_l1(0.05, b) - 0.01125).abs() < 1e-15);
        assert_eq!(smooth_l1(0.0, b), 0.0);
    }

    #[test]
    fn box_loss_zero_cases() {
        let t = [[0.5f32, -0.25, 0.1, 0.0]];
        let out = box_loss(&[0.5f64, -0.25, 0.1f32 as f64, 0.0], &t, &[1], SMOOTH_L1_BETA);
        assert!(out.value.abs() < 1e-12);
        let out = box_loss(&[3.0f64, 0.0, 0.0, 0.0], &t, &[0], SMOOTH_L1_BETA);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn focal_loss_matches_scalar_terms() {
        // One positive anchor (class 1 of 2), one background, one ignored.
        let logits = [0.0f64, 2.0, -1.0, 0.5, 9.0, 9.0];
        let labels = [1, 0, IGNORE];
        let out = focal_loss(&logits, &labels, 2, FocalParams::default());
        let expect = focal_term(0.5, 0.5, 2.0)
            + focal_term(1.0 - sigmoid(2.0), 0.5, 2.0)
            + focal_term(1.0 - sigmoid(-1.0), 0.5, 2.0)
            + focal_term(1.0 - sigmoid(0.5), 0.5, 2.0);
        assert!((out.value - expect).abs() < 1e-12);
        assert_eq!(out.grad[4], 0.0);
    }
}
