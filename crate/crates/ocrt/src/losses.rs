//! Binary segmentation losses: cross-entropy, soft dice, and focal.

use crate::error::{OcrtError, Result};
use crate::Tensor;

pub const PROB_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

fn check_pair(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(OcrtError::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(())
}

fn clamp_probs(pred: &Tensor) -> Result<Tensor> {
    pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy on clamped probabilities.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair("bce", pred, target)?;
    let p = clamp_probs(pred)?;
    let pos = target.mul(&p.ln()?)?;
    let neg = target.neg()?.add_scalar(1.0)?.mul(&p.neg()?.add_scalar(1.0)?.ln()?)?;
    pos.add(&neg)?.mean()?.neg()
}

/// 1 − (2Σpt + s) / (Σp + Σt + s) with smoothing s = 1.
pub fn dice(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair("dice", pred, target)?;
    let p = clamp_probs(pred)?;
    let inter = p.mul(target)?.sum()?;
    let num = inter.mul_scalar(2.0)?.add_scalar(DICE_SMOOTH)?;
    let den = p.sum()?.add(&target.sum()?)?.add_scalar(DICE_SMOOTH)?;
    num.div(&den)?.neg()?.add_scalar(1.0)
}

/// Mean of −α (1 − p_t)^γ log p_t with α = 0.25, γ = 2, where
/// p_t = p for positive targets and 1 − p otherwise.
pub fn focal(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair("focal", pred, target)?;
    let p = clamp_probs(pred)?;
    // p_t = t*p + (1-t)*(1-p), continuous in soft targets as well.
    let pt = target
        .mul(&p)?
        .add(&target.neg()?.add_scalar(1.0)?.mul(&p.neg()?.add_scalar(1.0)?)?)?;
    let weight = pt.neg()?.add_scalar(1.0)?.square()?.mul_scalar(FOCAL_ALPHA)?;
    weight.mul(&pt.ln()?)?.mean()?.neg()
}

pub fn seg_losses(pred: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((bce(pred, target)?, dice(pred, target)?, focal(pred, target)?))
}

/// Named loss values for one step, in insertion order. Every entry is
/// validated to be finite and non-negative when recorded, so a blown-up
/// term is reported by name.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub entries: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn record(&mut self, name: &'static str, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(OcrtError::Contract(format!(
                "loss term `{name}` is {value}; aborting"
            )));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    /// One training-log line: "step=N loss.a=… loss.b=…".
    pub fn line(&self, step: usize) -> String {
        let mut s = format!("step={step}");
        for (name, v) in &self.entries {
            s.push_str(&format!(" loss.{name}={v:.6}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_dice_near_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let t: Vec<f64> = (0..1024).map(|_| f64::from(r.gen_bool(0.5))).collect();
        let target = Tensor::from_vec(t.clone(), &[1024, 1]).unwrap();
        let pred = Tensor::from_vec(t, &[1024, 1]).unwrap();
        assert!(dice(&pred, &target).unwrap().item() <= 1e-6);
    }

    #[test]
    fn uniform_half_prediction_bce_is_ln2() {
        let pred = Tensor::full(&[100, 1], 0.5);
        let t: Vec<f64> = (0..100).map(|i| f64::from(i % 2 == 0)).collect();
        let target = Tensor::from_vec(t, &[100, 1]).unwrap();
        let b = bce(&pred, &target).unwrap().item();
        assert!((b - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matches_per_pixel_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let n = 37;
        let pv: Vec<f64> = (0..n).map(|_| r.gen_range(0.001..0.999)).collect();
        let tv: Vec<f64> = (0..n).map(|_| f64::from(r.gen_bool(0.4))).collect();
        let pred = Tensor::from_vec(pv.clone(), &[n, 1]).unwrap();
        let target = Tensor::from_vec(tv.clone(), &[n, 1]).unwrap();
        let (b, d, f) = seg_losses(&pred, &target).unwrap();

        let mut bo = 0.0;
        let mut fo = 0.0;
        let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (p, t) = (pv[i], tv[i]);
            bo += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            let pt = if t > 0.5 { p } else { 1.0 - p };
            fo += -FOCAL_ALPHA * (1.0 - pt).powi(2) * pt.ln();
            inter += p * t;
            psum += p;
            tsum += t;
        }
        let do_ = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
        assert!((b.item() - bo / n as f64).abs() < 1e-10);
        assert!((d.item() - do_).abs() < 1e-10);
        assert!((f.item() - fo / n as f64).abs() < 1e-10);
    }

    #[test]
    fn extreme_probabilities_stay_finite() {
        let pred = Tensor::from_vec(vec![0.0, 1.0], &[2, 1]).unwrap();
        let target = Tensor::from_vec(vec![1.0, 0.0], &[2, 1]).unwrap();
        let (b, d, f) = seg_losses(&pred, &target).unwrap();
        for v in [b.item(), d.item(), f.item()] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let pred = Tensor::full(&[3, 1], 0.5);
        let target = Tensor::full(&[4, 1], 1.0);
        assert!(bce(&pred, &target).is_err());
        assert!(dice(&pred, &target).is_err());
        assert!(focal(&pred, &target).is_err());
    }

    #[test]
    fn gradients_flow_through_all_three() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let logits: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let raw = Tensor::param(logits, &[8, 1]).unwrap();
        let pred = raw.sigmoid().unwrap();
        let tv: Vec<f64> = (0..8).map(|i| f64::from(i < 4)).collect();
        let target = Tensor::from_vec(tv, &[8, 1]).unwrap();
        let (b, d, f) = seg_losses(&pred, &target).unwrap();
        b.add(&d).unwrap().add(&f).unwrap().backward().unwrap();
        assert!(raw.grad_vec().iter().any(|g| g.abs() > 0.0));
    }
}
