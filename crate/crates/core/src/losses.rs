//! Training objectives: Dice, focal, feature MSE, score BCE, and the
//! weighted total. All losses are built from tape ops so they are
//! differentiable end to end; targets enter as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Loss weighting and shaping knobs shared by all stages.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Feature-distillation weight.
    pub lambda1: f64,
    /// Mask-distillation weight.
    pub lambda2: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.lambda1,
            self.lambda2,
            self.focal_alpha,
            self.focal_gamma,
            self.dice_eps,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite loss weight".to_string()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.focal_gamma < 0.0 {
            return Err(Error::Config("negative loss weight".to_string()));
        }
        if !(0.0 < self.focal_alpha && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!(
                "focal_alpha {} outside (0,1)",
                self.focal_alpha
            )));
        }
        if self.dice_eps <= 0.0 {
            return Err(Error::Config(format!("dice_eps {} must be > 0", self.dice_eps)));
        }
        Ok(())
    }
}

fn check_binary<S: Scalar>(tape: &Tape<S>, target: VarId, op: &'static str) -> Result<()> {
    let t = tape.value(target);
    if t.data()
        .iter()
        .any(|&v| v != S::zero() && v != S::one())
    {
        return Err(Error::InvalidShape {
            op,
            msg: "target entries must be 0 or 1".to_string(),
        });
    }
    Ok(())
}

fn check_same_shape<S: Scalar>(
    tape: &Tape<S>,
    a: VarId,
    b: VarId,
    op: &'static str,
) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`, value in [0, 1].
pub fn dice_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred_probs: VarId,
    target: VarId,
    eps: f64,
) -> Result<VarId> {
    check_same_shape(tape, pred_probs, target, "dice_loss")?;
    check_binary(tape, target, "dice_loss")?;
    let e = sc::<S>(eps);
    let inter = tape.mul(pred_probs, target)?;
    let inter = tape.sum(inter)?;
    let num = tape.mul_scalar(inter, sc::<S>(2.0))?;
    let num = tape.add_scalar(num, e)?;
    let sp = tape.sum(pred_probs)?;
    let st = tape.sum(target)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, e)?;
    let frac = tape.div(num, den)?;
    let neg = tape.mul_scalar(frac, sc::<S>(-1.0))?;
    tape.add_scalar(neg, S::one())
}

/// Mean over pixels of `-alpha_t * (1 - p_t)^gamma * log(p_t)` with logits in,
/// computed through `softplus` for stability.
pub fn focal_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred_logits: VarId,
    target: VarId,
    alpha: f64,
    gamma: f64,
) -> Result<VarId> {
    check_same_shape(tape, pred_logits, target, "focal_loss")?;
    check_binary(tape, target, "focal_loss")?;
    if !tape.value(pred_logits).is_finite() {
        return Err(Error::NonFinite {
            context: "focal_loss logits".to_string(),
        });
    }
    let one = S::one();
    let p = tape.sigmoid(pred_logits)?;
    // log p = -softplus(-x); log(1-p) = -softplus(x)
    let neg_x = tape.mul_scalar(pred_logits, -one)?;
    let log_p = tape.softplus(neg_x)?;
    let log_p = tape.mul_scalar(log_p, -one)?;
    let log_1mp = tape.softplus(pred_logits)?;
    let log_1mp = tape.mul_scalar(log_1mp, -one)?;
    // select by binary target: log p_t = t*log p + (1-t)*log(1-p)
    let t_log_p = tape.mul(target, log_p)?;
    let neg_t = tape.mul_scalar(target, -one)?;
    let one_m_t = tape.add_scalar(neg_t, one)?;
    let nt_log = tape.mul(one_m_t, log_1mp)?;
    let log_pt = tape.add(t_log_p, nt_log)?;
    // 1 - p_t = t*(1-p) + (1-t)*p
    let neg_p = tape.mul_scalar(p, -one)?;
    let one_m_p = tape.add_scalar(neg_p, one)?;
    let a1 = tape.mul(target, one_m_p)?;
    let a2 = tape.mul(one_m_t, p)?;
    let one_m_pt = tape.add(a1, a2)?;
    let modulator = tape.pow_const(one_m_pt, sc::<S>(gamma))?;
    // alpha_t = alpha*t + (1-alpha)*(1-t)
    let at1 = tape.mul_scalar(target, sc::<S>(alpha))?;
    let at2 = tape.mul_scalar(one_m_t, sc::<S>(1.0 - alpha))?;
    let alpha_t = tape.add(at1, at2)?;
    let term = tape.mul(alpha_t, modulator)?;
    let term = tape.mul(term, log_pt)?;
    let term = tape.mul_scalar(term, -one)?;
    tape.mean(term)
}

/// Mean squared elementwise difference between projected student features
/// and teacher features.
pub fn feature_mse<S: Scalar>(
    tape: &mut Tape<S>,
    student_proj: VarId,
    teacher_feat: VarId,
) -> Result<VarId> {
    check_same_shape(tape, student_proj, teacher_feat, "feature_mse")?;
    let d = tape.sub(student_proj, teacher_feat)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Mean binary cross-entropy from logits: `mean(softplus(x) - x*t)`.
pub fn score_bce<S: Scalar>(tape: &mut Tape<S>, logits: VarId, target: VarId) -> Result<VarId> {
    check_same_shape(tape, logits, target, "score_bce")?;
    check_binary(tape, target, "score_bce")?;
    let sp = tape.softplus(logits)?;
    let xt = tape.mul(logits, target)?;
    let d = tape.sub(sp, xt)?;
    tape.mean(d)
}

/// `task + lambda1 * feat + lambda2 * mask`.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    task: VarId,
    feat: VarId,
    mask: VarId,
    w: &LossWeights,
) -> Result<VarId> {
    for (id, name) in [(task, "task"), (feat, "feat"), (mask, "mask")] {
        let v = tape.value(id);
        if v.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "total_loss",
                msg: format!("{name} must be scalar, got {:?}", v.shape()),
            });
        }
    }
    let f = tape.mul_scalar(feat, sc::<S>(w.lambda1))?;
    let m = tape.mul_scalar(mask, sc::<S>(w.lambda2))?;
    let tf = tape.add(task, f)?;
    tape.add(tf, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;
    use rand::Rng;

    type Tape64 = Tape<f64>;

    fn consts(tape: &mut Tape64, shape: &[usize], data: &[f64]) -> VarId {
        tape.constant(Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap())
    }

    fn scalar_of(tape: &Tape64, id: VarId) -> f64 {
        tape.value(id).item().unwrap()
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let mut tape = Tape64::new();
        let t = consts(&mut tape, &[4], &[1.0, 0.0, 1.0, 0.0]);
        let v = dice_loss(&mut tape, t, t, 1e-6).unwrap();
        assert!(scalar_of(&tape, v) <= 1e-6);

        let mut tape = Tape64::new();
        let p = consts(&mut tape, &[4], &[0.0, 1.0, 0.0, 1.0]);
        let t = consts(&mut tape, &[4], &[1.0, 0.0, 1.0, 0.0]);
        let v = dice_loss(&mut tape, p, t, 1e-6).unwrap();
        assert!(scalar_of(&tape, v) > 1.0 - 1e-5);
    }

    #[test]
    fn dice_half_overlap_hand_value() {
        // pred = 0.5 on 4 pixels, target has exactly 2 ones:
        // 1 - 2*sum(p*t)/(sum p + sum t) = 1 - 2*1/4 = 0.5 as eps -> 0
        let mut tape = Tape64::new();
        let p = consts(&mut tape, &[4], &[0.5; 4]);
        let t = consts(&mut tape, &[4], &[1.0, 1.0, 0.0, 0.0]);
        let v = dice_loss(&mut tape, p, t, 1e-12).unwrap();
        assert!((scalar_of(&tape, v) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn focal_closed_form_at_zero_logit() {
        // logit 0 (p=0.5), target 1, alpha 0.25, gamma 2:
        // 0.25 * 0.5^2 * ln 2
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        let mut tape = Tape64::new();
        let x = consts(&mut tape, &[1], &[0.0]);
        let t = consts(&mut tape, &[1], &[1.0]);
        let v = focal_loss(&mut tape, x, t, 0.25, 2.0).unwrap();
        assert!((scalar_of(&tape, v) - expected).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_is_half_bce() {
        let mut rng = crate::rng::substream(3, "focal");
        for _ in 0..20 {
            let n = 6;
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let mut tape = Tape64::new();
            let x = consts(&mut tape, &[n], &logits);
            let t = consts(&mut tape, &[n], &targets);
            let f = focal_loss(&mut tape, x, t, 0.5, 0.0).unwrap();
            let b = score_bce(&mut tape, x, t).unwrap();
            let fv = scalar_of(&tape, f);
            let bv = scalar_of(&tape, b);
            assert!((fv - 0.5 * bv).abs() < 1e-12, "{fv} vs 0.5*{bv}");
        }
    }

    #[test]
    fn focal_confident_correct_goes_to_zero_monotonically() {
        let mut last = f64::INFINITY;
        for logit in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut tape = Tape64::new();
            let x = consts(&mut tape, &[1], &[logit]);
            let t = consts(&mut tape, &[1], &[1.0]);
            let v = focal_loss(&mut tape, x, t, 0.25, 2.0).unwrap();
            let v = scalar_of(&tape, v);
            assert!(v < last && v >= 0.0);
            last = v;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn feature_mse_constant_offset_is_one() {
        let mut tape = Tape64::new();
        let s = consts(&mut tape, &[2, 3], &[0.1, -0.4, 2.0, 1.0, 0.0, -3.0]);
        let t = tape
            .add_scalar(s, 1.0)
            .unwrap();
        let v = feature_mse(&mut tape, s, t).unwrap();
        assert!((scalar_of(&tape, v) - 1.0).abs() < 1e-12);
        let z = feature_mse(&mut tape, s, s).unwrap();
        assert_eq!(scalar_of(&tape, z), 0.0);
    }

    #[test]
    fn feature_mse_matches_brute_force() {
        let mut rng = crate::rng::substream(5, "mse");
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let brute: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 12.0;
        let mut tape = Tape64::new();
        let av = consts(&mut tape, &[12], &a);
        let bv = consts(&mut tape, &[12], &b);
        let v = feature_mse(&mut tape, av, bv).unwrap();
        assert!((scalar_of(&tape, v) - brute).abs() < 1e-12);
    }

    #[test]
    fn bce_known_values() {
        let ln2 = std::f64::consts::LN_2;
        let mut tape = Tape64::new();
        let x = consts(&mut tape, &[1], &[0.0]);
        let t1 = consts(&mut tape, &[1], &[1.0]);
        let t0 = consts(&mut tape, &[1], &[0.0]);
        let v1 = score_bce(&mut tape, x, t1).unwrap();
        let v0 = score_bce(&mut tape, x, t0).unwrap();
        assert!((scalar_of(&tape, v1) - ln2).abs() < 1e-12);
        assert!((scalar_of(&tape, v0) - ln2).abs() < 1e-12);

        // logits [2,-2], targets [1,0] -> softplus(-2)
        let expected = (1.0 + (-2.0f64).exp()).ln();
        let mut tape = Tape64::new();
        let x = consts(&mut tape, &[2], &[2.0, -2.0]);
        let t = consts(&mut tape, &[2], &[1.0, 0.0]);
        let v = score_bce(&mut tape, x, t).unwrap();
        assert!((scalar_of(&tape, v) - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape64::new();
        let x = consts(&mut tape, &[1], &[0.0]);
        let t = consts(&mut tape, &[1], &[0.5]);
        assert!(score_bce(&mut tape, x, t).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape64::new();
        let task = consts(&mut tape, &[], &[1.0]);
        let feat = consts(&mut tape, &[], &[2.0]);
        let mask = consts(&mut tape, &[], &[3.0]);
        let w0 = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let v = total_loss(&mut tape, task, feat, mask, &w0).unwrap();
        assert_eq!(scalar_of(&tape, v), 1.0);

        let w1 = LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            ..Default::default()
        };
        let v = total_loss(&mut tape, task, feat, mask, &w1).unwrap();
        assert_eq!(scalar_of(&tape, v), 6.0);

        let w2 = LossWeights {
            lambda1: 0.5,
            lambda2: 2.0,
            ..Default::default()
        };
        let v = total_loss(&mut tape, task, feat, mask, &w2).unwrap();
        assert_eq!(scalar_of(&tape, v), 8.0);
    }

    #[test]
    fn all_losses_pass_grad_check() {
        let mut rng = crate::rng::substream(9, "loss-grads");
        for seed_round in 0..3 {
            let n = 8;
            let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let feats: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let tv = targets.clone();
            let dice_err = grad_check(
                move |tape, p| {
                    let t = tape.constant(Tensor::from_vec(vec![8], tv.clone()).unwrap());
                    dice_loss(tape, p, t, 1.0)
                },
                &Tensor::from_vec(vec![8], probs).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(dice_err < 1e-5, "dice {seed_round}: {dice_err}");

            let tv = targets.clone();
            let focal_err = grad_check(
                move |tape, x| {
                    let t = tape.constant(Tensor::from_vec(vec![8], tv.clone()).unwrap());
                    focal_loss(tape, x, t, 0.25, 2.0)
                },
                &Tensor::from_vec(vec![8], logits.clone()).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(focal_err < 1e-5, "focal {seed_round}: {focal_err}");

            let fv = feats.clone();
            let mse_err = grad_check(
                move |tape, s| {
                    let t = tape.constant(Tensor::from_vec(vec![8], fv.clone()).unwrap());
                    feature_mse(tape, s, t)
                },
                &Tensor::from_vec(vec![8], feats.clone()).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(mse_err < 1e-5, "mse {seed_round}: {mse_err}");

            let tv = targets.clone();
            let bce_err = grad_check(
                move |tape, x| {
                    let t = tape.constant(Tensor::from_vec(vec![8], tv.clone()).unwrap());
                    score_bce(tape, x, t)
                },
                &Tensor::from_vec(vec![8], logits).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(bce_err < 1e-5, "bce {seed_round}: {bce_err}");
        }
    }

    #[test]
    fn weights_validation_catches_bad_fields() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.dice_eps = 0.0;
        assert!(w.validate().is_err());
        w = LossWeights {
            focal_alpha: 1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
