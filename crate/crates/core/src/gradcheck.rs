//! Finite-difference gradient checking against the reverse pass.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar loss from a single input var on a fresh tape; it must
/// be deterministic. Returns the max over coordinates of
/// `|analytic - central| / max(1, |central|)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, VarId) -> Result<VarId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut tape, id)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Record(format!(
            "grad_check needs a scalar loss, got {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(id) {
        Some(g) => g.data().iter().map(|v| v.to_f64().unwrap()).collect(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: &Tensor<S>| -> Result<f64> {
        let mut t = Tape::new();
        let pid = t.leaf(probe.clone());
        let l = f(&mut t, pid)?;
        let v = t.value(l).item()?.to_f64().ok_or_else(|| Error::NonFinite {
            context: "grad_check probe".to_string(),
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check probe".to_string(),
            });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone().with_requires_grad(false);
        let mut minus = plus.clone();
        plus.data_mut()[i] = plus.data()[i] + sc::<S>(eps);
        minus.data_mut()[i] = minus.data()[i] - sc::<S>(eps);
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sum_passes_exactly() {
        let x = Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let err = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn softmax_square_sum_passes() {
        let mut rng = crate::rng::substream(7, "gradcheck");
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(vec![3, 4], data).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.row_softmax(x)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn every_core_op_matches_finite_differences() {
        let mut rng = crate::rng::substream(11, "gradcheck-ops");
        let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
            Tensor::from_vec(shape.to_vec(), data).unwrap()
        };

        // Each case: (name, input, graph builder), checked at 1e-4 relative.
        let x = rand_t(&mut rng, &[3, 4], -1.5, 1.5);
        let other = rand_t(&mut rng, &[3, 4], 0.5, 2.0);
        let w = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
        let bias = rand_t(&mut rng, &[4], -0.5, 0.5);
        let img = rand_t(&mut rng, &[2, 5, 5], -1.0, 1.0);
        let kern = rand_t(&mut rng, &[3, 2, 3, 3], -0.6, 0.6);
        let kbias = rand_t(&mut rng, &[3], -0.2, 0.2);
        let pos = rand_t(&mut rng, &[3, 4], 0.2, 2.0);

        let checks: Vec<(&str, f64)> = vec![
            ("add", {
                let o = other.clone();
                grad_check(
                    move |t, x| {
                        let c = t.constant(o.clone());
                        let y = t.add(x, c)?;
                        t.sum(y)
                    },
                    &x,
                    1e-5,
                )
                .unwrap()
            }),
            ("mul", {
                let o = other.clone();
                grad_check(
                    move |t, x| {
                        let c = t.constant(o.clone());
                        let y = t.mul(x, c)?;
                        let z = t.mul(y, y)?;
                        t.mean(z)
                    },
                    &x,
                    1e-5,
                )
                .unwrap()
            }),
            ("div", {
                let o = other.clone();
                grad_check(
                    move |t, x| {
                        let c = t.constant(o.clone());
                        let y = t.div(x, c)?;
                        t.mean(y)
                    },
                    &x,
                    1e-5,
                )
                .unwrap()
            }),
            ("relu_sigmoid_exp", {
                grad_check(
                    move |t, x| {
                        let r = t.relu(x)?;
                        let s = t.sigmoid(r)?;
                        let e = t.exp(s)?;
                        t.mean(e)
                    },
                    &x,
                    1e-5,
                )
                .unwrap()
            }),
            ("ln_softplus_pow", {
                grad_check(
                    move |t, x| {
                        let l = t.ln(x)?;
                        let sp = t.softplus(l)?;
                        let p = t.pow_const(sp, 2.5)?;
                        t.mean(p)
                    },
                    &pos,
                    1e-5,
                )
                .unwrap()
            }),
            ("matmul_bias_softmax", {
                let w = w.clone();
                let b = rand_t(&mut rng, &[2], -0.3, 0.3);
                grad_check(
                    move |t, x| {
                        let wv = t.constant(w.clone());
                        let bv = t.constant(b.clone());
                        let y = t.matmul(x, wv)?;
                        let y = t.add_bias(y, bv)?;
                        let s = t.row_softmax(y)?;
                        let sq = t.mul(s, s)?;
                        t.sum(sq)
                    },
                    &x,
                    1e-5,
                )
                .unwrap()
            }),
            ("bias_input", {
                let base = x.clone();
                grad_check(
                    move |t, b| {
                        let m = t.constant(base.clone());
                        let y = t.add_bias(m, b)?;
                        let sq = t.mul(y, y)?;
                        t.sum(sq)
                    },
                    &bias,
                    1e-5,
                )
                .unwrap()
            }),
            ("reshape_permute_slice_concat", {
                grad_check(
                    move |t, x| {
                        let r = t.reshape(x, &[4, 3])?;
                        let p = t.permute(r, &[1, 0])?;
                        let a = t.slice(p, &[0..3, 0..2])?;
                        let b = t.slice(p, &[0..3, 2..4])?;
                        let c = t.concat(&[a, b], 1)?;
                        let sq = t.mul(c, c)?;
                        t.sum(sq)
                    },
                    &x,
                    1e-5,
                )
                .unwrap()
            }),
            ("conv2d_input", {
                let k = kern.clone();
                let kb = kbias.clone();
                grad_check(
                    move |t, x| {
                        let wv = t.constant(k.clone());
                        let bv = t.constant(kb.clone());
                        let y = t.conv2d(x, wv, Some(bv), 2, 1)?;
                        let sq = t.mul(y, y)?;
                        t.sum(sq)
                    },
                    &img,
                    1e-5,
                )
                .unwrap()
            }),
            ("conv2d_weight", {
                let i = img.clone();
                grad_check(
                    move |t, w| {
                        let xv = t.constant(i.clone());
                        let y = t.conv2d(xv, w, None, 1, 1)?;
                        let sq = t.mul(y, y)?;
                        t.mean(sq)
                    },
                    &kern,
                    1e-5,
                )
                .unwrap()
            }),
        ];

        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let x = Tensor::from_vec(vec![1], vec![1.0f64]).unwrap();
        assert!(grad_check(|t, x| t.sum(x), &x, 1e-2).is_err());
    }
}
