//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::prompt::PromptParams;
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape with `x` already bound as a trainable leaf.
/// Returns the maximum relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<'a, F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let eval = |values: Vec<f64>| -> Result<(f64, Option<Vec<f64>>)> {
        let leaf = Tensor::new(x.shape().to_vec(), values)?.trainable();
        let mut tape = Tape::new();
        let v = tape.leaf(leaf);
        let out = f(&mut tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Usage("grad_check needs a scalar function".into()));
        }
        let grads = tape.backward(out)?;
        Ok((tape.scalar(out), grads.wrt(v).map(<[f64]>::to_vec)))
    };

    let (_, analytic) = eval(x.values().to_vec())?;
    let analytic = analytic.unwrap_or_else(|| vec![0.0; x.len()]);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.values().to_vec();
        plus[i] += h;
        let mut minus = x.values().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)?.0 - eval(minus)?.0) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Checks the gradient of the end-to-end prompt-tuning loss with respect
/// to every trainable tensor of `params`. Same error measure as
/// [`grad_check`].
pub fn prompt_grad_check(
    backbone: &Backbone,
    params: &PromptParams,
    input: &[usize],
    target: &[usize],
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let loss_of = |p: &PromptParams| -> Result<f64> {
        let mut t = Tape::new();
        let prompt = p.materialize_on(&mut t)?;
        let (loss, _) = backbone.loss_on_tape(&mut t, Some(prompt), input, target)?;
        Ok(t.scalar(loss))
    };
    let analytic: Vec<Vec<f64>> = {
        let mut t = Tape::new();
        let prompt = params.materialize_on(&mut t)?;
        let (loss, _) = backbone.loss_on_tape(&mut t, Some(prompt), input, target)?;
        let grads = t.backward(loss)?;
        params
            .tensors()
            .iter()
            .map(|x| grads.of(x).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
            .collect()
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.tensors()[k].values()[i];
            probe.tensors_mut()[k].values_mut()[i] = original + h;
            let plus = loss_of(&probe)?;
            probe.tensors_mut()[k].values_mut()[i] = original - h;
            let minus = loss_of(&probe)?;
            probe.tensors_mut()[k].values_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Elementwise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    fn random_shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
        (rng.gen_range(1..5), rng.gen_range(1..5))
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::gaussian(&[3, 4], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::filled(&[3], 2.0);
        let err = grad_check(|t, _| t.constant(vec![1], vec![4.0]), &x, H).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }

    // Every differentiable op, over ten random shapes and seeds each. A fixed
    // random weighting turns each output into a scalar with a non-trivial
    // upstream gradient.
    fn weighted_sum<'a>(t: &mut Tape<'a>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = Tensor::gaussian(t.shape(y), 1.0, &mut rng);
        let wv = t.leaf(w);
        let p = t.mul(y, wv)?;
        Ok(t.sum(p))
    }

    fn check_op<G>(build: G)
    where
        G: Fn(&mut ChaCha8Rng) -> (Tensor, Box<dyn Fn(&mut Tape<'static>, Var) -> Result<Var>>),
    {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, f) = build(&mut rng);
            let err = grad_check(|t, v| f(t, v), &x, H).unwrap();
            assert!(err < 1e-5, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn matmul_both_sides() {
        check_op(|rng| {
            let (m, k) = random_shape(rng);
            let n = rng.gen_range(1..5);
            let x = Tensor::gaussian(&[m, k], 1.0, rng);
            let b = Tensor::gaussian(&[k, n], 1.0, rng);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t, v| {
                    let vb = t.leaf(b.clone());
                    let y = t.matmul(v, vb)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
        check_op(|rng| {
            let (k, n) = random_shape(rng);
            let m = rng.gen_range(1..5);
            let a = Tensor::gaussian(&[m, k], 1.0, rng);
            let x = Tensor::gaussian(&[k, n], 1.0, rng);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t, v| {
                    let va = t.leaf(a.clone());
                    let y = t.matmul(va, v)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn elementwise_ops() {
        for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
            check_op(move |rng| {
                let (m, n) = random_shape(rng);
                let x = Tensor::gaussian(&[m, n], 1.0, rng);
                let other = Tensor::gaussian(&[m, n], 1.0, rng);
                let seed = rng.gen();
                (
                    x,
                    Box::new(move |t, v| {
                        let o = t.leaf(other.clone());
                        let a = t.elementwise(kind, v, o)?;
                        let b = t.elementwise(kind, o, v)?;
                        let y = t.add(a, b)?;
                        weighted_sum(t, y, seed)
                    }),
                )
            });
        }
        check_op(|rng| {
            let (m, n) = random_shape(rng);
            let x = Tensor::gaussian(&[m, n], 1.0, rng);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t, v| {
                    let y = t.scale(v, -1.7);
                    weighted_sum(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn relu_away_from_kink() {
        check_op(|rng| {
            let (m, n) = random_shape(rng);
            let mut x = Tensor::gaussian(&[m, n], 1.0, rng);
            // Keep every coordinate at least 1e-3 from zero so h=1e-5 never straddles it.
            x.values_mut().iter_mut().for_each(|v| *v += 1e-3f64.copysign(*v));
            let seed = rng.gen();
            (
                x,
                Box::new(move |t, v| {
                    let y = t.relu(v);
                    weighted_sum(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn softmax_rows() {
        check_op(|rng| {
            let (m, n) = random_shape(rng);
            let x = Tensor::gaussian(&[m, n], 1.0, rng);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t, v| {
                    let y = t.softmax_rows(v)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn layer_norm_all_inputs() {
        // Two-element rows are excluded: their true gradient is O(eps) and the
        // central difference is dominated by roundoff.
        check_op(|rng| {
            let (m, e) = (rng.gen_range(1..4), rng.gen_range(3..7));
            let x = Tensor::gaussian(&[m, e], 1.0, rng);
            let g = Tensor::gaussian(&[e], 1.0, rng);
            let b = Tensor::gaussian(&[e], 1.0, rng);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t, v| {
                    let (vg, vb) = (t.leaf(g.clone()), t.leaf(b.clone()));
                    let y = t.layer_norm(v, vg, vb)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
        check_op(|rng| {
            let (m, e) = (rng.gen_range(1..4), rng.gen_range(3..7));
            let xs = Tensor::gaussian(&[m, e], 1.0, rng);
            let g = Tensor::gaussian(&[e], 1.0, rng);
            let seed = rng.gen();
            (
                g,
                Box::new(move |t, v| {
                    let vx = t.leaf(xs.clone());
                    let bias = t.constant(vec![e], vec![0.1; e])?;
                    let y = t.layer_norm(vx, v, bias)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn embedding_and_bias() {
        check_op(|rng| {
            let (v, e) = (rng.gen_range(2..6), rng.gen_range(1..5));
            let table = Tensor::gaussian(&[v, e], 1.0, rng);
            let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..v)).collect();
            let seed = rng.gen();
            (
                table,
                Box::new(move |t, x| {
                    let y = t.embedding_lookup(x, &ids)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
        check_op(|rng| {
            let (m, n) = random_shape(rng);
            let bias = Tensor::gaussian(&[n], 1.0, rng);
            let x = Tensor::gaussian(&[m, n], 1.0, rng);
            let seed = rng.gen();
            (
                bias,
                Box::new(move |t, b| {
                    let vx = t.leaf(x.clone());
                    let y = t.add_bias(vx, b)?;
                    let y = t.mul(y, y)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn cross_entropy_logits() {
        check_op(|rng| {
            let (tlen, v) = (rng.gen_range(1..4), rng.gen_range(2..6));
            let logits = Tensor::gaussian(&[tlen, v], 1.0, rng);
            let targets: Vec<usize> = (0..tlen).map(|_| rng.gen_range(0..v)).collect();
            (logits, Box::new(move |t, x| t.cross_entropy(x, &targets)))
        });
    }

    #[test]
    fn structural_ops() {
        check_op(|rng| {
            let (r, c) = random_shape(rng);
            let x = Tensor::gaussian(&[r, c], 1.0, rng);
            let other = Tensor::gaussian(&[r, 2], 1.0, rng);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t, v| {
                    let o = t.leaf(other.clone());
                    let joined = t.concat_cols(o, v)?;
                    let tr = t.transpose(joined)?;
                    let back = t.transpose(tr)?;
                    let s = t.slice_cols(back, 1, c)?;
                    weighted_sum(t, s, seed)
                }),
            )
        });
        check_op(|rng| {
            let c = rng.gen_range(1..5);
            let rows = c + rng.gen_range(0..3);
            let d = Tensor::gaussian(&[c], 1.0, rng);
            let seed = rng.gen();
            (
                d,
                Box::new(move |t, v| {
                    let y = t.diag_embed(v, rows)?;
                    weighted_sum(t, y, seed)
                }),
            )
        });
    }
}
