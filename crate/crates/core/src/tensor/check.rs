use super::{Graph, Result, Tape, Tensor, Var};

/// Fourth-order central-difference gradient of `value` at `point`, one
/// coordinate at a time (five-point stencil at `±step`, `±2·step`).
pub fn central_difference<F>(value: F, point: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut grad = Tensor::zeros(point[i].shape());
        for j in 0..point[i].len() {
            let x = point[i].data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x + offset;
                let v = value(&probe);
                probe[i].data_mut()[j] = x;
                v
            };
            let (f1, b1) = (at(step)?, at(-step)?);
            let (f2, b2) = (at(2.0 * step)?, at(-2.0 * step)?);
            grad.data_mut()[j] = (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic − numeric| / (|numeric| + 1e-12)`.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Compares the tape's adjoints of `f` against central differences.
///
/// `f` receives the leaves as taped variables and must return a scalar.
pub fn finite_diff_check<F>(f: F, leaves: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |point: &[Tensor<f64>]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out, vars))
    };
    let (tape, out, vars) = eval(leaves)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get(*v).cloned().expect("leaf gradient")).collect();
    let numeric = central_difference(
        |p| {
            let (tape, out, _) = eval(p)?;
            Ok(tape.value(&out).item())
        },
        leaves,
        step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{AttentionLayout, KeySpan};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(
            |t, v| {
                let sq = t.square(&v[0]);
                Ok(t.sum(&sq))
            },
            &[Tensor::scalar(3.0)],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn dot_self_gradient_is_twice_x() {
        let x = Tensor::from_rows(&[vec![1.5, -2.0, 0.25]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(&v, &v).unwrap();
        let loss = tape.sum(&sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.row_softmax(&v).unwrap();
        let loss = tape.sum(&s);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let a = tape.leaf(random(&mut rng, &[3, 4]));
        let b = tape.leaf(random(&mut rng, &[4, 2]));
        let c = tape.matmul(&a, &b).unwrap();
        let s = tape.row_softmax(&c).unwrap();
        let l = tape.ln(&s).unwrap();
        let loss = tape.sum(&l);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn two_layer_composition_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![random(&mut rng, &[3, 5]), random(&mut rng, &[5, 4]), random(&mut rng, &[4, 3])];
        let weights = random(&mut rng, &[3, 3]);
        let err = finite_diff_check(
            |t, v| {
                let h = t.matmul(&v[0], &v[1])?;
                let h = t.gelu(&h);
                let o = t.matmul(&h, &v[2])?;
                let p = t.row_softmax(&o)?;
                let w = t.mask(&p, &weights)?;
                Ok(t.sum(&w))
            },
            &leaves,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_op_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![
            random(&mut rng, &[4, 8]),
            random(&mut rng, &[8]),
            random(&mut rng, &[8]),
            random(&mut rng, &[2, 8]),
            random(&mut rng, &[8, 8]),
        ];
        let mask = random(&mut rng, &[4, 8]);
        let layout = Arc::new(
            AttentionLayout::new(
                vec![
                    KeySpan { shared: 2, own: 0..0 },
                    KeySpan { shared: 2, own: 2..3 },
                    KeySpan { shared: 2, own: 3..4 },
                    KeySpan { shared: 0, own: 3..5 },
                ],
                5,
            )
            .unwrap(),
        );
        let err = finite_diff_check(
            |t, v| {
                let x = t.layer_norm(&v[0], &v[1], &v[2])?;
                let x = t.mask(&x, &mask)?;
                let kv = t.concat_rows(&v[3], &x)?;
                let kv = t.select_rows(&kv, &[0, 1, 2, 3, 4])?;
                let q = t.matmul(&x, &v[4])?;
                let (att, _) = t.attention(&q, &kv, &kv, &layout, 2, false)?;
                let att = t.add_row(&att, &v[1])?;
                let y = t.matmul_nt(&att, &v[3])?;
                let y = t.scale(&y, 0.7);
                let p = t.row_softmax(&y)?;
                let p = t.gather_cols(&p, &[vec![1, 0], vec![0, 1], vec![1, 0], vec![0, 1]])?;
                let m = t.col_mean(&p)?;
                let lm = t.ln(&m)?;
                let lp = t.ln(&p)?;
                let neg = t.scale(&lm, -1.0);
                let dev = t.add_row(&lp, &neg)?;
                let sq = t.square(&dev);
                let e = t.mul(&p, &lp)?;
                let total = t.add(&sq, &e)?;
                Ok(t.sum(&total))
            },
            &leaves,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_adjoint_is_detected() {
        // f(x) = Σ x³ with a deliberately wrong adjoint 2x.
        let x = Tensor::from_rows(&[vec![0.7, -1.3, 2.1]]).unwrap();
        let value = |p: &[Tensor<f64>]| Ok(p[0].data().iter().map(|v| v * v * v).sum());
        let wrong = vec![x.map(|v| 2.0 * v)];
        let numeric = central_difference(value, std::slice::from_ref(&x), 1e-3).unwrap();
        assert!(max_relative_error(&wrong, &numeric) > 1e-2);
        let right = vec![x.map(|v| 3.0 * v * v)];
        assert!(max_relative_error(&right, &numeric) < 1e-8);
    }
}
