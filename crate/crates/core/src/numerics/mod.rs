//! Minimal dense-tensor computation core with reverse-mode gradients.
//!
//! Exactly the primitives the encoder and losses need, plus a
//! finite-difference verification harness. Tensors are immutable once
//! written by a forward op; one optimization step is single-threaded over
//! the tape.

mod gradcheck;
pub mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, numeric_gradients, rel_err, GradCheckReport, ParamCheck};
pub use tape::{NumericsError, Tape, Var, GATHER_ZERO_ROW};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, vec![4, 5]);
        let b = randn(&mut rng, vec![5, 3]);
        let params = vec![("a".to_string(), a), ("b".to_string(), b)];
        let report = check_gradients(
            &params,
            |t, vars| {
                let c = t.matmul(vars[0], vars[1])?;
                Ok(t.sum(c))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = randn(&mut rng, vec![3, 7]);
            let shift: f64 = rng.sample(StandardNormal);
            let mut t: Tape<f64> = Tape::new();
            let v = t.constant(x.clone());
            let y = t.softmax_rows(v);
            for r in 0..3 {
                let s: f64 = t.value(y).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(t.value(y).row(r).iter().all(|&p| p > 0.0));
            }
            let shifted = Tensor::new(
                vec![3, 7],
                x.data().iter().map(|&v| v + shift).collect::<Vec<_>>(),
            );
            let mut t2: Tape<f64> = Tape::new();
            let v2 = t2.constant(shifted);
            let y2 = t2.softmax_rows(v2);
            for (a, b) in t.value(y).data().iter().zip(t2.value(y2).data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 4], vec![2.5; 4]));
        let gain = t.constant(Tensor::new(vec![4], vec![1.0; 4]));
        let bias = t.constant(Tensor::zeros(vec![4]));
        let y = t.layer_norm(x, gain, bias, 1e-5);
        for &v in t.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_symmetry() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]));
        let gain = t.constant(Tensor::new(vec![2], vec![1.0; 2]));
        let bias = t.constant(Tensor::zeros(vec![2]));
        let y = t.layer_norm(x, gain, bias, 1e-12);
        assert!((t.value(y).data()[0] + 1.0).abs() < 1e-5);
        assert!((t.value(y).data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            ("x".to_string(), randn(&mut rng, vec![3, 8])),
            ("gain".to_string(), randn(&mut rng, vec![8])),
            ("bias".to_string(), randn(&mut rng, vec![8])),
        ];
        let report = check_gradients(
            &params,
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
                let s = t.gelu(y);
                Ok(t.sum(s))
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn every_primitive_passes_gradcheck_over_20_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 2 + (seed as usize % 3);
            let n = 3 + (seed as usize % 4);
            let params = vec![
                ("a".to_string(), randn(&mut rng, vec![m, n])),
                ("b".to_string(), randn(&mut rng, vec![n, m])),
                ("gain".to_string(), randn(&mut rng, vec![m])),
                ("bias".to_string(), randn(&mut rng, vec![m])),
                ("s".to_string(), randn(&mut rng, vec![1])),
            ];
            let mask = randn(&mut rng, vec![m, m]);
            let report = check_gradients(
                &params,
                |t, v| {
                    let c = t.matmul(v[0], v[1])?; // m×m
                    let c = t.add_const(c, &mask);
                    let sm = t.softmax_rows(c);
                    let ln = t.layer_norm(sm, v[2], v[3], 1e-5);
                    let ge = t.gelu(ln);
                    let sp = t.softplus(ge);
                    let sc = t.scale_by(sp, v[4]);
                    let nt = t.matmul_nt(sc, sc)?;
                    let row = t.gather_rows(nt, &[0, m - 1]);
                    let stacked = t.concat_rows(&[row, row]);
                    let sl = t.slice_cols(stacked, 0, m.min(2));
                    let ce = t.cross_entropy(sl, 1);
                    let picked = t.pick_many(sl, &[0, 1]);
                    let ssum = t.sum(picked);
                    let mn = t.mean(sl);
                    let total = t.add_n(&[ce, ssum, mn]);
                    Ok(t.sum(total))
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "seed {seed}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn linear_function_gradcheck_is_essentially_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = randn(&mut rng, vec![1, 6]);
        let x = randn(&mut rng, vec![1, 6]);
        let params = vec![("w".to_string(), w)];
        let report = check_gradients(
            &params,
            |t, v| {
                let xc = t.constant(x.clone());
                let y = t.matmul_nt(v[0], xc)?;
                Ok(t.sum(y))
            },
            1e-2,
            1e-12,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = randn(&mut rng, vec![2, 3]);
        let params = vec![("w".to_string(), w.clone())];
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.matmul_nt(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        // analytic gradient, then corrupt one weight by +10%
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let loss = build(&mut tape, &[wv]).unwrap();
        tape.backward(loss);
        let mut analytic = tape.grad(wv).unwrap().clone();
        analytic.data_mut()[2] *= 1.1;
        let numeric = numeric_gradients(&params, build, 1e-5).unwrap();
        let worst = analytic
            .data()
            .iter()
            .zip(numeric[0].data())
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0f64, f64::max);
        assert!(worst > 1e-4, "corruption not detected: {worst}");
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut calls = 0u32;
        let params = vec![("w".to_string(), Tensor::<f64>::scalar(1.0))];
        let err = check_gradients(
            &params,
            |t, v| {
                calls += 1;
                let c = t.constant(Tensor::scalar(calls as f64));
                Ok(t.add(v[0], c))
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonDeterministic { .. }));
    }

    #[test]
    fn backward_accumulates_each_param_exactly_once_per_use() {
        let mut t: Tape<f64> = Tape::new();
        let w = t.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        // w participates in two loss terms -> two accumulations, exact sum
        let a = t.sum(w);
        let b = t.scale_const(w, 3.0);
        let bsum = t.sum(b);
        let loss = t.add(a, bsum);
        t.backward(loss);
        assert_eq!(t.accum_count(w), 2);
        let g = t.grad(w).unwrap();
        assert_eq!(g.data(), &[4.0, 4.0]);
        // a second backward resets rather than double-accumulating
        t.backward(loss);
        assert_eq!(t.accum_count(w), 2);
        assert_eq!(t.grad(w).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn gather_zero_row_yields_zeros_and_no_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let table = t.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = t.gather_rows(table, &[1, GATHER_ZERO_ROW]);
        assert_eq!(t.value(g).row(0), &[4.0, 5.0, 6.0]);
        assert_eq!(t.value(g).row(1), &[0.0, 0.0, 0.0]);
        let s = t.sum(g);
        t.backward(s);
        let grad = t.grad(table).unwrap();
        assert_eq!(grad.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(grad.row(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = randn(&mut rng, vec![20]);
            let target = rng.gen_range(0..20);
            let mut t: Tape<f64> = Tape::new();
            let v = t.constant(x.clone());
            let loss = t.cross_entropy(v, target);
            let naive = scalar::logsumexp(x.data()) - x.data()[target];
            assert!((t.value(loss).item() - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_extreme_logit_does_not_overflow() {
        let mut t: Tape<f64> = Tape::new();
        let mut data = vec![0.0; 10];
        data[4] = 1000.0;
        let v = t.constant(Tensor::new(vec![10], data));
        let loss = t.cross_entropy(v, 4);
        assert!(t.value(loss).item().abs() < 1e-6);
        assert!(t.value(loss).item().is_finite());
    }
}
