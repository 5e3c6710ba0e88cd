use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, Scalar, Tape, Tensor, TensorId};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_pos_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted scalar loss so that index bugs cannot cancel out.
fn weighted_loss(tape: &mut Tape<f64>, out: TensorId, seed: u64) -> TensorId {
    let mut r = rng(seed);
    let shape = tape.shape(out).to_vec();
    let w = rand_tensor(&shape, &mut r);
    let w = tape.constant(&w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

/// Central-difference check of every input element against the tape
/// gradient. Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
fn fd_check<F>(build: F, inputs: &[Tensor<f64>], tol: f64)
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    let run = |tensors: &[Tensor<f64>]| -> (Tape<f64>, Vec<TensorId>, TensorId) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = build(&mut tape, &ids);
        (tape, ids, loss)
    };

    let (mut tape, ids, loss) = run(inputs);
    backward(&mut tape, loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[j] += h;
            let (t_plus, _, l_plus) = run(&plus);
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[j] -= h;
            let (t_minus, _, l_minus) = run(&minus);
            let numeric = (t_plus.data(l_plus)[0] - t_minus.data(l_minus)[0]) / (2.0 * h);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
            assert!(
                rel < tol,
                "input {pi} elem {j}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
    assert!(worst.is_finite());
}

// ── forward oracles ─────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let eye = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_row_by_column() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(&Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 1]);
    assert_eq!(tape.data(c), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(7);
    let a = rand_tensor(&[3, 4], &mut r);
    let b = rand_tensor(&[4, 5], &mut r);
    // Independent oracle: naive triple sum.
    let mut expect = vec![0.0f64; 15];
    for i in 0..3 {
        for j in 0..5 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a.data()[i * 4 + p] * b.data()[p * 5 + j];
            }
            expect[i * 5 + j] = s;
        }
    }
    let mut tape = Tape::new();
    let (ia, ib) = (tape.constant(&a), tape.constant(&b));
    let c = tape.matmul(ia, ib).unwrap();
    for (got, want) in tape.data(c).iter().zip(&expect) {
        assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn matmul_batched_matches_per_slice_product() {
    let mut r = rng(8);
    let a = rand_tensor(&[2, 3, 4], &mut r);
    let b3 = rand_tensor(&[2, 4, 5], &mut r);
    let b2 = rand_tensor(&[4, 5], &mut r);
    let mut tape = Tape::new();
    let (ia, ib3, ib2) = (tape.constant(&a), tape.constant(&b3), tape.constant(&b2));
    let c3 = tape.matmul(ia, ib3).unwrap();
    let c2 = tape.matmul(ia, ib2).unwrap();
    assert_eq!(tape.shape(c3), &[2, 3, 5]);
    assert_eq!(tape.shape(c2), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let mut s3 = 0.0;
                let mut s2 = 0.0;
                for p in 0..4 {
                    s3 += a.data()[bi * 12 + i * 4 + p] * b3.data()[bi * 20 + p * 5 + j];
                    s2 += a.data()[bi * 12 + i * 4 + p] * b2.data()[p * 5 + j];
                }
                assert!((tape.data(c3)[bi * 15 + i * 5 + j] - s3).abs() < 1e-12);
                assert!((tape.data(c2)[bi * 15 + i * 5 + j] - s2).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(&Tensor::zeros(vec![2, 3]));
    let b = tape.constant(&Tensor::zeros(vec![4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax_lastdim(x).unwrap();
    assert_eq!(tape.data(y), &[0.5, 0.5]);

    let x = tape.constant(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax_lastdim(x).unwrap();
    assert!((tape.data(y)[0] - 1.0).abs() < 1e-9);
    assert!(tape.data(y)[1].abs() < 1e-9);
}

#[test]
fn softmax_matches_formula_oracle() {
    let x = [1.0f64, 2.0, 3.0];
    let m = 3.0;
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let expect: Vec<f64> = exps.iter().map(|e| e / z).collect();

    let mut tape = Tape::new();
    let ix = tape.constant(&Tensor::new(vec![1, 3], x.to_vec()).unwrap());
    let y = tape.softmax_lastdim(ix).unwrap();
    for (got, want) in tape.data(y).iter().zip(&expect) {
        assert!((got - want).abs() < 1e-7);
    }
    let sum: f64 = tape.data(y).iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_rejects_empty_last_dim() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![2, 0]));
    assert!(tape.softmax_lastdim(x).is_err());
}

#[test]
fn layer_norm_constant_token_is_zeroed() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::filled(vec![1, 4], 5.0));
    let gamma = tape.constant(&Tensor::filled(vec![4], 1.0));
    let beta = tape.constant(&Tensor::zeros(vec![4]));
    let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for &v in tape.data(y) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_zero_gamma_yields_beta() {
    let mut tape: Tape<f64> = Tape::new();
    let mut r = rng(3);
    let x = rand_tensor(&[2, 4], &mut r);
    let x = tape.constant(&x);
    let gamma = tape.constant(&Tensor::zeros(vec![4]));
    let beta = tape.constant(&Tensor::new(vec![4], vec![0.7, -0.2, 0.1, 2.0]).unwrap());
    let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for row in tape.data(y).chunks_exact(4) {
        assert_eq!(row, &[0.7, -0.2, 0.1, 2.0]);
    }
}

#[test]
fn layer_norm_statistics_oracle() {
    let mut tape: Tape<f64> = Tape::new();
    let mut r = rng(4);
    let x = rand_tensor(&[3, 16], &mut r);
    let x = tape.constant(&x);
    let gamma = tape.constant(&Tensor::filled(vec![16], 1.0));
    let beta = tape.constant(&Tensor::zeros(vec![16]));
    let y = tape.layer_norm(x, gamma, beta, 1e-8).unwrap();
    for row in tape.data(y).chunks_exact(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_rejects_param_mismatch() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![2, 4]));
    let gamma = tape.constant(&Tensor::zeros(vec![3]));
    let beta = tape.constant(&Tensor::zeros(vec![4]));
    assert!(tape.layer_norm(x, gamma, beta, 1e-5).is_err());
}

#[test]
fn batch_norm_train_unit_batch_stats() {
    // One channel holding {-1, +1}: already zero-mean unit-variance.
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap());
    let gamma = tape.constant(&Tensor::filled(vec![1], 1.0));
    let beta = tape.constant(&Tensor::zeros(vec![1]));
    let (y, stats) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    assert!((tape.data(y)[0] + 1.0).abs() < 1e-4);
    assert!((tape.data(y)[1] - 1.0).abs() < 1e-4);
    assert_eq!(stats.mean, vec![0.0]);
    assert!((stats.var[0] - 1.0).abs() < 1e-12);
    assert_eq!(stats.count, 2);
}

#[test]
fn batch_norm_eval_with_unit_running_stats_is_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let mut r = rng(5);
    let x = rand_tensor(&[3, 2, 4], &mut r);
    let ix = tape.constant(&x);
    let gamma = tape.constant(&Tensor::filled(vec![2], 1.0));
    let beta = tape.constant(&Tensor::zeros(vec![2]));
    let y = tape
        .batch_norm_eval(ix, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], 0.0)
        .unwrap();
    for (got, want) in tape.data(y).iter().zip(x.data()) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_statistics_oracle() {
    let mut tape: Tape<f64> = Tape::new();
    let mut r = rng(6);
    let x = rand_tensor(&[4, 3, 5], &mut r);
    let ix = tape.constant(&x);
    let gamma = tape.constant(&Tensor::filled(vec![3], 1.0));
    let beta = tape.constant(&Tensor::zeros(vec![3]));
    let (y, _) = tape.batch_norm_train(ix, gamma, beta, 1e-10).unwrap();
    let yd = tape.data(y);
    for ch in 0..3 {
        let mut vals = Vec::new();
        for bi in 0..4 {
            for si in 0..5 {
                vals.push(yd[(bi * 3 + ch) * 5 + si]);
            }
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gelu_fixed_points() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = tape.gelu(x).unwrap();
    assert_eq!(tape.data(y)[0], 0.0);
    assert!((tape.data(y)[1] - 10.0).abs() < 1e-6);
    // Phi(1) = 0.5 * (1 + erf(1/sqrt(2))), frozen from tables.
    let phi1 = 0.8413447460685429;
    assert!((tape.data(y)[2] - phi1).abs() < 1e-7);
}

#[test]
fn normalize_rows_zero_sum_falls_back_to_uniform() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(&Tensor::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap());
    let (w, mask) = tape.normalize_rows_or_uniform(a).unwrap();
    assert_eq!(mask, vec![true, false]);
    assert_eq!(&tape.data(w)[..4], &[0.25, 0.25, 0.25, 0.25]);
    assert_eq!(&tape.data(w)[4..], &[0.25, 0.25, 0.25, 0.25]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape: Tape<f64> = Tape::new();
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
    let ix = tape.leaf(&x, true);
    let loss = tape.sum_all(ix).unwrap();
    backward(&mut tape, loss).unwrap();
    assert_eq!(tape.grad(ix).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let mut tape: Tape<f64> = Tape::new();
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let ix = tape.leaf(&x, true);
    let sq = tape.mul(ix, ix).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    backward(&mut tape, loss).unwrap();
    assert_eq!(tape.grad(ix).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape: Tape<f64> = Tape::new();
    let x = Tensor::zeros(vec![2, 2]);
    let ix = tape.leaf(&x, true);
    assert!(backward(&mut tape, ix).is_err());
}

#[test]
fn unreachable_leaf_has_no_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&Tensor::filled(vec![2], 1.0), true);
    let y = tape.leaf(&Tensor::filled(vec![2], 1.0), true);
    let loss = tape.sum_all(x).unwrap();
    backward(&mut tape, loss).unwrap();
    assert!(tape.grad(x).is_some());
    assert!(tape.grad(y).is_none());
}

#[test]
fn kernels_are_deterministic_across_runs() {
    let run = || {
        let mut r = rng(42);
        let a = rand_tensor(&[4, 8, 8], &mut r);
        let b = rand_tensor(&[8, 8], &mut r);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(&a, true), tape.constant(&b));
        let c = tape.matmul(ia, ib).unwrap();
        let s = tape.softmax_lastdim(c).unwrap();
        let g = tape.gelu(s).unwrap();
        let loss = tape.sum_all(g).unwrap();
        backward(&mut tape, loss).unwrap();
        (tape.data(loss).to_vec(), tape.grad(ia).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn non_finite_output_is_surfaced() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::filled(vec![2], 1e308));
    let err = tape.add(x, x).unwrap_err();
    assert!(matches!(err, crate::error::Error::NonFinite { .. }));
}

// ── finite-difference checks for every differentiable op ────────────────

#[test]
fn fd_matmul_2d() {
    let mut r = rng(10);
    let inputs = vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[4, 5], &mut r)];
    fd_check(
        |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            weighted_loss(t, c, 1)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_matmul_batched() {
    let mut r = rng(11);
    let inputs = vec![rand_tensor(&[2, 3, 4], &mut r), rand_tensor(&[2, 4, 3], &mut r)];
    fd_check(
        |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            weighted_loss(t, c, 2)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_matmul_broadcast_rhs() {
    let mut r = rng(12);
    let inputs = vec![rand_tensor(&[2, 3, 4], &mut r), rand_tensor(&[4, 6], &mut r)];
    fd_check(
        |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            weighted_loss(t, c, 3)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_transpose_last2() {
    let mut r = rng(13);
    let inputs = vec![rand_tensor(&[2, 3, 4], &mut r)];
    fd_check(
        |t, ids| {
            let c = t.transpose_last2(ids[0]).unwrap();
            weighted_loss(t, c, 4)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_add_and_mul() {
    let mut r = rng(14);
    let inputs = vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[3, 4], &mut r)];
    fd_check(
        |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let m = t.mul(s, ids[1]).unwrap();
            weighted_loss(t, m, 5)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_add_bias() {
    let mut r = rng(15);
    let inputs = vec![rand_tensor(&[2, 3, 4], &mut r), rand_tensor(&[4], &mut r)];
    fd_check(
        |t, ids| {
            let c = t.add_bias(ids[0], ids[1]).unwrap();
            weighted_loss(t, c, 6)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_add_pos_and_broadcast_token() {
    let mut r = rng(16);
    let inputs = vec![
        rand_tensor(&[2, 3, 4], &mut r),
        rand_tensor(&[3, 4], &mut r),
        rand_tensor(&[4], &mut r),
    ];
    fd_check(
        |t, ids| {
            let p = t.add_pos(ids[0], ids[1]).unwrap();
            let tok = t.broadcast_token(ids[2], 2).unwrap();
            let cat = t.concat_tokens(&[tok, p]).unwrap();
            weighted_loss(t, cat, 7)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_scale_gelu() {
    let mut r = rng(17);
    let inputs = vec![rand_tensor(&[3, 5], &mut r)];
    fd_check(
        |t, ids| {
            let s = t.scale(ids[0], 0.7).unwrap();
            let g = t.gelu(s).unwrap();
            weighted_loss(t, g, 8)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_softmax() {
    let mut r = rng(18);
    let inputs = vec![rand_tensor(&[4, 6], &mut r)];
    fd_check(
        |t, ids| {
            let s = t.softmax_lastdim(ids[0]).unwrap();
            weighted_loss(t, s, 9)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_layer_norm() {
    let mut r = rng(19);
    let inputs = vec![
        rand_tensor(&[3, 6], &mut r),
        rand_pos_tensor(&[6], &mut r),
        rand_tensor(&[6], &mut r),
    ];
    fd_check(
        |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            weighted_loss(t, y, 10)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_batch_norm_train() {
    let mut r = rng(20);
    let inputs = vec![
        rand_tensor(&[4, 3, 2], &mut r),
        rand_pos_tensor(&[3], &mut r),
        rand_tensor(&[3], &mut r),
    ];
    fd_check(
        |t, ids| {
            let (y, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
            weighted_loss(t, y, 11)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_batch_norm_eval() {
    let mut r = rng(21);
    let inputs = vec![
        rand_tensor(&[3, 2], &mut r),
        rand_pos_tensor(&[2], &mut r),
        rand_tensor(&[2], &mut r),
    ];
    fd_check(
        |t, ids| {
            let y = t
                .batch_norm_eval(ids[0], ids[1], ids[2], &[0.3, -0.2], &[1.4, 0.8], 1e-5)
                .unwrap();
            weighted_loss(t, y, 12)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_reshape_slices_heads() {
    let mut r = rng(22);
    let inputs = vec![rand_tensor(&[2, 3, 8], &mut r)];
    fd_check(
        |t, ids| {
            let q = t.slice_lastdim(ids[0], 2, 4).unwrap();
            let h = t.to_heads(q, 2).unwrap();
            let back = t.from_heads(h, 2).unwrap();
            let r = t.reshape(back, vec![6, 4]).unwrap();
            weighted_loss(t, r, 13)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_slice_concat_tokens() {
    let mut r = rng(23);
    let inputs = vec![rand_tensor(&[2, 5, 3], &mut r), rand_tensor(&[2, 2, 3], &mut r)];
    fd_check(
        |t, ids| {
            let mid = t.slice_tokens(ids[0], 1, 3).unwrap();
            let cat = t.concat_tokens(&[mid, ids[1]]).unwrap();
            weighted_loss(t, cat, 14)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_gather_tokens_and_scores() {
    let mut r = rng(24);
    let inputs = vec![rand_tensor(&[2, 5, 3], &mut r), rand_tensor(&[2, 5], &mut r)];
    let idx = vec![0u32, 3, 4, 1, 2, 2]; // per-sample, with a repeat
    fd_check(
        move |t, ids| {
            let g = t.gather_tokens(ids[0], &idx, 3).unwrap();
            let s = t.gather_scores(ids[1], &idx, 3).unwrap();
            let ws = t.weighted_sum_tokens(g, s).unwrap();
            weighted_loss(t, ws, 15)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_cls_attention() {
    let mut r = rng(25);
    let inputs = vec![rand_tensor(&[4, 3, 3], &mut r)]; // B=2, H=2
    fd_check(
        |t, ids| {
            let a = t.softmax_lastdim(ids[0]).unwrap();
            let c = t.cls_attention(a, 2).unwrap();
            weighted_loss(t, c, 16)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_normalize_rows() {
    let mut r = rng(26);
    let inputs = vec![rand_pos_tensor(&[3, 4], &mut r)];
    fd_check(
        |t, ids| {
            let (w, _) = t.normalize_rows_or_uniform(ids[0]).unwrap();
            weighted_loss(t, w, 17)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_mean_tokens() {
    let mut r = rng(27);
    let inputs = vec![rand_tensor(&[2, 6, 3], &mut r)];
    fd_check(
        |t, ids| {
            let m = t.mean_tokens(ids[0], 1, 5).unwrap();
            weighted_loss(t, m, 18)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_stack_and_depthwise_conv() {
    let mut r = rng(28);
    let inputs = vec![
        rand_tensor(&[2, 3], &mut r),
        rand_tensor(&[2, 3], &mut r),
        rand_tensor(&[3, 2, 2], &mut r), // kernel [D=3, M=2, g=2]
    ];
    fd_check(
        |t, ids| {
            let stacked = t.stack_lastdim(&[ids[0], ids[1]]).unwrap();
            let agg = t.depthwise_conv_full(stacked, ids[2]).unwrap();
            weighted_loss(t, agg, 19)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn fd_cross_entropy() {
    let mut r = rng(29);
    let inputs = vec![rand_tensor(&[3, 5], &mut r)];
    for smoothing in [0.0, 0.1] {
        fd_check(
            |t, ids| t.cross_entropy_mean(ids[0], &[1, 4, 0], smoothing).unwrap(),
            &inputs,
            1e-4,
        );
    }
}

#[test]
fn fd_attention_composite() {
    // Full two-head attention graph, checking interplay of the pieces.
    // No bias on the key path: softmax is invariant to per-row shifts, so a
    // key bias has an exactly-zero gradient that finite differences can only
    // see as roundoff noise.
    let mut r = rng(30);
    let inputs = vec![
        rand_tensor(&[1, 4, 6], &mut r),
        rand_tensor(&[6, 18], &mut r),
        rand_tensor(&[6], &mut r),
        rand_tensor(&[6], &mut r),
    ];
    fd_check(
        |t, ids| {
            let qkv = t.matmul(ids[0], ids[1]).unwrap();
            let q = t.slice_lastdim(qkv, 0, 6).unwrap();
            let k = t.slice_lastdim(qkv, 6, 6).unwrap();
            let v = t.slice_lastdim(qkv, 12, 6).unwrap();
            let q = t.add_bias(q, ids[2]).unwrap();
            let v = t.add_bias(v, ids[3]).unwrap();
            let q = t.to_heads(q, 2).unwrap();
            let k = t.to_heads(k, 2).unwrap();
            let v = t.to_heads(v, 2).unwrap();
            let kt = t.transpose_last2(k).unwrap();
            let scores = t.matmul(q, kt).unwrap();
            let scores = t.scale(scores, 1.0 / (3.0f64).sqrt()).unwrap();
            let attn = t.softmax_lastdim(scores).unwrap();
            let ctx = t.matmul(attn, v).unwrap();
            let merged = t.from_heads(ctx, 2).unwrap();
            weighted_loss(t, merged, 20)
        },
        &inputs,
        1e-4,
    );
}
