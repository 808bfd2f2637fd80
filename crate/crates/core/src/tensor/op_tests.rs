//! Forward oracles and finite-difference gradient checks for every
//! primitive. The numeric oracle is `grad_check` (central differences);
//! expected forward values are closed-form.

use super::*;
use crate::rng::{derive_rng, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn rng(ix: u64) -> ChaCha8Rng {
    derive_rng(0xC0FFEE, Stream::ParamInit, ix)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalarize an op output against a fixed random cotangent so every output
/// element contributes to the loss.
fn scalarize(tape: &mut Tape, out: TensorId, cot: &[f64]) -> TensorId {
    let shape = tape.shape(out).to_vec();
    let r = tape
        .constant(shape, cot.to_vec())
        .expect("cotangent shape");
    let p = tape.mul(out, r).unwrap();
    tape.sum(p).unwrap()
}

fn check<F>(f: F, inputs: &[Tensor])
where
    F: Fn(&mut Tape, &[TensorId]) -> crate::Result<TensorId> + Sync,
{
    let report = grad_check(&f, inputs, STEP, TOL).expect("grad check evaluation");
    assert!(
        report.pass(),
        "max rel err {} over {} points",
        report.max_rel_err,
        report.points
    );
}

fn cotangent(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ── forward oracles ─────────────────────────────────────────────────────

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    for &v in tape.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn l2_normalize_three_four_five() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let y = tape.l2_normalize_rows(x).unwrap();
    assert!((tape.data(y)[0] - 0.6).abs() < 1e-15);
    assert!((tape.data(y)[1] - 0.8).abs() < 1e-15);
}

#[test]
fn matmul_identity_preserves_input() {
    let mut tape = Tape::new();
    let eye = tape
        .constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
        .unwrap();
    let a_data: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
    let a = tape.constant(vec![3, 4], a_data.clone()).unwrap();
    let out = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.data(out), a_data.as_slice());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(1);
    let mut tape = Tape::new();
    let x = tape.input(rand_tensor(&[20, 7], &mut r, -5.0, 5.0));
    let y = tape.softmax_rows(x).unwrap();
    for row in tape.data(y).chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn normalized_rows_have_unit_norm() {
    let mut r = rng(2);
    let mut tape = Tape::new();
    let x = tape.input(rand_tensor(&[20, 7], &mut r, -2.0, 2.0));
    let y = tape.l2_normalize_rows(x).unwrap();
    for row in tape.data(y).chunks(7) {
        assert!((raw::dot(row, row).sqrt() - 1.0).abs() < 1e-12);
    }
}

// ── backward oracles ────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.input(
        Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0])
            .unwrap()
            .with_grad(),
    );
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_half_squared_norm_is_x() {
    let data = vec![1.5, -0.25, 2.0, 0.0, 7.25, -3.0];
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![6], data.clone()).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let loss = tape.scale(s, 0.5).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), data.as_slice());
}

#[test]
fn backward_of_log_softmax_pick_matches_formula() {
    let data = vec![0.3, -1.2, 2.0, 0.7];
    let k = 2;
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![1, 4], data.clone()).unwrap().with_grad());
    let lsm = tape.log_softmax_rows(x).unwrap();
    let pick = tape.gather_elems(lsm, &[k]).unwrap();
    let loss = tape.sum(pick).unwrap();
    tape.backward(loss).unwrap();

    let mut sm = vec![0.0; 4];
    raw::softmax_row(&data, &mut sm);
    let grad = tape.grad(x).unwrap();
    for j in 0..4 {
        let expected = if j == k { 1.0 - sm[j] } else { -sm[j] };
        assert!((grad[j] - expected).abs() < 1e-12);
    }

    // Cross-check against central differences as well.
    let f = |tape: &mut Tape, ids: &[TensorId]| {
        let lsm = tape.log_softmax_rows(ids[0])?;
        let pick = tape.gather_elems(lsm, &[k])?;
        tape.sum(pick)
    };
    let report = grad_check(
        &f,
        &[Tensor::new(vec![1, 4], data).unwrap()],
        STEP,
        TOL,
    )
    .unwrap();
    assert!(report.pass(), "rel err {}", report.max_rel_err);
}

#[test]
fn grad_check_sum_of_squares_is_tight() {
    // Central differences are exact for quadratics, so a larger step only
    // reduces round-off; 1e-4 keeps the error comfortably under 1e-9.
    let mut r = rng(3);
    let x = rand_tensor(&[3, 3], &mut r, -2.0, 2.0);
    let f = |tape: &mut Tape, ids: &[TensorId]| {
        let sq = tape.mul(ids[0], ids[0])?;
        tape.sum(sq)
    };
    let report = grad_check(&f, &[x], 1e-4, 1e-9).unwrap();
    assert!(report.pass(), "rel err {}", report.max_rel_err);
}

#[test]
fn repeated_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::scalar(2.0).with_grad());
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(
        tape.backward(loss),
        Err(crate::Error::BackwardTwice)
    ));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    assert!(matches!(
        tape.backward(x),
        Err(crate::Error::NonScalarLoss { .. })
    ));
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        let mut r = rng(4);
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(&[4, 6], &mut r, -1.0, 1.0).with_grad());
        let w = tape.input(rand_tensor(&[6, 3], &mut r, -1.0, 1.0).with_grad());
        let y = tape.matmul(x, w).unwrap();
        let s = tape.softmax_rows(y).unwrap();
        let loss = tape.mean(s).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.scalar_value(loss).to_bits(),
            tape.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

// ── error contracts ─────────────────────────────────────────────────────

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![4, 2], vec![0.0; 8]).unwrap();
    match tape.matmul(a, b) {
        Err(crate::Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(tape.log(x), Err(crate::Error::Domain { .. })));
}

#[test]
fn normalize_of_zero_row_is_domain_error() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    assert!(matches!(
        tape.l2_normalize_rows(x),
        Err(crate::Error::Domain { .. })
    ));
}

// ── per-primitive finite-difference sweep ───────────────────────────────

#[test]
fn fd_matmul_and_variants() {
    for seed in 0..3 {
        let mut r = rng(10 + seed);
        let a = rand_tensor(&[4, 5], &mut r, -1.0, 1.0);
        let b = rand_tensor(&[5, 3], &mut r, -1.0, 1.0);
        let bt = rand_tensor(&[3, 5], &mut r, -1.0, 1.0);
        let w = rand_tensor(&[5, 3], &mut r, -1.0, 1.0);
        let bias = rand_tensor(&[3], &mut r, -0.5, 0.5);
        let cot = cotangent(12, &mut r);

        let c1 = cot.clone();
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.matmul(ids[0], ids[1])?;
                Ok(scalarize(tape, y, &c1))
            },
            &[a.clone(), b],
        );
        let c2 = cot.clone();
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.matmul_nt(ids[0], ids[1])?;
                Ok(scalarize(tape, y, &c2))
            },
            &[a.clone(), bt],
        );
        let c3 = cot;
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.linear(ids[0], ids[1], ids[2])?;
                Ok(scalarize(tape, y, &c3))
            },
            &[a, w, bias],
        );
    }
}

#[test]
fn fd_elementwise_ops() {
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let a = rand_tensor(&[3, 4], &mut r, -1.5, 1.5);
        let b = rand_tensor(&[3, 4], &mut r, -1.5, 1.5);
        let pos = rand_tensor(&[3, 4], &mut r, 0.2, 3.0);
        let s = rand_tensor(&[1], &mut r, 0.5, 2.0);
        let cot = cotangent(12, &mut r);

        let ops: Vec<Box<dyn Fn(&mut Tape, &[TensorId]) -> crate::Result<TensorId> + Sync>> = vec![
            Box::new(|t, ids| t.add(ids[0], ids[1])),
            Box::new(|t, ids| t.sub(ids[0], ids[1])),
            Box::new(|t, ids| t.mul(ids[0], ids[1])),
        ];
        for op in ops {
            let c = cot.clone();
            check(
                |tape: &mut Tape, ids: &[TensorId]| {
                    let y = op(tape, ids)?;
                    Ok(scalarize(tape, y, &c))
                },
                &[a.clone(), b.clone()],
            );
        }

        let c = cot.clone();
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.mul_scalar_t(ids[0], ids[1])?;
                Ok(scalarize(tape, y, &c))
            },
            &[a.clone(), s],
        );
        let c = cot.clone();
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.scale(ids[0], -1.7)?;
                let y = tape.add_scalar(y, 0.3)?;
                Ok(scalarize(tape, y, &c))
            },
            &[a.clone()],
        );
        let c = cot.clone();
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.exp(ids[0])?;
                Ok(scalarize(tape, y, &c))
            },
            &[a.clone()],
        );
        let c = cot.clone();
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.log(ids[0])?;
                Ok(scalarize(tape, y, &c))
            },
            &[pos],
        );
        let c = cot;
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.gelu(ids[0])?;
                Ok(scalarize(tape, y, &c))
            },
            &[a],
        );
    }
}

#[test]
fn fd_row_ops() {
    for seed in 0..3 {
        let mut r = rng(30 + seed);
        let x = rand_tensor(&[4, 6], &mut r, -2.0, 2.0);
        let gain = rand_tensor(&[6], &mut r, 0.5, 1.5);
        let bias = rand_tensor(&[6], &mut r, -0.5, 0.5);
        let cot = cotangent(24, &mut r);

        let c = cot.clone();
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.l2_normalize_rows(ids[0])?;
                Ok(scalarize(tape, y, &c))
            },
            &[x.clone()],
        );
        let c = cot.clone();
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.softmax_rows(ids[0])?;
                Ok(scalarize(tape, y, &c))
            },
            &[x.clone()],
        );
        let c = cot.clone();
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.log_softmax_rows(ids[0])?;
                Ok(scalarize(tape, y, &c))
            },
            &[x.clone()],
        );
        let c = cot;
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.layer_norm_rows(ids[0], ids[1], ids[2], 1e-5)?;
                Ok(scalarize(tape, y, &c))
            },
            &[x, gain, bias],
        );
    }
}

#[test]
fn fd_reductions_and_shapes() {
    for seed in 0..3 {
        let mut r = rng(40 + seed);
        let x = rand_tensor(&[5, 4], &mut r, -2.0, 2.0);
        let y2 = rand_tensor(&[5, 3], &mut r, -2.0, 2.0);
        let blocks = RowBlocks::from_lens(vec![2, 1, 2]);

        check(
            |tape: &mut Tape, ids: &[TensorId]| tape.sum(ids[0]),
            &[x.clone()],
        );
        check(
            |tape: &mut Tape, ids: &[TensorId]| tape.mean(ids[0]),
            &[x.clone()],
        );
        let b = blocks.clone();
        let mut rr = rng(400 + seed);
        let c = cotangent(3 * 4, &mut rr);
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.segment_mean_rows(ids[0], &b)?;
                Ok(scalarize(tape, y, &c))
            },
            &[x.clone()],
        );
        let mut rr = rng(500 + seed);
        let c = cotangent(5 * 7, &mut rr);
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.concat_cols(ids[0], ids[1])?;
                Ok(scalarize(tape, y, &c))
            },
            &[x.clone(), y2],
        );
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let a = tape.mean(ids[0])?;
                let b = tape.sum(ids[0])?;
                let st = tape.stack_scalars(&[a, b, a])?;
                tape.mean(st)
            },
            &[x.clone()],
        );
        let mut rr = rng(600 + seed);
        let c = cotangent(3 * 4, &mut rr);
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.gather_rows(ids[0], &[4, 0, 4])?;
                Ok(scalarize(tape, y, &c))
            },
            &[x.clone()],
        );
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.gather_elems(ids[0], &[0, 7, 7, 19])?;
                tape.sum(y)
            },
            &[x.clone()],
        );
        let mask: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let m = mask.clone();
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.masked_fill(ids[0], &m, 0.25)?;
                tape.sum(y)
            },
            &[x.clone()],
        );
        check(
            |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.reshape(ids[0], vec![4, 5])?;
                let z = tape.mul(y, y)?;
                tape.sum(z)
            },
            &[x],
        );
    }
}

#[test]
fn fd_attention_self_and_cross() {
    for seed in 0..2 {
        let mut r = rng(50 + seed);
        let d = 8;
        let heads = 2;
        let xq = rand_tensor(&[5, d], &mut r, -1.0, 1.0);
        let xkv = rand_tensor(&[7, d], &mut r, -1.0, 1.0);
        let weights: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[d, d], &mut r, -0.4, 0.4)).collect();
        let biases: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[d], &mut r, -0.1, 0.1)).collect();
        let qb = RowBlocks::from_lens(vec![2, 3]);
        let kb = RowBlocks::from_lens(vec![4, 3]);
        let mut rr = rng(700 + seed);
        let c = cotangent(5 * d, &mut rr);

        // cross-attention: q and kv come from different tensors
        let mut inputs = vec![xq.clone(), xkv];
        inputs.extend(weights.iter().cloned());
        inputs.extend(biases.iter().cloned());
        let (qbc, kbc, cc) = (qb.clone(), kb.clone(), c.clone());
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let w = AttnWeights {
                    wq: ids[2],
                    wk: ids[3],
                    wv: ids[4],
                    wo: ids[5],
                    bq: ids[6],
                    bk: ids[7],
                    bv: ids[8],
                    bo: ids[9],
                };
                let y = tape.attention(ids[0], ids[1], &qbc, &kbc, w, heads)?;
                Ok(scalarize(tape, y, &cc))
            },
            &inputs,
        );

        // self-attention: same tensor feeds q and kv (gradient accumulates)
        let mut inputs = vec![xq];
        inputs.extend(weights);
        inputs.extend(biases);
        check(
            move |tape: &mut Tape, ids: &[TensorId]| {
                let w = AttnWeights {
                    wq: ids[1],
                    wk: ids[2],
                    wv: ids[3],
                    wo: ids[4],
                    bq: ids[5],
                    bk: ids[6],
                    bv: ids[7],
                    bo: ids[8],
                };
                let y = tape.attention(ids[0], ids[0], &qb, &qb, w, heads)?;
                Ok(scalarize(tape, y, &c))
            },
            &inputs,
        );
    }
}
