//! Every tape operation is checked against the finite-difference oracle,
//! which shares no code with the backward pass.

use proptest::prelude::*;
use ralm::tensor::{finite_difference_grad, max_rel_err, Tape, Tensor, TensorError, TensorId};

/// Builds the graph twice: once from gradient-carrying leaves for the
/// analytic gradient, then repeatedly from perturbed flat parameters for the
/// oracle. `build` must return a scalar loss.
fn check_against_fd<F>(shapes: &[&[usize]], init: &[Vec<f64>], build: F, tol: f64)
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let tensors: Vec<Tensor> = shapes
        .iter()
        .zip(init)
        .map(|(s, d)| Tensor::from_vec(s, d.clone()).unwrap().with_grad())
        .collect();
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids).expect("forward must succeed");
    let grads = tape.backward(loss).expect("backward must succeed");
    let mut analytic = Vec::new();
    for (&id, t) in ids.iter().zip(&tensors) {
        match grads.get(id) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }

    let flat: Vec<f64> = init.concat();
    let numeric = finite_difference_grad(
        |p| {
            let mut tape = Tape::new();
            let mut ids = Vec::new();
            let mut off = 0;
            for s in shapes {
                let n: usize = s.iter().product();
                ids.push(tape.constant(s, p[off..off + n].to_vec())?);
                off += n;
            }
            let loss = build(&mut tape, &ids)?;
            Ok(tape.value(loss)[0])
        },
        &flat,
        1e-5,
    )
    .expect("finite differences must succeed");

    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "max relative error {err} >= {tol}");
}

/// Weighted sum that makes the loss sensitive to each output element
/// differently, so transposed or permuted backward rules cannot cancel out.
fn weighted_sum(tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.shape_of(x).to_vec();
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|j| 0.1 + 0.37 * j as f64).collect();
    let w = tape.constant(&shape, weights)?;
    let prod = tape.mul(x, w)?;
    Ok(tape.sum_all(prod))
}

fn data(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn fd_matmul(a in data(6), b in data(12)) {
        check_against_fd(&[&[2, 3], &[3, 4]], &[a, b], |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_matmul_nt(a in data(6), b in data(12)) {
        check_against_fd(&[&[2, 3], &[4, 3]], &[a, b], |t, ids| {
            let y = t.matmul_nt(ids[0], ids[1])?;
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_add_and_mul(a in data(6), b in data(6)) {
        check_against_fd(&[&[2, 3], &[2, 3]], &[a, b], |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let m = t.mul(s, ids[1])?;
            weighted_sum(t, m)
        }, 1e-6);
    }

    #[test]
    fn fd_scale(a in data(6)) {
        check_against_fd(&[&[2, 3]], &[a], |t, ids| {
            let y = t.scale(ids[0], -1.75);
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_add_row_bias(a in data(8), b in data(4)) {
        check_against_fd(&[&[2, 4], &[4]], &[a, b], |t, ids| {
            let y = t.add_row_bias(ids[0], ids[1])?;
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_layer_norm(x in data(12), g in data(4), b in data(4)) {
        check_against_fd(&[&[3, 4], &[4], &[4]], &[x, g, b], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(t, y)
        }, 1e-5);
    }

    #[test]
    fn fd_gelu(x in data(9)) {
        check_against_fd(&[&[3, 3]], &[x], |t, ids| {
            let y = t.gelu(ids[0]);
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_embedding(table in data(10)) {
        check_against_fd(&[&[5, 2]], &[table], |t, ids| {
            let y = t.embedding(ids[0], &[0, 3, 3, 1])?;
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_softmax_rows(x in data(8)) {
        check_against_fd(&[&[2, 4]], &[x], |t, ids| {
            let y = t.softmax_rows(ids[0])?;
            weighted_sum(t, y)
        }, 1e-5);
    }

    #[test]
    fn fd_log_softmax_rows(x in data(8)) {
        check_against_fd(&[&[2, 4]], &[x], |t, ids| {
            let y = t.log_softmax_rows(ids[0])?;
            weighted_sum(t, y)
        }, 1e-5);
    }

    #[test]
    fn fd_log_sum_exp(x in data(5)) {
        check_against_fd(&[&[5]], &[x], |t, ids| {
            t.log_sum_exp(ids[0])
        }, 1e-6);
    }

    #[test]
    fn fd_slice_and_concat(x in data(12), y in data(6)) {
        check_against_fd(&[&[3, 4], &[3, 2]], &[x, y], |t, ids| {
            let left = t.slice_cols(ids[0], 1, 2)?;
            let cat = t.concat_cols(&[left, ids[1], ids[1]])?;
            weighted_sum(t, cat)
        }, 1e-6);
    }

    #[test]
    fn fd_gather_rows(x in data(8)) {
        check_against_fd(&[&[4, 2]], &[x], |t, ids| {
            let y = t.gather_rows(ids[0], &[2, 0, 2])?;
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_pick_per_row(x in data(12)) {
        check_against_fd(&[&[3, 4]], &[x], |t, ids| {
            let y = t.pick_per_row(ids[0], &[3, 0, 1])?;
            weighted_sum(t, y)
        }, 1e-6);
    }

    #[test]
    fn fd_stack_and_dot(a in data(4), b in data(4)) {
        check_against_fd(&[&[4], &[4]], &[a, b], |t, ids| {
            let d1 = t.dot(ids[0], ids[1])?;
            let s1 = t.sum_all(ids[0]);
            let stacked = t.stack_scalars(&[d1, s1, d1])?;
            weighted_sum(t, stacked)
        }, 1e-6);
    }

    #[test]
    fn fd_reshape(x in data(12)) {
        check_against_fd(&[&[3, 4]], &[x], |t, ids| {
            let y = t.reshape(ids[0], &[4, 3])?;
            let z = t.gelu(y);
            weighted_sum(t, z)
        }, 1e-6);
    }

    // Softmax rows always sum to one, for any finite input.
    #[test]
    fn softmax_rows_sum_to_one(x in data(12)) {
        let mut tape = Tape::new();
        let id = tape.constant(&[3, 4], x).unwrap();
        let p = tape.softmax_rows(id).unwrap();
        for r in 0..3 {
            let sum: f64 = tape.value(p)[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

/// A multi-layer composite touching most ops at once, mirroring how the
/// encoders consume the tape.
#[test]
fn fd_composite_mlp() {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sizes: &[&[usize]] = &[&[4, 6], &[6, 8], &[8], &[8], &[8], &[8, 5]];
    let init: Vec<Vec<f64>> = sizes
        .iter()
        .map(|s| Tensor::randn(s, 0.5, &mut rng).data().to_vec())
        .collect();
    check_against_fd(
        sizes,
        &init,
        |t, ids| {
            let h = t.matmul(ids[0], ids[1])?;
            let h = t.add_row_bias(h, ids[2])?;
            let h = t.gelu(h);
            let h = t.layer_norm(h, ids[3], ids[4], 1e-5)?;
            let logits = t.matmul(h, ids[5])?;
            let logp = t.log_softmax_rows(logits)?;
            let picked = t.pick_per_row(logp, &[0, 3, 1, 4])?;
            let s = t.sum_all(picked);
            Ok(t.scale(s, -0.25))
        },
        1e-5,
    );
}

/// The same graph evaluated twice must be bitwise identical, forward and
/// backward.
#[test]
fn evaluation_is_bitwise_deterministic() {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = Tensor::randn(&[6, 6], 0.3, &mut rng).with_grad();
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        let xid = tape.leaf(&x);
        let h = tape.matmul(xid, wid).unwrap();
        let g = tape.gelu(h);
        let p = tape.softmax_rows(g).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).to_vec(),
            grads.get(wid).unwrap().to_vec(),
        )
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}
