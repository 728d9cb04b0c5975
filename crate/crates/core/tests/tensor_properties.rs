use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vessel_uda::checks::{operation_gradient_cases, OP_TOLERANCE};
use vessel_uda::tensor::{Result, Tape, Tensor, Var};

#[test]
fn every_operation_passes_twenty_random_gradient_checks() {
    let cases = operation_gradient_cases(20, 2024).unwrap();
    assert!(cases.len() >= 20);
    for case in &cases {
        assert!(case.error < OP_TOLERANCE, "{} error {:e}", case.id, case.error);
    }
}

/// A small conv/activation/reduction graph; returns two different losses.
fn losses(tape: &mut Tape, x: Var, k: &Tensor) -> Result<(Var, Var)> {
    let k = tape.constant(k.clone());
    let b = tape.constant(Tensor::zeros(&[2]));
    let c = tape.conv2d(x, k, b, 1, 1)?;
    let s = tape.silu(c)?;
    let l1 = tape.mean(s)?;
    let sq = tape.mul(x, x)?;
    let g = tape.sigmoid(sq)?;
    let l2 = tape.sum(g)?;
    Ok((l1, l2))
}

fn gradient(x: &Tensor, k: &Tensor, combine: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let (l1, l2) = losses(&mut tape, xv, k).unwrap();
    let loss = combine(&mut tape, l1, l2).unwrap();
    tape.backward(loss).unwrap();
    tape.grad(xv).unwrap().clone()
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = Tensor::uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
        let (a, b) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
        let g1 = gradient(&x, &k, |_, l1, _| Ok(l1));
        let g2 = gradient(&x, &k, |_, _, l2| Ok(l2));
        let g = gradient(&x, &k, |t, l1, l2| {
            let p = t.scale(l1, a)?;
            let q = t.scale(l2, b)?;
            t.add(p, q)
        });
        let expected = g1.zip_map(&g2, |u, v| a * u + b * v).unwrap();
        assert!(g.max_abs_diff(&expected).unwrap() < 1e-12);
    }
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    let run = || gradient(&x, &k, |t, l1, l2| t.add(l1, l2));
    let first = run();
    for _ in 0..3 {
        let again = run();
        let same = first.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
}
