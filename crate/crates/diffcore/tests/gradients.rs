//! AD gradients versus central finite differences on primitive ops and on
//! randomly composed networks, plus backward determinism.

use diffcore::check::{grad_check, grad_check_coords};
use diffcore::{DiffError, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() - 0.5) * 2.0 * scale).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let loss = tape.sum_all(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn sum_of_squares_gradient_is_two_x() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![2.0]));
    let sq = tape.square(x);
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0]);
}

#[test]
fn loss_gradient_of_itself_is_one() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let loss = tape.mul_scalar(x, 1.0);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(loss).unwrap(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let err = tape.backward(x).unwrap_err();
    assert!(matches!(err, DiffError::LossNotScalar(_)));
}

#[test]
fn backward_rejects_off_tape_var() {
    let mut other = Tape::new();
    let a = other.leaf(Tensor::scalar(1.0));
    let b = other.square(a);
    let c = other.square(b);
    let mut tape = Tape::new();
    let _x = tape.leaf(Tensor::scalar(1.0));
    // c indexes past the end of `tape`; the handle belongs to `other`.
    let err = tape.backward(c).unwrap_err();
    assert!(matches!(err, DiffError::NotOnTape(_)));
}

/// Five-layer composite of matmul / softplus / exp / sum, checked against
/// central finite differences with h = 1e-5.
#[test]
fn random_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::new();
    params.push("x", rand_tensor(&mut rng, vec![3, 4], 0.8));
    params.push("w1", rand_tensor(&mut rng, vec![4, 5], 0.8));
    params.push("w2", rand_tensor(&mut rng, vec![5, 5], 0.8));
    params.push("w3", rand_tensor(&mut rng, vec![5, 2], 0.8));

    let eval = |p: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), DiffError> {
        let leaves = p.leaves(tape);
        let h1 = tape.matmul(leaves[0], leaves[1])?;
        let a1 = tape.softplus(h1);
        let h2 = tape.matmul(a1, leaves[2])?;
        let a2 = tape.softplus(h2);
        let h3 = tape.matmul(a2, leaves[3])?;
        let e = tape.mul_scalar(h3, 0.3);
        let ex = tape.exp(e);
        let loss = tape.sum_all(ex);
        Ok((leaves, loss))
    };

    let mut tape = Tape::new();
    let (leaves, loss) = eval(&params, &mut tape).unwrap();
    tape.backward(loss).unwrap();
    let ad: Vec<Vec<f64>> = leaves.iter().map(|l| tape.grad(*l).unwrap().to_vec()).collect();

    let err = grad_check(&params, &ad, 1e-5, |p| {
        let mut t = Tape::new();
        let (_, loss) = eval(p, &mut t)?;
        Ok(t.value(loss).item())
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

/// Every primitive checked at 20+ random points (the property the rest of
/// the workspace leans on).
#[test]
fn primitives_match_finite_differences_across_seeds() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        // Keep values away from the abs/sqrt kinks.
        let mut x = rand_tensor(&mut rng, vec![6], 1.0);
        for v in x.data_mut() {
            if v.abs() < 0.1 {
                *v += 0.25;
            }
        }
        params.push("x", x);
        params.push("y", rand_tensor(&mut rng, vec![6], 0.7));
        let scalar = rand_tensor(&mut rng, vec![], 0.5);
        params.push("s", scalar);

        let eval = |p: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), DiffError> {
            let leaves = p.leaves(tape);
            let (x, y, s) = (leaves[0], leaves[1], leaves[2]);
            let a = tape.mul(x, y)?;
            let b = tape.sigmoid(a);
            let c = tape.sin(b);
            let d = tape.cos(c);
            let e = tape.add(d, y)?;
            let sq = tape.square(x);
            let half = tape.add_scalar(sq, 1.0);
            let root = tape.sqrt(half);
            let f = tape.div(e, root)?;
            let g = tape.abs(f);
            let ln_in = tape.add_scalar(g, 1.5);
            let h = tape.ln(ln_in);
            let i = tape.scale_by(h, s)?;
            let j = tape.softplus(i);
            let k = tape.exp(j);
            let neg = tape.neg(k);
            let l = tape.sub(k, neg)?;
            let loss = tape.mean_all(l);
            Ok((leaves, loss))
        };

        let mut tape = Tape::new();
        let (leaves, loss) = eval(&params, &mut tape).unwrap();
        tape.backward(loss).unwrap();
        let ad: Vec<Vec<f64>> =
            leaves.iter().map(|l| tape.grad(*l).unwrap().to_vec()).collect();
        let err = grad_check(&params, &ad, 1e-5, |p| {
            let mut t = Tape::new();
            let (_, loss) = eval(p, &mut t)?;
            Ok(t.value(loss).item())
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::new();
    params.push("a", rand_tensor(&mut rng, vec![4, 3], 1.0));
    params.push("bias", rand_tensor(&mut rng, vec![3], 1.0));
    params.push("col", rand_tensor(&mut rng, vec![4], 1.0));

    let eval = |p: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), DiffError> {
        let leaves = p.leaves(tape);
        let (a, bias, col) = (leaves[0], leaves[1], leaves[2]);
        let ar = tape.add_row(a, bias)?;
        let mc = tape.mul_col(ar, col)?;
        let rep = tape.repeat_rows(mc, 2)?;
        let cs = tape.cumsum_rows_exclusive(rep)?;
        let sr = tape.sum_rows(cs)?;
        let sl = tape.slice(sr, 1, 5)?;
        let cc = tape.concat_cols(&[sl, sl])?;
        let fc = tape.flat_concat(&[cc, sr])?;
        let sp = tape.softplus(fc);
        let loss = tape.mean_all(sp);
        Ok((leaves, loss))
    };

    let mut tape = Tape::new();
    let (leaves, loss) = eval(&params, &mut tape).unwrap();
    tape.backward(loss).unwrap();
    let ad: Vec<Vec<f64>> = leaves.iter().map(|l| tape.grad(*l).unwrap().to_vec()).collect();
    let err = grad_check(&params, &ad, 1e-5, |p| {
        let mut t = Tape::new();
        let (_, loss) = eval(p, &mut t)?;
        Ok(t.value(loss).item())
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn conv_and_pool_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    params.push("img", rand_tensor(&mut rng, vec![2, 4, 4], 1.0));
    params.push("w", rand_tensor(&mut rng, vec![3, 2, 3, 3], 0.5));
    params.push("b", rand_tensor(&mut rng, vec![3], 0.3));

    let eval = |p: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), DiffError> {
        let leaves = p.leaves(tape);
        let c = tape.conv3x3(leaves[0], leaves[1], leaves[2])?;
        let act = tape.sigmoid(c);
        let pooled = tape.avg_pool2(act)?;
        let up = tape.upsample2(pooled)?;
        let loss = tape.mean_all(up);
        Ok((leaves, loss))
    };

    let mut tape = Tape::new();
    let (leaves, loss) = eval(&params, &mut tape).unwrap();
    tape.backward(loss).unwrap();
    let ad: Vec<Vec<f64>> = leaves.iter().map(|l| tape.grad(*l).unwrap().to_vec()).collect();
    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|pi| {
            let n = params.tensors[pi].numel();
            (0..n).map(move |ci| (pi, ci))
        })
        .collect();
    let err = grad_check_coords(&params, &ad, 1e-5, &coords, &mut |p| {
        let mut t = Tape::new();
        let (_, loss) = eval(p, &mut t)?;
        Ok(t.value(loss).item())
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

/// Identical inputs produce bit-identical gradients (fixed reduction order).
#[test]
fn backward_is_bit_deterministic() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Large enough to engage the parallel kernel paths.
        let a = rand_tensor(&mut rng, vec![64, 96], 1.0);
        let b = rand_tensor(&mut rng, vec![96, 64], 1.0);
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let mm = tape.matmul(av, bv).unwrap();
        let act = tape.softplus(mm);
        let loss = tape.mean_all(act);
        tape.backward(loss).unwrap();
        let mut out = tape.grad(av).unwrap().to_vec();
        out.extend_from_slice(tape.grad(bv).unwrap());
        out
    };
    let first = run();
    for _ in 0..3 {
        let again = run();
        assert!(first.iter().zip(again.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn tape_cannot_be_swept_twice() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let loss = tape.square(x);
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err());
}

#[test]
fn gradients_accumulate_across_fanout() {
    // z = x * x + x: dz/dx = 2x + 1, exercising multi-use accumulation.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let xx = tape.mul(x, x).unwrap();
    let z = tape.add(xx, x).unwrap();
    tape.backward(z).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[7.0]);
}
