use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_grads(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let reports = gradcheck::check(inputs, f).unwrap();
    assert!(!reports.is_empty());
    for r in &reports {
        assert!(r.rel_error < 1e-4, "input {} rel err {}", r.input, r.rel_error);
    }
}

/// Weighted sum with fixed pseudo-random weights so every output element matters.
fn probe(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect())?;
    let w = tape.constant(w);
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.leaf(Tensor::full(&[1, 1, 1, 1], 2.0));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_as_sum_pooling() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 10.0);
}

#[test]
fn conv_channel_mismatch_names_axis() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
    let w = tape.leaf(Tensor::zeros(&[1, 3, 1, 1]));
    let err = tape.conv2d(x, w, 1, 0).unwrap_err();
    assert!(err.to_string().contains("input channels"), "{err}");
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 4]).with_grad();
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]).with_grad();
    assert_grads(&[x.clone(), w.clone()], |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        probe(t, y)
    });
    let w1 = rand_tensor(&mut rng, &[2, 3, 1, 1]).with_grad();
    assert_grads(&[x, w1], |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 0)?;
        probe(t, y)
    });
}

#[test]
fn avg_pool_region_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 3, 4, 4], 5.0));
    let y = tape.avg_pool_region(x, 1..3, 0..2).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 5.0, 5.0]);
    let x = tape.leaf(Tensor::new(&[1, 1, 2, 1], vec![2.0, 4.0]).unwrap());
    let y = tape.avg_pool_region(x, 0..2, 0..1).unwrap();
    assert_eq!(tape.value(y).item(), 3.0);
    assert!(tape.avg_pool_region(x, 0..3, 0..1).is_err());
    assert!(tape.avg_pool_region(x, 1..1, 0..1).is_err());
}

#[test]
fn avg_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 4]).with_grad();
    assert_grads(&[x], |t, v| {
        let y = t.avg_pool_region(v[0], 1..4, 2..4)?;
        probe(t, y)
    });
}

#[test]
fn batch_norm_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[4, 3, 2, 2]));
    let g = tape.leaf(Tensor::full(&[3], 1.0));
    let b = tape.leaf(Tensor::zeros(&[3]));
    let out = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    let y = tape.value(out.output).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..4).map(move |i| (n * 3 + c) * 4 + i))
            .map(|i| y[i])
            .collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3, "var {var}"); // eps shrinks var slightly
    }
}

#[test]
fn batch_norm_eval_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 2, 1, 1], vec![0.5, -1.0, 2.0, 3.0]).unwrap());
    let g = tape.leaf(Tensor::full(&[2], 1.0));
    let b = tape.leaf(Tensor::zeros(&[2]));
    let y = tape.batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-5 * 3.0);
}

#[test]
fn batch_norm_rejects_single_sample() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
    let g = tape.leaf(Tensor::full(&[2], 1.0));
    let b = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.batch_norm_train(x, g, b, 1e-5), Err(Error::Config(_))));
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 2, 2, 3]).with_grad();
    let g = rand_tensor(&mut rng, &[2]).with_grad();
    let b = rand_tensor(&mut rng, &[2]).with_grad();
    assert_grads(&[x.clone(), g.clone(), b.clone()], |t, v| {
        let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.output;
        probe(t, y)
    });
    assert_grads(&[x, g, b], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
        probe(t, y)
    });
}

#[test]
fn pointwise_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![0.0, 0.0, -1.0]).unwrap());
    let s = tape.sigmoid(x);
    let th = tape.tanh(x);
    let r = tape.relu(x);
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert_eq!(tape.value(th).data()[0], 0.0);
    assert_eq!(tape.value(r).data()[2], 0.0);
}

#[test]
fn pointwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4]).with_grad();
    for kind in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        assert_grads(&[x.clone()], |t, v| {
            let y = t.pointwise(v[0], kind);
            probe(t, y)
        });
    }
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = rand_tensor(&mut rng, &[3, 4]);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let a = tape.leaf(eye);
    let b = tape.leaf(m.clone());
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), m.data());
}

#[test]
fn matmul_and_linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[3, 4]).with_grad();
    let b = rand_tensor(&mut rng, &[4, 2]).with_grad();
    assert_grads(&[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y)
    });
    let w = rand_tensor(&mut rng, &[5, 4]).with_grad();
    let bias = rand_tensor(&mut rng, &[5]).with_grad();
    assert_grads(&[a, w, bias], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        probe(t, y)
    });
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[2, 3]).with_grad();
    let b = rand_tensor(&mut rng, &[2, 3]).with_grad();
    assert_grads(&[a.clone(), b.clone()], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let s = t.add(m, v[0])?;
        let s = t.scale(s, -0.7);
        probe(t, s)
    });
}

#[test]
fn mul_map_uniform_map() {
    let (h, w, c) = (4, 3, 5);
    let mut tape = Tape::new();
    let map = tape.leaf(Tensor::full(&[1, 1, h, w], 1.0 / (h * w) as f64));
    let x = tape.leaf(Tensor::full(&[1, c, h, w], 1.0));
    let y = tape.mul_map(map, x).unwrap();
    assert!(tape
        .value(y)
        .data()
        .iter()
        .all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    let bad = tape.leaf(Tensor::zeros(&[1, 2, h, w]));
    assert!(tape.mul_map(bad, x).is_err());
}

#[test]
fn mul_map_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let map = rand_tensor(&mut rng, &[2, 1, 3, 2]).with_grad();
    let x = rand_tensor(&mut rng, &[2, 4, 3, 2]).with_grad();
    assert_grads(&[map, x], |t, v| {
        let y = t.mul_map(v[0], v[1])?;
        let s = t.sum_spatial(y)?;
        probe(t, s)
    });
}

#[test]
fn concat_slice_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[2, 3, 2]).with_grad();
    let b = rand_tensor(&mut rng, &[2, 1, 2]).with_grad();
    assert_grads(&[a, b], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let s = t.slice(c, 1, 1..4)?;
        let r = t.reshape(s, &[3, 4])?;
        probe(t, r)
    });
}

#[test]
fn concat_then_slice_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let parts = [rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 3, 1]), rand_tensor(&mut rng, &[2, 3, 2])];
    let mut tape = Tape::new();
    let vars: Vec<Var> = parts.iter().map(|p| tape.leaf(p.clone())).collect();
    let c = tape.concat(&vars, 2).unwrap();
    let mut start = 0;
    for p in &parts {
        let len = p.shape()[2];
        let s = tape.slice(c, 2, start..start + len).unwrap();
        assert_eq!(tape.value(s).data(), p.data());
        start += len;
    }
}

#[test]
fn softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[3, 5]).with_grad();
    assert_grads(&[x], |t, v| {
        let y = t.softmax(v[0]);
        probe(t, y)
    });
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(x, &[2]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let x = tape.leaf(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
    let l = tape.cross_entropy(x, &[0]).unwrap();
    let v = tape.value(l).item();
    assert!(v.is_finite() && v.abs() < 1e-12);

    assert!(matches!(tape.cross_entropy(x, &[2]), Err(Error::Label { label: 2, classes: 2 })));

    // a single class is a certain prediction
    let x = tape.leaf(Tensor::new(&[2, 1], vec![3.5, -2.0]).unwrap());
    let l = tape.cross_entropy(x, &[0, 0]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[3, 7]).with_grad();
    assert_grads(&[x], |t, v| t.cross_entropy(v[0], &[0, 6, 3]));
}

#[test]
fn channel_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[2, 3, 2, 2]).with_grad();
    let b = rand_tensor(&mut rng, &[3]).with_grad();
    assert_grads(&[x, b], |t, v| {
        let y = t.channel_bias(v[0], v[1])?;
        probe(t, y)
    });
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 3, 2], 0.3).with_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_half_square_is_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let xt = rand_tensor(&mut rng, &[4, 2]).with_grad();
    let mut tape = Tape::new();
    let x = tape.leaf(xt.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(x).unwrap(), xt.data());
}

#[test]
fn backward_accumulates_and_resets() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 2.0).with_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    tape.zero_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 2.0).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3], 2.0).with_grad());
    let w = tape.leaf(Tensor::full(&[3], 1.0).with_grad());
    let m = tape.mul(x, w).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).is_none());
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0, 2.0]);
}
