//! Rough kernel throughput numbers, ignored by default.
//! Run with: cargo test -p diffcore --release -- --ignored --nocapture throughput

use diffcore::{Tape, Tensor};
use std::time::Instant;

/// Shapes mirror one pixel-chunk of field evaluation: a few thousand query
/// points through 64-wide layers.
#[test]
#[ignore]
fn throughput_mlp_chunk() {
    let m = 4096;
    let w1 = Tensor::full(vec![39, 64], 0.05);
    let w2 = Tensor::full(vec![64, 64], 0.05);
    let w3 = Tensor::full(vec![64, 1], 0.05);
    let pts = Tensor::full(vec![m, 39], 0.3);
    let reps = 50;
    let mut flops = 0usize;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.constant(pts.clone());
        let a = tape.leaf(w1.clone());
        let b = tape.leaf(w2.clone());
        let c = tape.leaf(w3.clone());
        let h1 = tape.matmul(x, a).unwrap();
        let s1 = tape.softplus(h1);
        let h2 = tape.matmul(s1, b).unwrap();
        let s2 = tape.softplus(h2);
        let h3 = tape.matmul(s2, b).unwrap();
        let s3 = tape.softplus(h3);
        let h4 = tape.matmul(s3, c).unwrap();
        let loss = tape.mean_all(h4);
        tape.backward(loss).unwrap();
        flops += 3 * 2 * m * (39 * 64 + 64 * 64 * 2 + 64);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "mlp chunk fwd+bwd: {:.2} GFLOP/s, {:.2} ms/chunk",
        flops as f64 / dt / 1e9,
        dt * 1000.0 / reps as f64
    );
}

/// One denoiser-sized conv stack at 64x64.
#[test]
#[ignore]
fn throughput_conv_stack() {
    let (h, w) = (64, 64);
    let img = Tensor::full(vec![12, h, w], 0.1);
    let w0 = Tensor::full(vec![32, 12, 3, 3], 0.02);
    let b0 = Tensor::full(vec![32], 0.0);
    let w1 = Tensor::full(vec![32, 32, 3, 3], 0.02);
    let b1 = Tensor::full(vec![32], 0.0);
    let reps = 20;
    let t0 = Instant::now();
    let mut flops = 0usize;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let wa = tape.leaf(w0.clone());
        let ba = tape.leaf(b0.clone());
        let wb = tape.leaf(w1.clone());
        let bb = tape.leaf(b1.clone());
        let c0 = tape.conv3x3(x, wa, ba).unwrap();
        let a0 = tape.sigmoid(c0);
        let c1 = tape.conv3x3(a0, wb, bb).unwrap();
        let a1 = tape.sigmoid(c1);
        let c2 = tape.conv3x3(a1, wb, bb).unwrap();
        let loss = tape.mean_all(c2);
        tape.backward(loss).unwrap();
        flops += 3 * 2 * h * w * 9 * (12 * 32 + 32 * 32 * 2);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "conv stack fwd+bwd: {:.2} GFLOP/s, {:.1} ms/stack",
        flops as f64 / dt / 1e9,
        dt * 1000.0 / reps as f64
    );
}
