//! Rough throughput probe for the conv training step at experiment scale.

use std::time::Instant;

use lmk_core::autodiff::{Graph, Mode, Padding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let threads = std::env::var("LMK_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(num_threads_default);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();
    println!("threads: {threads}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = 32;
    let (h, w) = (60, 60);
    let maps = 16;
    let layers = 6;
    let k = 7;

    let image: Vec<f64> = (0..batch * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let weights: Vec<Vec<f64>> = (0..layers)
        .map(|l| {
            let cin = if l == 0 { 1 } else { maps };
            (0..maps * cin * k * k)
                .map(|_| rng.gen_range(-0.1..0.1))
                .collect()
        })
        .collect();

    let mut flops_fwd = 0f64;
    for l in 0..layers {
        let cin = if l == 0 { 1 } else { maps };
        flops_fwd += 2.0 * (batch * h * w * maps * cin * k * k) as f64;
    }

    let start = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let mut g = Graph::new(Mode::Train);
        let mut x = g.input(vec![batch, 1, h, w], image.clone());
        for (l, wv) in weights.iter().enumerate() {
            let cin = if l == 0 { 1 } else { maps };
            let wp = g.param(vec![maps, cin, k, k], wv.clone());
            let bp = g.param(vec![maps], vec![0.0; maps]);
            let c = g.conv2d(x, wp, bp, 1, Padding::Same).unwrap();
            x = g.relu(c);
        }
        let loss = g.sum_squares(x);
        let loss = g.scale(loss, 1e-6);
        g.backward(loss).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    // fwd + ~2x for backward
    let flops_total = flops_fwd * 3.0;
    println!(
        "step: {:.3}s  fwd {:.1} GFLOP  est total {:.1} GFLOP  => {:.1} GFLOP/s",
        dt,
        flops_fwd / 1e9,
        flops_total / 1e9,
        flops_total / dt / 1e9
    );
    println!(
        "shapes epoch (3200 imgs) est: {:.0}s",
        dt * 3200.0 / batch as f64
    );
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
