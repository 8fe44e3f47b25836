//! Isolated dgemm throughput at conv-layer shapes.

use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![0.5f64; m * k];
    let b = vec![0.25f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let start = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    let gf = 2.0 * (m * k * n) as f64 / dt / 1e9;
    println!("{m}x{k}x{n}: {gf:.1} GFLOP/s single-thread");
}

fn main() {
    bench(16, 784, 480, 200);
    bench(16, 784, 1200, 100);
    bench(16, 784, 3600, 40);
    bench(16, 784, 240, 400);
    bench(32, 784, 3600, 40);
    bench(64, 784, 3600, 20);
    bench(128, 784, 3600, 20);
    bench(256, 256, 256, 200);
    bench(512, 512, 512, 40);
    bench(8, 648, 1600, 100);
    println!("-- transposed orientation (pixels as M) --");
    bench(3600, 784, 16, 40);
    bench(480, 784, 16, 300);
    bench(1600, 648, 8, 100);
    bench(600, 648, 8, 300);
    bench(1200, 784, 16, 100);
    bench(3600, 49, 16, 200);
    bench(1600, 81, 8, 400);
}
