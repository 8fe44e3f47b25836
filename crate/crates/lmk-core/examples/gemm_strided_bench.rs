//! Strided dgemm variants for the pixel-major conv orientation.

use std::time::Instant;

#[allow(clippy::too_many_arguments)]
fn bench(
    label: &str,
    m: usize,
    k: usize,
    n: usize,
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
    rsc: isize,
    csc: isize,
    reps: usize,
) {
    let a = vec![0.5f64; m * k];
    let b = vec![0.25f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let start = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                0.0,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    println!("{label}: {:.1} GFLOP/s", 2.0 * (m * k * n) as f64 / dt / 1e9);
}

fn main() {
    // shapes forward: col[3600,784] . W^T(strided) -> out^T (strided C)
    bench("fwd strided BC", 3600, 784, 16, 784, 1, 1, 784, 1, 3600, 40);
    // shapes forward, C contiguous pixel-major then separate transpose
    bench("fwd strided B only", 3600, 784, 16, 784, 1, 1, 784, 16, 1, 40);
    // dX: dout^T(strided A) . W -> colgrad [3600,784]
    bench("dx strided A", 3600, 16, 784, 1, 3600, 784, 1, 784, 1, 100);
    // dX with A contiguous (pre-transposed dout)
    bench("dx contig", 3600, 16, 784, 16, 1, 784, 1, 784, 1, 100);
    // dW^T: col^T(strided A) . dout^T(strided B) -> [784,16]
    bench("dw strided AB", 784, 3600, 16, 1, 784, 1, 3600, 16, 1, 40);
    // dW^T with both contiguous
    bench("dw contig", 784, 3600, 16, 3600, 1, 1, 3600, 16, 1, 40);
    println!("-- blocks scale --");
    bench("b fwd strided BC", 1600, 648, 8, 648, 1, 1, 648, 1, 1600, 100);
    bench("b dx strided A", 1600, 8, 648, 1, 1600, 648, 1, 648, 1, 200);
    bench("b dw strided AB", 648, 1600, 8, 1, 648, 1, 1600, 8, 1, 100);
}
