//! Independent reference implementations used by the test suites.
//!
//! Everything here is written as plainly as possible (direct loops, no
//! shared code with the optimized paths) so tests can compare the real
//! implementations against an independent route. Not for production use.

use crate::autodiff::conv::ConvGeom;

/// Direct six-loop cross-correlation.
pub fn conv2d_naive(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.f * g.out_h * g.out_w];
    for n in 0..g.n {
        for f in 0..g.f {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias[f];
                    for c in 0..g.c {
                        for dy in 0..g.kh {
                            for dx in 0..g.kw {
                                let iy = (oy * g.stride + dy) as isize - g.pad_top as isize;
                                let ix = (ox * g.stride + dx) as isize - g.pad_left as isize;
                                if iy < 0 || iy >= g.h as isize || ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += input
                                    [((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                    * weight[((f * g.c + c) * g.kh + dy) * g.kw + dx];
                            }
                        }
                    }
                    out[((n * g.f + f) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct-summation soft-argmax over one H x W map: softmax(beta * map)
/// weights times pixel coordinates, accumulated in scan order. Returns
/// (x, y) with x = column index expectation, y = row index expectation.
pub fn soft_argmax_direct(map: &[f64], h: usize, w: usize, beta: f64) -> (f64, f64) {
    let m = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &v in map {
        z += ((v - m) * beta).exp();
    }
    // Note: exponent applied as beta*(v - m) to mirror a plain softmax of
    // beta*map up to the constant shift beta*m, which cancels.
    let mut x = 0.0;
    let mut y = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = (beta * (map[i * w + j] - m)).exp() / z;
            x += p * j as f64;
            y += p * i as f64;
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_argmax_direct_uniform_map_is_center() {
        let map = vec![0.0; 60 * 60];
        let (x, y) = soft_argmax_direct(&map, 60, 60, 1.0);
        assert!((x - 29.5).abs() < 1e-12);
        assert!((y - 29.5).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_direct_two_pixel_hand_computation() {
        // 1x3 map: weights 1/4 at x=0 and 3/4 at x=2, middle masked off.
        let map = vec![0.0, -1e9, 3f64.ln()];
        let (x, y) = soft_argmax_direct(&map, 1, 3, 1.0);
        assert!((x - 1.5).abs() < 1e-12);
        assert_eq!(y, 0.0);
    }
}
