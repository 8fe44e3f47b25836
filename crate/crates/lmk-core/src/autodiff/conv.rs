//! Convolution and pooling kernels.
//!
//! conv2d is cross-correlation (no kernel flip) over NCHW tensors, computed
//! per image as a blocked im2col followed by one GEMM per row block. The
//! batch dimension is processed in fixed-size chunks so that parallel runs
//! accumulate weight gradients in a thread-count-independent order.

use rayon::prelude::*;

use super::gemm;
use crate::error::{Error, Result};

/// Zero-padding policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size = ceil(input / stride); zero-fill, extra pixel on
    /// the bottom/right when the deficit is odd.
    Same,
    /// No padding; output = floor((input - kernel) / stride) + 1.
    Valid,
}

/// Resolved convolution geometry shared by forward and backward.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        if input_shape.len() != 4 || kernel_shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "expected 4-d input and kernel, got {input_shape:?} and {kernel_shape:?}"
                ),
            });
        }
        let (n, c, h, w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (f, kc, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c} channels but kernel expects {kc}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d",
                        detail: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.out_h, self.out_w]
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output rows per im2col block, sized to keep the column buffer a few MB.
    fn rows_per_block(&self) -> usize {
        const TARGET_ELEMS: usize = 1024 * 1024; // ~8 MB of f64
        (TARGET_ELEMS / (self.ckk() * self.out_w).max(1)).clamp(1, self.out_h)
    }
}

/// Images per parallel chunk. Fixed (not derived from the thread count) so
/// gradient accumulation order, and thus every bit of the result, is the
/// same no matter how many workers run.
pub(crate) const IMAGES_PER_CHUNK: usize = 8;

/// Fill `col` with the im2col patch matrix for output rows [y0, y1).
/// Layout: col[(c*kh+dy)*kw+dx][ (y-y0)*out_w + x ].
fn im2col_block(g: &ConvGeom, image: &[f64], y0: usize, y1: usize, col: &mut [f64]) {
    let bw = (y1 - y0) * g.out_w;
    debug_assert_eq!(col.len(), g.ckk() * bw);
    for c in 0..g.c {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = &mut col[((c * g.kh + dy) * g.kw + dx) * bw..][..bw];
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * g.out_w..][..g.out_w];
                    let in_y = (y * g.stride + dy) as isize - g.pad_top as isize;
                    if in_y < 0 || in_y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[in_y as usize * g.w..][..g.w];
                    if g.stride == 1 {
                        // Contiguous copy with zero fill at the borders.
                        let off = dx as isize - g.pad_left as isize;
                        let x_start = (-off).max(0) as usize;
                        let x_end = ((g.w as isize - off).min(g.out_w as isize)).max(0) as usize;
                        dst[..x_start.min(g.out_w)].fill(0.0);
                        if x_start < x_end {
                            dst[x_start..x_end].copy_from_slice(
                                &src_row[(x_start as isize + off) as usize
                                    ..(x_end as isize + off) as usize],
                            );
                        }
                        dst[x_end.max(x_start)..].fill(0.0);
                    } else {
                        for (x, d) in dst.iter_mut().enumerate() {
                            let in_x = (x * g.stride + dx) as isize - g.pad_left as isize;
                            *d = if in_x < 0 || in_x >= g.w as isize {
                                0.0
                            } else {
                                src_row[in_x as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column-matrix gradient back onto the input image.
fn col2im_add_block(g: &ConvGeom, col: &[f64], y0: usize, y1: usize, dimage: &mut [f64]) {
    let bw = (y1 - y0) * g.out_w;
    for c in 0..g.c {
        let plane = &mut dimage[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = &col[((c * g.kh + dy) * g.kw + dx) * bw..][..bw];
                for y in y0..y1 {
                    let src = &row[(y - y0) * g.out_w..][..g.out_w];
                    let in_y = (y * g.stride + dy) as isize - g.pad_top as isize;
                    if in_y < 0 || in_y >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[in_y as usize * g.w..][..g.w];
                    if g.stride == 1 {
                        let off = dx as isize - g.pad_left as isize;
                        let x_start = (-off).max(0) as usize;
                        let x_end = ((g.w as isize - off).min(g.out_w as isize)).max(0) as usize;
                        for x in x_start..x_end {
                            dst_row[(x as isize + off) as usize] += src[x];
                        }
                    } else {
                        for (x, s) in src.iter().enumerate() {
                            let in_x = (x * g.stride + dx) as isize - g.pad_left as isize;
                            if in_x >= 0 && in_x < g.w as isize {
                                dst_row[in_x as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let per_in = g.c * g.h * g.w;
    let per_out = g.f * g.out_h * g.out_w;
    let rows = g.rows_per_block();
    let plane = g.out_h * g.out_w;
    out.par_chunks_mut(IMAGES_PER_CHUNK * per_out)
        .zip(input.par_chunks(IMAGES_PER_CHUNK * per_in))
        .for_each(|(out_chunk, in_chunk)| {
            let imgs = in_chunk.len() / per_in;
            let mut col = vec![0.0; g.ckk() * rows * g.out_w];
            let mut block = vec![0.0; g.f * rows * g.out_w];
            for i in 0..imgs {
                let image = &in_chunk[i * per_in..][..per_in];
                let out_img = &mut out_chunk[i * per_out..][..per_out];
                let mut y0 = 0;
                while y0 < g.out_h {
                    let y1 = (y0 + rows).min(g.out_h);
                    let bw = (y1 - y0) * g.out_w;
                    im2col_block(g, image, y0, y1, &mut col[..g.ckk() * bw]);
                    // out rows are strided per filter: gather via a scratch block
                    gemm::dgemm(
                        g.f,
                        g.ckk(),
                        bw,
                        1.0,
                        weight,
                        &col[..g.ckk() * bw],
                        0.0,
                        &mut block[..g.f * bw],
                    );
                    for f in 0..g.f {
                        let dst = &mut out_img[f * plane + y0 * g.out_w..][..bw];
                        let b = bias[f];
                        for (d, s) in dst.iter_mut().zip(&block[f * bw..(f + 1) * bw]) {
                            *d = s + b;
                        }
                    }
                    y0 = y1;
                }
            }
        });
}

/// Backward pass. Gradients are accumulated (`+=`) into the provided
/// buffers; pass `None` to skip a term.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    dweight: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let per_in = g.c * g.h * g.w;
    let per_out = g.f * g.out_h * g.out_w;
    let rows = g.rows_per_block();
    let plane = g.out_h * g.out_w;
    let ckk = g.ckk();

    if let Some(dx) = dinput.as_deref_mut() {
        dx.par_chunks_mut(IMAGES_PER_CHUNK * per_in)
            .zip(dout.par_chunks(IMAGES_PER_CHUNK * per_out))
            .for_each(|(dx_chunk, dout_chunk)| {
                let imgs = dx_chunk.len() / per_in;
                let mut colg = vec![0.0; ckk * rows * g.out_w];
                let mut block = vec![0.0; g.f * rows * g.out_w];
                for i in 0..imgs {
                    let dout_img = &dout_chunk[i * per_out..][..per_out];
                    let dx_img = &mut dx_chunk[i * per_in..][..per_in];
                    let mut y0 = 0;
                    while y0 < g.out_h {
                        let y1 = (y0 + rows).min(g.out_h);
                        let bw = (y1 - y0) * g.out_w;
                        for f in 0..g.f {
                            block[f * bw..(f + 1) * bw]
                                .copy_from_slice(&dout_img[f * plane + y0 * g.out_w..][..bw]);
                        }
                        // colg = W^T . dout_block
                        gemm::dgemm_at(
                            ckk,
                            g.f,
                            bw,
                            1.0,
                            weight,
                            &block[..g.f * bw],
                            0.0,
                            &mut colg[..ckk * bw],
                        );
                        col2im_add_block(g, &colg[..ckk * bw], y0, y1, dx_img);
                        y0 = y1;
                    }
                }
            });
    }

    if dweight.is_some() || dbias.is_some() {
        let partials: Vec<(Vec<f64>, Vec<f64>)> = input
            .par_chunks(IMAGES_PER_CHUNK * per_in)
            .zip(dout.par_chunks(IMAGES_PER_CHUNK * per_out))
            .map(|(in_chunk, dout_chunk)| {
                let imgs = in_chunk.len() / per_in;
                let mut dw = vec![0.0; g.f * ckk];
                let mut db = vec![0.0; g.f];
                let mut col = vec![0.0; ckk * rows * g.out_w];
                let mut block = vec![0.0; g.f * rows * g.out_w];
                for i in 0..imgs {
                    let image = &in_chunk[i * per_in..][..per_in];
                    let dout_img = &dout_chunk[i * per_out..][..per_out];
                    let mut y0 = 0;
                    while y0 < g.out_h {
                        let y1 = (y0 + rows).min(g.out_h);
                        let bw = (y1 - y0) * g.out_w;
                        im2col_block(g, image, y0, y1, &mut col[..ckk * bw]);
                        for f in 0..g.f {
                            let src = &dout_img[f * plane + y0 * g.out_w..][..bw];
                            block[f * bw..(f + 1) * bw].copy_from_slice(src);
                            db[f] += src.iter().sum::<f64>();
                        }
                        // dw += dout_block . col^T
                        gemm::dgemm_bt(
                            g.f,
                            bw,
                            ckk,
                            1.0,
                            &block[..g.f * bw],
                            &col[..ckk * bw],
                            1.0,
                            &mut dw,
                        );
                        y0 = y1;
                    }
                }
                (dw, db)
            })
            .collect();
        // Merge in chunk order: deterministic for any worker count.
        let mut dw_acc = dweight;
        let mut db_acc = dbias;
        for (dw, db) in partials {
            if let Some(acc) = dw_acc.as_deref_mut() {
                for (a, v) in acc.iter_mut().zip(&dw) {
                    *a += v;
                }
            }
            if let Some(acc) = db_acc.as_deref_mut() {
                for (a, v) in acc.iter_mut().zip(&db) {
                    *a += v;
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2; trailing odd row/column is dropped.
/// Ties select the first element in row-major scan order. Returns flat
/// input indices used by the backward pass.
pub(crate) fn maxpool2x2_forward(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    input: &[f64],
    out: &mut [f64],
    indices: &mut Vec<u32>,
) {
    let oh = h / 2;
    let ow = w / 2;
    indices.clear();
    indices.resize(n * c * oh * ow, 0);
    for img in 0..n * c {
        let plane = &input[img * h * w..][..h * w];
        let out_plane = &mut out[img * oh * ow..][..oh * ow];
        let idx_plane = &mut indices[img * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let iy = oy * 2 + dy;
                        let ix = ox * 2 + dx;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                out_plane[oy * ow + ox] = best;
                idx_plane[oy * ow + ox] = (img * h * w + best_idx) as u32;
            }
        }
    }
}

pub(crate) fn maxpool2x2_backward(indices: &[u32], dout: &[f64], dinput: &mut [f64]) {
    for (&idx, &g) in indices.iter().zip(dout) {
        dinput[idx as usize] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::conv2d_naive;

    fn rng_vals(len: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let g = ConvGeom::resolve(&[1, 1, 3, 3], &[1, 1, 1, 1], 1, Padding::Same).unwrap();
        let input: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut out = vec![0.0; 9];
        conv2d_forward(&g, &input, &[1.0], &[0.0], &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn all_ones_valid_sums_window() {
        let g = ConvGeom::resolve(&[1, 1, 2, 2], &[1, 1, 2, 2], 1, Padding::Valid).unwrap();
        let mut out = vec![0.0];
        conv2d_forward(&g, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[0.0], &mut out);
        assert_eq!(out, vec![10.0]);
    }

    #[test]
    fn matches_naive_oracle_on_random_inputs() {
        for (trial, &(n, c, h, w, f, kh, kw, stride, pad)) in [
            (2, 3, 8, 8, 4, 3, 3, 1, Padding::Same),
            (1, 2, 9, 7, 3, 4, 2, 1, Padding::Same),
            (2, 1, 8, 8, 2, 3, 3, 2, Padding::Same),
            (1, 3, 10, 10, 2, 3, 3, 1, Padding::Valid),
            (4, 4, 16, 16, 4, 5, 5, 1, Padding::Same),
            (1, 2, 6, 6, 2, 6, 6, 2, Padding::Valid),
        ]
        .iter()
        .enumerate()
        {
            let g = ConvGeom::resolve(&[n, c, h, w], &[f, c, kh, kw], stride, pad).unwrap();
            let input = rng_vals(n * c * h * w, trial as u64 * 7 + 1);
            let weight = rng_vals(f * c * kh * kw, trial as u64 * 7 + 2);
            let bias = rng_vals(f, trial as u64 * 7 + 3);
            let mut out = vec![0.0; n * f * g.out_h * g.out_w];
            conv2d_forward(&g, &input, &weight, &bias, &mut out);
            let expect = conv2d_naive(&g, &input, &weight, &bias);
            let max_diff = out
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff <= 1e-12, "trial {trial}: max diff {max_diff}");
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let err = ConvGeom::resolve(&[1, 3, 8, 8], &[4, 2, 3, 3], 1, Padding::Same);
        assert!(err.is_err());
    }

    #[test]
    fn maxpool_ties_pick_first_row_major() {
        let input = vec![1.0, 1.0, 1.0, 1.0];
        let mut out = vec![0.0];
        let mut idx = Vec::new();
        maxpool2x2_forward(1, 1, 2, 2, &input, &mut out, &mut idx);
        assert_eq!(out[0], 1.0);
        assert_eq!(idx[0], 0);
        let mut dinput = vec![0.0; 4];
        maxpool2x2_backward(&idx, &[1.0], &mut dinput);
        assert_eq!(dinput, vec![1.0, 0.0, 0.0, 0.0]);
    }
}
