//! Affine coordinate transforms: sampling, composition, inversion, and
//! application to landmark coordinates and images (inverse-mapped bilinear
//! warp with zero padding).
//!
//! Transforms are plain values and freely shareable; samplers own mutable
//! RNG state and belong to a single worker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 2x3 matrix [a b tx; c d ty] acting on column vectors (x, y, 1).
/// Coordinates are (x = column, y = row), origin top-left, integer pixel
/// centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        c: 0.0,
        d: 1.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    /// Rotation by `degrees` (counter-clockwise in x-right/y-down pixel
    /// coordinates this maps (1,0) to (cos, sin)).
    pub fn rotation_degrees(degrees: f64) -> Self {
        let r = degrees.to_radians();
        // libm keeps generated datasets byte-identical across platforms.
        let (s, c) = (libm::sin(r), libm::cos(r));
        AffineTransform {
            a: c,
            b: -s,
            tx: 0.0,
            c: s,
            d: c,
            ty: 0.0,
        }
    }

    pub fn scaling(s: f64) -> Self {
        AffineTransform {
            a: s,
            d: s,
            ..Self::IDENTITY
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// Matrix form used by the autodiff coordinate op.
    pub fn as_array(&self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    pub fn is_invertible(&self) -> bool {
        self.determinant().abs() > 1e-9
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if det.abs() <= 1e-9 {
            return Err(Error::Numeric(format!(
                "affine transform is singular (det = {det:e})"
            )));
        }
        let inv = 1.0 / det;
        Ok(AffineTransform {
            a: self.d * inv,
            b: -self.b * inv,
            tx: (self.b * self.ty - self.d * self.tx) * inv,
            c: -self.c * inv,
            d: self.a * inv,
            ty: (self.c * self.tx - self.a * self.ty) * inv,
        })
    }
}

/// first.compose(second) applies `second` first: (T1 . T2)(p) = T1(T2(p)).
pub fn compose(t1: &AffineTransform, t2: &AffineTransform) -> AffineTransform {
    AffineTransform {
        a: t1.a * t2.a + t1.b * t2.c,
        b: t1.a * t2.b + t1.b * t2.d,
        tx: t1.a * t2.tx + t1.b * t2.ty + t1.tx,
        c: t1.c * t2.a + t1.d * t2.c,
        d: t1.c * t2.b + t1.d * t2.d,
        ty: t1.c * t2.tx + t1.d * t2.ty + t1.ty,
    }
}

/// K (x, y) landmark coordinates for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        LandmarkSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        LandmarkSet {
            points: flat.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        }
    }
}

/// Maps every landmark through the transform.
pub fn apply_to_coords(t: &AffineTransform, landmarks: &LandmarkSet) -> LandmarkSet {
    LandmarkSet {
        points: landmarks.points.iter().map(|&(x, y)| t.apply(x, y)).collect(),
    }
}

/// Inverse-mapped bilinear warp: output pixel p samples the input at
/// T^-1(p); samples outside the frame read as zero.
pub fn warp_image(t: &AffineTransform, image: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let inv = t.invert()?;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            out[y * w + x] = bilinear_sample(image, h, w, sx, sy);
        }
    }
    Ok(out)
}

fn bilinear_sample(image: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            image[yi as usize * w + xi as usize]
        }
    };
    let v00 = at(x0, y0);
    let v10 = at(x0 + 1, y0);
    let v01 = at(x0, y0 + 1);
    let v11 = at(x0 + 1, y0 + 1);
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}

/// Uniform sampler over small affine perturbations around the image center:
/// rotation (degrees), isotropic scale, and translation as a fraction of the
/// image side. All ranges are closed intervals containing the identity.
#[derive(Clone, Debug)]
pub struct TransformSampler {
    pub rotation_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub translate_frac: f64,
    pub side: f64,
    rng: ChaCha8Rng,
}

impl TransformSampler {
    pub fn new(
        rotation_deg: f64,
        scale_lo: f64,
        scale_hi: f64,
        translate_frac: f64,
        side: f64,
        seed: u64,
    ) -> Result<Self> {
        if rotation_deg < 0.0 || translate_frac < 0.0 {
            return Err(Error::InvalidArgument(
                "sampler ranges must be non-negative half-widths".into(),
            ));
        }
        if !(scale_lo <= 1.0 && 1.0 <= scale_hi) || scale_lo <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "scale range [{scale_lo}, {scale_hi}] must contain 1.0 and be positive"
            )));
        }
        Ok(TransformSampler {
            rotation_deg,
            scale_lo,
            scale_hi,
            translate_frac,
            side,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draws T = translate(center) . rotate(theta) . scale(s) .
    /// translate(-center) . translate(dx, dy), with theta, s, dx, dy uniform
    /// in their ranges (in that draw order).
    pub fn sample(&mut self) -> AffineTransform {
        let theta = self.draw_symmetric(self.rotation_deg);
        let s = if self.scale_lo == self.scale_hi {
            self.scale_lo
        } else {
            self.rng.gen_range(self.scale_lo..=self.scale_hi)
        };
        let max_t = self.translate_frac * self.side;
        let dx = self.draw_symmetric(max_t);
        let dy = self.draw_symmetric(max_t);
        let center = (self.side - 1.0) / 2.0;
        let t = compose(
            &AffineTransform::translation(center, center),
            &compose(
                &AffineTransform::rotation_degrees(theta),
                &AffineTransform::scaling(s),
            ),
        );
        let t = compose(&t, &AffineTransform::translation(-center, -center));
        compose(&t, &AffineTransform::translation(dx, dy))
    }

    fn draw_symmetric(&mut self, half_width: f64) -> f64 {
        if half_width == 0.0 {
            0.0
        } else {
            self.rng.gen_range(-half_width..=half_width)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_landmarks_unchanged() {
        let l = LandmarkSet::new(vec![(1.0, 2.0), (58.0, 3.5)]);
        assert_eq!(apply_to_coords(&AffineTransform::IDENTITY, &l), l);
    }

    #[test]
    fn translation_moves_points() {
        let l = LandmarkSet::new(vec![(10.0, 10.0)]);
        let t = AffineTransform::translation(3.0, -2.0);
        assert_eq!(apply_to_coords(&t, &l).points, vec![(13.0, 8.0)]);
    }

    #[test]
    fn quarter_turn_about_center_maps_top_to_right() {
        // 90 degrees about (29.5, 29.5): (29.5, 0) -> (59, 29.5)
        let center = 29.5;
        let t = compose(
            &AffineTransform::translation(center, center),
            &compose(
                &AffineTransform::rotation_degrees(90.0),
                &AffineTransform::translation(-center, -center),
            ),
        );
        let l = apply_to_coords(&t, &LandmarkSet::new(vec![(29.5, 0.0)]));
        assert!((l.points[0].0 - 59.0).abs() < 1e-10);
        assert!((l.points[0].1 - 29.5).abs() < 1e-10);
    }

    #[test]
    fn compose_invert_is_identity() {
        let t = compose(
            &AffineTransform::rotation_degrees(37.0),
            &compose(
                &AffineTransform::scaling(1.07),
                &AffineTransform::translation(4.2, -1.1),
            ),
        );
        let id = compose(&t, &t.invert().unwrap());
        let e = AffineTransform::IDENTITY;
        for (a, b) in id.as_array().iter().zip(e.as_array()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_transform_cannot_warp() {
        let t = AffineTransform {
            a: 1.0,
            b: 2.0,
            tx: 0.0,
            c: 2.0,
            d: 4.0,
            ty: 0.0,
        };
        assert!(warp_image(&t, &[0.0; 16], 4, 4).is_err());
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let image: Vec<f64> = (0..64).map(|i| (i as f64 * 0.371).sin().abs()).collect();
        let out = warp_image(&AffineTransform::IDENTITY, &image, 8, 8).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn integer_translation_shifts_exactly() {
        let mut image = vec![0.0; 100];
        for y in 3..7 {
            for x in 2..6 {
                image[y * 10 + x] = 0.25 + 0.05 * (x + y) as f64;
            }
        }
        let t = AffineTransform::translation(2.0, 1.0);
        let out = warp_image(&t, &image, 10, 10).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let expect = if x >= 2 && y >= 1 {
                    image[(y - 1) * 10 + (x - 2)]
                } else {
                    0.0
                };
                assert_eq!(out[y * 10 + x], expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn warp_roundtrip_keeps_smooth_blob_close() {
        // Gaussian blob; warp then inverse-warp; interior mean abs diff small.
        let (h, w) = (60, 60);
        let mut image = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - 29.5) / 9.0;
                let dy = (y as f64 - 29.5) / 9.0;
                image[y * w + x] = (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
        let mut sampler = TransformSampler::new(20.0, 0.9, 1.1, 0.1, 60.0, 5).unwrap();
        let t = sampler.sample();
        let warped = warp_image(&t, &image, h, w).unwrap();
        let back = warp_image(&t.invert().unwrap(), &warped, h, w).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for y in 10..h - 10 {
            for x in 10..w - 10 {
                total += (back[y * w + x] - image[y * w + x]).abs();
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean <= 0.02, "interior mean abs diff {mean}");
    }

    #[test]
    fn degenerate_ranges_give_identity() {
        let mut sampler = TransformSampler::new(0.0, 1.0, 1.0, 0.0, 60.0, 3).unwrap();
        let t = sampler.sample();
        for (a, b) in t.as_array().iter().zip(AffineTransform::IDENTITY.as_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_gives_identical_draws() {
        let mut s1 = TransformSampler::new(20.0, 0.9, 1.1, 0.1, 60.0, 42).unwrap();
        let mut s2 = TransformSampler::new(20.0, 0.9, 1.1, 0.1, 60.0, 42).unwrap();
        for _ in 0..10 {
            assert_eq!(s1.sample(), s2.sample());
        }
    }

    #[test]
    fn sampled_parameters_look_uniform() {
        // KS statistic of each parameter against the uniform CDF over 1e4 draws.
        let n = 10_000;
        let mut sampler = TransformSampler::new(20.0, 0.9, 1.1, 0.1, 60.0, 7).unwrap();
        let mut thetas = Vec::with_capacity(n);
        let mut scales = Vec::with_capacity(n);
        let mut dxs = Vec::with_capacity(n);
        for _ in 0..n {
            let t = sampler.sample();
            // recover parameters from the matrix: scale from det, angle from a,c
            let det = t.determinant();
            let s = det.sqrt();
            scales.push((s - 0.9) / 0.2);
            let theta = (t.c / s).atan2(t.a / s).to_degrees();
            thetas.push((theta + 20.0) / 40.0);
            // translation: position of the center's image minus center
            let center = 29.5;
            let (cx, _) = t.apply(center, center);
            dxs.push(((cx - center) + 6.0) / 12.0);
        }
        for (name, series) in [("theta", thetas), ("scale", scales), ("dx", dxs)] {
            let mut sorted = series.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut ks: f64 = 0.0;
            for (i, v) in sorted.iter().enumerate() {
                let cdf = v.clamp(0.0, 1.0);
                let emp_hi = (i + 1) as f64 / n as f64;
                let emp_lo = i as f64 / n as f64;
                ks = ks.max((emp_hi - cdf).abs()).max((cdf - emp_lo).abs());
            }
            assert!(ks < 0.05, "{name}: KS statistic {ks}");
        }
    }
}
