//! Training-time corruptions and the normalized face crop.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;
use crate::imaging::{ImageBuffer, ImageError};
use crate::landmarks::{LandmarkSet, LEFT_EYE_OUTER, LOWER_LIP_BOTTOM, RIGHT_EYE_OUTER};

pub use crate::imaging::gaussian_blur;

pub const MOTION_LENGTH_RANGE: (f64, f64) = (0.005, 0.01);
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.0025, 0.005);
pub const SALT_PEPPER_FRACTION: f64 = 0.01;
pub const NOISE_STD: f64 = 0.05;
pub const CROP_SIZE: usize = 224;
/// Largest crop shift, as a fraction of the crop size.
pub const MAX_SHIFT_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("motion blur length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("salt-and-pepper fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("noise standard deviation must be non-negative, got {0}")]
    BadStd(f64),
    #[error("crop shift ({dx}, {dy}) exceeds {limit:.2} px")]
    ShiftTooLarge { dx: f64, dy: f64, limit: f64 },
    #[error("crop size must be positive")]
    EmptyCrop,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Averages `max(1, round(length))` bilinear taps spaced one pixel apart on
/// a line through each pixel at `angle`.
pub fn motion_blur(img: &ImageBuffer, length: f64, angle: f64) -> Result<ImageBuffer, AugmentError> {
    if !(length > 0.0) {
        return Err(AugmentError::NonPositiveLength(length));
    }
    let taps = (length.round() as usize).max(1);
    if taps == 1 {
        return Ok(img.clone());
    }
    let (s, c) = angle.sin_cos();
    let offsets: Vec<Point> = (0..taps)
        .map(|k| {
            let t = k as f64 - (taps - 1) as f64 / 2.0;
            Point::new(t * c, t * s)
        })
        .collect();
    let (w, h, ch) = img.dims();
    let norm = 1.0 / taps as f64;
    Ok(ImageBuffer::from_fn(w, h, ch, |x, y, k| {
        let sum: f64 = offsets
            .iter()
            .map(|o| img.sample_bilinear(x as f64 + o.x, y as f64 + o.y, k))
            .sum();
        sum * norm
    }))
}

/// Sets `round(fraction * W * H)` distinct pixels to black or white.
pub fn salt_pepper<R: Rng + ?Sized>(img: &ImageBuffer, fraction: f64, rng: &mut R) -> Result<ImageBuffer, AugmentError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AugmentError::BadFraction(fraction));
    }
    let (w, h, _) = img.dims();
    let count = (fraction * (w * h) as f64).round() as usize;
    let mut out = img.clone();
    for site in sample(rng, w * h, count).into_iter() {
        let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        out.pixel_mut(site % w, site / w).fill(v);
    }
    Ok(out)
}

/// Adds i.i.d. zero-mean Gaussian noise to every value and clamps.
pub fn gaussian_noise<R: Rng + ?Sized>(img: &ImageBuffer, std: f64, rng: &mut R) -> Result<ImageBuffer, AugmentError> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(AugmentError::BadStd(std));
    }
    if std == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|_| AugmentError::BadStd(std))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// One corruption with its drawn parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    None,
    MotionBlur { length: f64, angle: f64 },
    GaussianBlur { sigma: f64 },
    SaltPepper { fraction: f64 },
    GaussianNoise { std: f64 },
}

/// A corruption plus the seed of its random stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(flatten)]
    pub op: AugmentOp,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            op: AugmentOp::None,
            seed: 0,
        }
    }

    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, AugmentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.op {
            AugmentOp::None => Ok(img.clone()),
            AugmentOp::MotionBlur { length, angle } => motion_blur(img, length, angle),
            AugmentOp::GaussianBlur { sigma } => Ok(gaussian_blur(img, sigma)?),
            AugmentOp::SaltPepper { fraction } => salt_pepper(img, fraction, &mut rng),
            AugmentOp::GaussianNoise { std } => gaussian_noise(img, std, &mut rng),
        }
    }

    /// Whether the drawn parameters lie in the allowed ranges for an image
    /// of the given height.
    pub fn in_range(&self, height: usize) -> bool {
        let h = height as f64;
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo * h && v <= hi * h;
        match self.op {
            AugmentOp::None => true,
            AugmentOp::MotionBlur { length, angle } => within(length, MOTION_LENGTH_RANGE) && (0.0..PI).contains(&angle),
            AugmentOp::GaussianBlur { sigma } => within(sigma, BLUR_SIGMA_RANGE),
            AugmentOp::SaltPepper { fraction } => fraction == SALT_PEPPER_FRACTION,
            AugmentOp::GaussianNoise { std } => std == NOISE_STD,
        }
    }
}

/// Draws the five versions' specs for an image of the given height:
/// untouched, motion blur, Gaussian blur, salt and pepper, Gaussian noise.
pub fn draw_five<R: Rng + ?Sized>(height: usize, rng: &mut R) -> [AugmentSpec; 5] {
    let h = height as f64;
    let length = rng.random_range(MOTION_LENGTH_RANGE.0 * h..=MOTION_LENGTH_RANGE.1 * h);
    let angle = rng.random_range(0.0..PI);
    let sigma = rng.random_range(BLUR_SIGMA_RANGE.0 * h..=BLUR_SIGMA_RANGE.1 * h);
    let ops = [
        AugmentOp::None,
        AugmentOp::MotionBlur { length, angle },
        AugmentOp::GaussianBlur { sigma },
        AugmentOp::SaltPepper {
            fraction: SALT_PEPPER_FRACTION,
        },
        AugmentOp::GaussianNoise { std: NOISE_STD },
    ];
    ops.map(|op| AugmentSpec {
        op,
        seed: if op == AugmentOp::None { 0 } else { rng.random() },
    })
}

/// The five versions of `img` with their specs.
pub fn expand_five<R: Rng + ?Sized>(img: &ImageBuffer, rng: &mut R) -> Result<Vec<(ImageBuffer, AugmentSpec)>, AugmentError> {
    draw_five(img.height(), rng)
        .into_iter()
        .map(|spec| Ok((spec.apply(img)?, spec)))
        .collect()
}

/// Similarity transform from an input face image to its normalized crop.
///
/// The input is rotated about the eye midpoint so the eye centers share a
/// row. The box spanning the outer eye corners horizontally and the brow top
/// to the lower lip vertically is widened on its short side to a square and
/// mapped onto the `size x size` output. The crop window is then moved by
/// `shift` output pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub pivot: Point,
    pub angle: f64,
    pub box_center: Point,
    /// Input pixels per output pixel.
    pub scale: f64,
    pub size: usize,
    pub shift: (f64, f64),
}

impl CropTransform {
    pub fn new(lm: &LandmarkSet, shift: (f64, f64), size: usize) -> Result<Self, AugmentError> {
        if size == 0 {
            return Err(AugmentError::EmptyCrop);
        }
        let limit = MAX_SHIFT_FRACTION * size as f64;
        if shift.0.hypot(shift.1) > limit + 1e-12 {
            return Err(AugmentError::ShiftTooLarge {
                dx: shift.0,
                dy: shift.1,
                limit,
            });
        }
        let (re, le) = (lm.right_eye_center(), lm.left_eye_center());
        let pivot = re.midpoint(le);
        let angle = (le.y - re.y).atan2(le.x - re.x);
        let level = |i: usize| lm.point(i).rotate_about(pivot, -angle);
        let (a, b) = (level(RIGHT_EYE_OUTER), level(LEFT_EYE_OUTER));
        let top = (17..27).map(|i| level(i).y).fold(f64::INFINITY, f64::min);
        let bottom = level(LOWER_LIP_BOTTOM).y;
        let (x0, x1) = (a.x.min(b.x), a.x.max(b.x));
        let side = (x1 - x0).max(bottom - top).max(1.0);
        Ok(Self {
            pivot,
            angle,
            box_center: Point::new(0.5 * (x0 + x1), 0.5 * (top + bottom)),
            scale: side / size as f64,
            size,
            shift,
        })
    }

    fn half(&self) -> f64 {
        (self.size - 1) as f64 / 2.0
    }

    /// Input position shown at output position `q`.
    pub fn to_source(&self, q: Point) -> Point {
        let level = Point::new(
            self.box_center.x + (q.x + self.shift.0 - self.half()) * self.scale,
            self.box_center.y + (q.y + self.shift.1 - self.half()) * self.scale,
        );
        level.rotate_about(self.pivot, self.angle)
    }

    /// Output position of input position `p`.
    pub fn to_crop(&self, p: Point) -> Point {
        let level = p.rotate_about(self.pivot, -self.angle);
        Point::new(
            (level.x - self.box_center.x) / self.scale + self.half() - self.shift.0,
            (level.y - self.box_center.y) / self.scale + self.half() - self.shift.1,
        )
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        ImageBuffer::from_fn(self.size, self.size, img.channels(), |x, y, c| {
            let p = self.to_source(Point::new(x as f64, y as f64));
            img.sample_bilinear(p.x, p.y, c)
        })
    }
}

/// Normalized crop of the default size. Areas outside the input replicate its
/// border.
pub fn normalize_crop(img: &ImageBuffer, lm: &LandmarkSet, shift: (f64, f64)) -> Result<ImageBuffer, AugmentError> {
    normalize_crop_sized(img, lm, shift, CROP_SIZE)
}

pub fn normalize_crop_sized(
    img: &ImageBuffer,
    lm: &LandmarkSet,
    shift: (f64, f64),
    size: usize,
) -> Result<ImageBuffer, AugmentError> {
    Ok(CropTransform::new(lm, shift, size)?.apply(img))
}

/// Largest per-axis integer shift used by [`random_shift`].
pub fn max_integer_shift(size: usize) -> usize {
    (MAX_SHIFT_FRACTION * size as f64 / 2f64.sqrt()).floor() as usize
}

/// Unshifted crop extended by `pad` pixels on every side. The window at
/// `(pad + dx, pad + dy)` equals the crop shifted by the integer `(dx, dy)`.
pub fn normalize_crop_padded(img: &ImageBuffer, lm: &LandmarkSet, size: usize, pad: usize) -> Result<ImageBuffer, AugmentError> {
    let t = CropTransform::new(lm, (0.0, 0.0), size)?;
    let full = size + 2 * pad;
    let pad = pad as f64;
    Ok(ImageBuffer::from_fn(full, full, img.channels(), |x, y, c| {
        let p = t.to_source(Point::new(x as f64 - pad, y as f64 - pad));
        img.sample_bilinear(p.x, p.y, c)
    }))
}

/// Integer crop shift drawn uniformly from the square that fits inside the
/// allowed shift disc.
pub fn random_shift<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (f64, f64) {
    let m = max_integer_shift(size) as i64;
    (rng.random_range(-m..=m) as f64, rng.random_range(-m..=m) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::FaceParams;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.random())
    }

    #[test]
    fn motion_blur_basics() {
        let flat = ImageBuffer::filled(10, 8, 3, 0.3);
        let out = motion_blur(&flat, 4.0, 0.7).unwrap();
        assert!(out.max_abs_diff(&flat) < 1e-15);
        let img = random_image(10, 8, 1);
        assert_eq!(motion_blur(&img, 0.8, 1.0).unwrap(), img);
        assert!(matches!(motion_blur(&img, 0.0, 1.0), Err(AugmentError::NonPositiveLength(_))));
    }

    #[test]
    fn horizontal_motion_blur_is_moving_average() {
        let img = ImageBuffer::from_fn(16, 4, 1, |x, _, _| if x >= 8 { 1.0 } else { 0.0 });
        let out = motion_blur(&img, 5.0, 0.0).unwrap();
        for y in 0..4 {
            for x in 0..16i64 {
                let avg: f64 = (-2..=2)
                    .map(|d| img.get((x + d).clamp(0, 15) as usize, y, 0))
                    .sum::<f64>()
                    / 5.0;
                assert!((out.get(x as usize, y, 0) - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_blur_of_impulse() {
        let sigma = 1.5;
        let mut img = ImageBuffer::new(21, 21, 1);
        img.set(10, 10, 0, 1.0);
        let out = gaussian_blur(&img, sigma).unwrap();
        let r = (3.0 * sigma).ceil() as i64;
        let z: f64 = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        let k = |d: i64| {
            if d.abs() > r {
                0.0
            } else {
                (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() / z
            }
        };
        for y in 0..21 {
            for x in 0..21 {
                let expect = k(x as i64 - 10) * k(y as i64 - 10);
                assert!((out.get(x, y, 0) - expect).abs() < 1e-6);
            }
        }
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(gaussian_blur(&img, 0.0).is_err());
    }

    #[test]
    fn salt_pepper_counts() {
        let img = ImageBuffer::filled(100, 100, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = salt_pepper(&img, 0.01, &mut rng).unwrap();
        let changed = (0..100 * 100).filter(|k| out.pixel(k % 100, k / 100) != img.pixel(k % 100, k / 100)).count();
        assert_eq!(changed, 100);
        for k in 0..100 * 100 {
            let p = out.pixel(k % 100, k / 100);
            assert!(p.iter().all(|&v| v == p[0]));
        }
        let again = salt_pepper(&img, 0.01, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out, again);
        let small = ImageBuffer::filled(4, 4, 3, 0.5);
        assert_eq!(salt_pepper(&small, 0.01, &mut rng).unwrap(), small);
        assert!(matches!(salt_pepper(&img, 1.0, &mut rng), Err(AugmentError::BadFraction(_))));
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = ImageBuffer::filled(256, 256, 1, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let out = gaussian_noise(&img, 0.05, &mut rng).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.045..=0.055).contains(&std), "std {std}");
        assert_eq!(gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
        let a = gaussian_noise(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gaussian_noise(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn five_versions() {
        let img = random_image(40, 40, 2);
        let out = expand_five(&img, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].0, img);
        let again = expand_five(&img, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out, again);
        for (im, spec) in &out {
            assert_eq!(im.dims(), img.dims());
            assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(spec.apply(&img).unwrap(), *im);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let specs = draw_five(224, &mut rng);
            assert!(specs.iter().all(|s| s.in_range(224)));
        }
    }

    #[test]
    fn spec_serialization() {
        let spec = AugmentSpec {
            op: AugmentOp::MotionBlur { length: 1.5, angle: 0.25 },
            seed: 9,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"kind":"motion_blur","length":1.5,"angle":0.25,"seed":9}"#);
        assert_eq!(serde_json::from_str::<AugmentSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn crop_levels_eyes_and_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = FaceParams::random(&mut rng, true);
        params.tilt = 0.15;
        let (img, lm) = params.render(96, 96);
        let t = CropTransform::new(&lm, (0.0, 0.0), 64).unwrap();
        let re = t.to_crop(lm.right_eye_center());
        let le = t.to_crop(lm.left_eye_center());
        assert!((re.y - le.y).abs() < 0.5);
        assert!(re.x < le.x);
        let p = Point::new(30.0, 41.0);
        assert!(t.to_source(t.to_crop(p)).distance(p) < 1e-9);

        let base = normalize_crop_sized(&img, &lm, (0.0, 0.0), 64).unwrap();
        let moved = normalize_crop_sized(&img, &lm, (3.0, 0.0), 64).unwrap();
        for y in 0..64 {
            for x in 0..61 {
                assert_eq!(moved.pixel(x, y), base.pixel(x + 3, y));
            }
        }
        assert_eq!(normalize_crop(&img, &lm, (0.0, 0.0)).unwrap().dims(), (224, 224, 3));
        assert!(matches!(
            CropTransform::new(&lm, (12.0, 0.0), 224),
            Err(AugmentError::ShiftTooLarge { .. })
        ));
        for _ in 0..100 {
            let (dx, dy) = random_shift(224, &mut rng);
            assert!(CropTransform::new(&lm, (dx, dy), 224).is_ok());
        }

        let pad = max_integer_shift(64);
        let padded = normalize_crop_padded(&img, &lm, 64, pad).unwrap();
        for (dx, dy) in [(0i64, 0i64), (2, -1), (-2, 2)] {
            let direct = normalize_crop_sized(&img, &lm, (dx as f64, dy as f64), 64).unwrap();
            let w = padded.window((pad as i64 + dx) as usize, (pad as i64 + dy) as usize, 64, 64);
            assert_eq!(w, direct);
        }
    }
}
