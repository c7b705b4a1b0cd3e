//! Floating-point rasters, PNG I/O, Gaussian filtering, frequency-band
//! splitting and polar resampling.

use std::f64::consts::TAU;
use std::path::Path;

use thiserror::Error;

use crate::geometry::Point;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data: {0}")]
    CorruptData(String),
    #[error("failed to write {path}: {reason}")]
    Write { path: String, reason: String },
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("annulus (r_max {r_max}) around ({cx}, {cy}) leaves the {width}x{height} image")]
    AnnulusOutOfBounds {
        cx: f64,
        cy: f64,
        r_max: f64,
        width: usize,
        height: usize,
    },
    #[error("degenerate radii: r_min {r_min} >= r_max {r_max}")]
    DegenerateRadii { r_min: f64, r_max: f64 },
    #[error("polar grid needs at least 2 radial and 3 angular samples")]
    DegeneratePolarGrid,
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize, usize), (usize, usize, usize)),
}

/// Row-major `height × width × channels` raster of `f64` intensities.
///
/// Stored values are nominally in `[0, 1]`; intermediate results such as
/// high-frequency bands are allowed to leave that range (see [`SignedImage`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// A raster whose values are signed and unclamped, e.g. a high-pass band.
pub type SignedImage = ImageBuffer;

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels > 0, "image needs at least one channel");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Panics if `data.len() != width * height * channels`.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            width * height * channels,
            "buffer length does not match dimensions"
        );
        assert!(channels > 0, "image needs at least one channel");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Builds an image from a per-pixel closure `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_vec(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y, 0);
        &mut self.data[i..i + self.channels]
    }

    /// The `width x height` sub-image whose top-left pixel is `(x0, y0)`.
    pub fn window(&self, x0: usize, y0: usize, width: usize, height: usize) -> ImageBuffer {
        assert!(x0 + width <= self.width && y0 + height <= self.height, "window leaves the image");
        let ch = self.channels;
        let mut data = Vec::with_capacity(width * height * ch);
        for y in y0..y0 + height {
            let start = self.index(x0, y, 0);
            data.extend_from_slice(&self.data[start..start + width * ch]);
        }
        ImageBuffer::from_vec(width, height, ch, data)
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> Result<(), ImageError> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch(self.dims(), other.dims()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageBuffer, f: impl Fn(f64, f64) -> f64) -> ImageBuffer {
        assert_eq!(self.dims(), other.dims());
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn clamped(&self) -> ImageBuffer {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over all channels of pixel `(x, y)`.
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        self.pixel(x, y).iter().sum::<f64>() / self.channels as f64
    }

    /// Bilinear sample at a fractional position; coordinates outside the
    /// raster are clamped to the nearest edge pixel.
    ///
    /// Coordinates within `1e-10` of an integer snap to it so that exact
    /// identity mappings reproduce pixels bit-for-bit despite round-off.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, x1, fx) = axis_weights(x, self.width);
        let (y0, y1, fy) = axis_weights(y, self.height);
        let v00 = self.get(x0, y0, c);
        if fx == 0.0 && fy == 0.0 {
            return v00;
        }
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        top + (bottom - top) * fy
    }

    /// Samples every channel at `p` into `out`.
    pub fn sample_pixel(&self, p: Point, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.sample_bilinear(p.x, p.y, c);
        }
    }

    /// Average of the channels; returns a one-channel image.
    pub fn to_gray(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, 1, |x, y, _| self.luma(x, y))
    }

    /// Bilinear resize to `width × height` with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> ImageBuffer {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        ImageBuffer::from_fn(width, height, self.channels, |x, y, c| {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fy = (y as f64 + 0.5) * sy - 0.5;
            self.sample_bilinear(fx, fy, c)
        })
    }
}

const SNAP: f64 = 1e-10;

#[inline]
fn axis_weights(v: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let mut v = if v.is_nan() { 0.0 } else { v.clamp(0.0, max) };
    let r = v.round();
    if (v - r).abs() < SNAP {
        v = r;
    }
    let i0 = v.floor();
    let f = v - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, f)
}

/// Reads a raster file and scales intensities to `[0, 1]`.
///
/// 8- and 16-bit gray and RGB PNGs are supported; an alpha channel is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.exists() {
        return Err(ImageError::MissingFile(display));
    }
    let bytes = std::fs::read(path).map_err(|e| ImageError::CorruptData(format!("{display}: {e}")))?;
    decode_image(&bytes).map_err(|e| match e {
        ImageError::UnsupportedFormat(m) => ImageError::UnsupportedFormat(format!("{display}: {m}")),
        ImageError::CorruptData(m) => ImageError::CorruptData(format!("{display}: {m}")),
        other => other,
    })
}

/// Decodes an in-memory raster file.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    use image::{DynamicImage, ImageFormat};

    let format = image::guess_format(bytes)
        .map_err(|e| ImageError::UnsupportedFormat(e.to_string()))?;
    if format != ImageFormat::Png {
        return Err(ImageError::UnsupportedFormat(format!("{format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| match e {
        image::ImageError::Unsupported(u) => ImageError::UnsupportedFormat(u.to_string()),
        other => ImageError::CorruptData(other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = match img {
        DynamicImage::ImageLuma8(b) => {
            ImageBuffer::from_vec(w, h, 1, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageLumaA8(b) => ImageBuffer::from_vec(
            w,
            h,
            1,
            b.into_raw().chunks(2).map(|p| p[0] as f64 / 255.0).collect(),
        ),
        DynamicImage::ImageRgb8(b) => {
            ImageBuffer::from_vec(w, h, 3, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageRgba8(b) => ImageBuffer::from_vec(
            w,
            h,
            3,
            b.into_raw()
                .chunks(4)
                .flat_map(|p| p[..3].iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>())
                .collect(),
        ),
        DynamicImage::ImageLuma16(b) => ImageBuffer::from_vec(
            w,
            h,
            1,
            b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        ),
        DynamicImage::ImageLumaA16(b) => ImageBuffer::from_vec(
            w,
            h,
            1,
            b.into_raw().chunks(2).map(|p| p[0] as f64 / 65535.0).collect(),
        ),
        DynamicImage::ImageRgb16(b) => ImageBuffer::from_vec(
            w,
            h,
            3,
            b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        ),
        DynamicImage::ImageRgba16(b) => ImageBuffer::from_vec(
            w,
            h,
            3,
            b.into_raw()
                .chunks(4)
                .flat_map(|p| p[..3].iter().map(|&v| v as f64 / 65535.0).collect::<Vec<_>>())
                .collect(),
        ),
        other => {
            let rgb = other.to_rgb32f();
            ImageBuffer::from_vec(
                w,
                h,
                3,
                rgb.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect(),
            )
        }
    };
    Ok(out)
}

/// Quantizes to 8 bits with round-half-up after clamping to `[0, 1]`.
pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Encodes the image as an 8-bit gray or RGB PNG.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, ImageError> {
    use image::{codecs::png::PngEncoder, ExtendedColorType, ImageEncoder};

    let color = match img.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        n => {
            return Err(ImageError::UnsupportedFormat(format!(
                "cannot write {n}-channel image as PNG"
            )))
        }
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&bytes, img.width() as u32, img.height() as u32, color)
        .map_err(|e| ImageError::Write {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
    Ok(out)
}

pub fn save_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| ImageError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Normalized sampled Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / denom).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Convolves every channel with the separable `kernel` (odd length, centered)
/// along x and then y, clamping reads to the edge.
pub fn convolve_separable(img: &ImageBuffer, kernel: &[f64]) -> ImageBuffer {
    let (w, h, ch) = img.dims();
    let radius = (kernel.len() / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;

    let mut tmp = ImageBuffer::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + k as isize - radius, w);
                    acc += kv * img.get(sx, y, c);
                }
                tmp.set(x, y, c, acc);
            }
        }
    }
    let mut out = ImageBuffer::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + k as isize - radius, h);
                    acc += kv * tmp.get(x, sy, c);
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, edge-clamped.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer, ImageError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImageError::NonPositiveSigma(sigma));
    }
    Ok(convolve_separable(img, &gaussian_kernel(sigma)))
}

/// Splits `img` into a Gaussian low band and the signed residual high band.
pub fn split_frequency(
    img: &ImageBuffer,
    sigma: f64,
) -> Result<(ImageBuffer, SignedImage), ImageError> {
    let low = gaussian_blur(img, sigma)?;
    let high = img.zip_map(&low, |v, l| v - l);
    Ok((low, high))
}

/// Sampling lattice over an (optionally elliptical) annulus.
///
/// Sample `(i, j)` sits at radius `r_i = r_min + (r_max - r_min) i / (nr - 1)`
/// and angle `theta_j = 2 pi j / ntheta`, i.e. at pixel
/// `center + (r_i cos theta_j, aspect_y r_i sin theta_j)`. With `aspect_y = 1`
/// the annulus is circular.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarGrid {
    pub center: Point,
    pub r_min: f64,
    pub r_max: f64,
    pub radial_samples: usize,
    pub angular_samples: usize,
    pub aspect_y: f64,
}

impl PolarGrid {
    pub fn circular(center: Point, r_min: f64, r_max: f64, nr: usize, ntheta: usize) -> Self {
        Self {
            center,
            r_min,
            r_max,
            radial_samples: nr,
            angular_samples: ntheta,
            aspect_y: 1.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), ImageError> {
        if !(self.r_min < self.r_max) || self.r_min < 0.0 {
            return Err(ImageError::DegenerateRadii {
                r_min: self.r_min,
                r_max: self.r_max,
            });
        }
        if self.radial_samples < 2 || self.angular_samples < 3 || !(self.aspect_y > 0.0) {
            return Err(ImageError::DegeneratePolarGrid);
        }
        let ry = self.r_max * self.aspect_y;
        let c = self.center;
        let inside = c.x - self.r_max >= 0.0
            && c.x + self.r_max <= (width - 1) as f64
            && c.y - ry >= 0.0
            && c.y + ry <= (height - 1) as f64;
        if !inside {
            return Err(ImageError::AnnulusOutOfBounds {
                cx: c.x,
                cy: c.y,
                r_max: self.r_max,
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.r_min + (self.r_max - self.r_min) * i as f64 / (self.radial_samples - 1) as f64
    }

    pub fn angle(&self, j: usize) -> f64 {
        TAU * j as f64 / self.angular_samples as f64
    }

    pub fn position(&self, i: usize, j: usize) -> Point {
        let r = self.radius(i);
        let (s, c) = self.angle(j).sin_cos();
        Point::new(self.center.x + r * c, self.center.y + self.aspect_y * r * s)
    }

    /// Polar coordinates `(radius, angle in [0, 2 pi))` of a pixel position.
    pub fn polar_of(&self, p: Point) -> (f64, f64) {
        let dx = p.x - self.center.x;
        let dy = (p.y - self.center.y) / self.aspect_y;
        let mut theta = dy.atan2(dx);
        if theta < 0.0 {
            theta += TAU;
        }
        (dx.hypot(dy), theta)
    }

    /// Fractional lattice coordinates `(radial, angular)` of a pixel position.
    pub fn lattice_of(&self, p: Point) -> (f64, f64) {
        let (r, theta) = self.polar_of(p);
        let fi = (r - self.r_min) / (self.r_max - self.r_min) * (self.radial_samples - 1) as f64;
        let fj = theta / TAU * self.angular_samples as f64;
        (fi, fj)
    }

    pub fn in_annulus(&self, p: Point) -> bool {
        let (r, _) = self.polar_of(p);
        r >= self.r_min && r <= self.r_max
    }
}

/// Image resampled on a [`PolarGrid`]; radial-major, angular axis cyclic.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarPatch {
    pub grid: PolarGrid,
    pub channels: usize,
    /// Index `(i * angular_samples + j) * channels + c`.
    pub data: Vec<f64>,
}

impl PolarPatch {
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.grid.angular_samples + j) * self.channels + c]
    }

    /// Bilinear interpolation on the lattice; radial clamped, angular wrapped.
    pub fn sample(&self, fi: f64, fj: f64, c: usize) -> f64 {
        let nr = self.grid.radial_samples;
        let nt = self.grid.angular_samples;
        let fi = fi.clamp(0.0, (nr - 1) as f64);
        let i0 = (fi.floor() as usize).min(nr - 1);
        let i1 = (i0 + 1).min(nr - 1);
        let ti = fi - i0 as f64;
        let fj = fj.rem_euclid(nt as f64);
        let j0 = (fj.floor() as usize) % nt;
        let j1 = (j0 + 1) % nt;
        let tj = fj - fj.floor();
        let a = self.get(i0, j0, c) + (self.get(i0, j1, c) - self.get(i0, j0, c)) * tj;
        let b = self.get(i1, j0, c) + (self.get(i1, j1, c) - self.get(i1, j0, c)) * tj;
        a + (b - a) * ti
    }
}

/// Resamples `img` on a circular annulus.
pub fn to_polar(
    img: &ImageBuffer,
    center: Point,
    r_min: f64,
    r_max: f64,
    nr: usize,
    ntheta: usize,
) -> Result<PolarPatch, ImageError> {
    to_polar_grid(img, &PolarGrid::circular(center, r_min, r_max, nr, ntheta))
}

pub fn to_polar_grid(img: &ImageBuffer, grid: &PolarGrid) -> Result<PolarPatch, ImageError> {
    grid.validate(img.width(), img.height())?;
    Ok(resample_polar(img, grid))
}

/// Like [`to_polar_grid`] without the bounds check; samples beyond the image
/// border take the nearest edge value.
pub fn resample_polar(img: &ImageBuffer, grid: &PolarGrid) -> PolarPatch {
    let ch = img.channels();
    let mut data = Vec::with_capacity(grid.radial_samples * grid.angular_samples * ch);
    for i in 0..grid.radial_samples {
        for j in 0..grid.angular_samples {
            let p = grid.position(i, j);
            for c in 0..ch {
                data.push(img.sample_bilinear(p.x, p.y, c));
            }
        }
    }
    PolarPatch {
        grid: *grid,
        channels: ch,
        data,
    }
}

/// Writes the patch back into a copy of `target`; only pixels inside the
/// annulus are touched.
pub fn from_polar(patch: &PolarPatch, target: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
    patch.grid.validate(target.width(), target.height())?;
    if patch.channels != target.channels() {
        return Err(ImageError::DimensionMismatch(
            (patch.grid.radial_samples, patch.grid.angular_samples, patch.channels),
            target.dims(),
        ));
    }
    let mut out = target.clone();
    for y in 0..target.height() {
        for x in 0..target.width() {
            let p = Point::new(x as f64, y as f64);
            if !patch.grid.in_annulus(p) {
                continue;
            }
            let (fi, fj) = patch.grid.lattice_of(p);
            for c in 0..patch.channels {
                out.set(x, y, c, patch.sample(fi, fj, c));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, ch: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, ch, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(127.5 / 255.0), 128);
        assert_eq!(quantize_u8(-1.0), 0);
        assert_eq!(quantize_u8(2.0), 255);
    }

    #[test]
    fn bilinear_is_exact_on_integer_grid_and_clamps() {
        let img = random_image(5, 4, 2, 1);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(img.sample_bilinear(x as f64, y as f64, 1), img.get(x, y, 1));
                assert_eq!(
                    img.sample_bilinear(x as f64 + 1e-13, y as f64 - 1e-13, 0),
                    img.get(x, y, 0)
                );
            }
        }
        assert_eq!(img.sample_bilinear(-3.0, -7.0, 0), img.get(0, 0, 0));
        assert_eq!(img.sample_bilinear(40.0, 1.0, 0), img.get(4, 1, 0));
        let mid = img.sample_bilinear(1.5, 2.0, 0);
        assert!((mid - 0.5 * (img.get(1, 2, 0) + img.get(2, 2, 0))).abs() < 1e-15);
    }

    #[test]
    fn split_of_constant_image() {
        let img = ImageBuffer::filled(9, 7, 3, 0.37);
        let (low, high) = split_frequency(&img, 2.5).unwrap();
        assert!(low.max_abs_diff(&img) < 1e-15);
        assert!(high.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn split_is_additive() {
        let img = random_image(17, 13, 3, 2);
        let (low, high) = split_frequency(&img, 1.3).unwrap();
        let back = low.zip_map(&high, |a, b| a + b);
        assert!(back.max_abs_diff(&img) <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn split_rejects_bad_sigma() {
        let img = ImageBuffer::new(3, 3, 1);
        assert!(matches!(split_frequency(&img, 0.0), Err(ImageError::NonPositiveSigma(_))));
        assert!(matches!(gaussian_blur(&img, -1.0), Err(ImageError::NonPositiveSigma(_))));
    }

    #[test]
    fn blur_matches_dense_convolution() {
        // Oracle: direct 2-D sum over the outer-product kernel with clamped reads.
        let img = random_image(16, 16, 1, 3);
        let sigma = 2.0;
        let radius = 6isize;
        let mut weights = Vec::new();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                weights.push((dx, dy, w));
            }
        }
        let norm: f64 = weights.iter().map(|w| w.2).sum();
        let (low, _) = split_frequency(&img, sigma).unwrap();
        for y in 0..16isize {
            for x in 0..16isize {
                let mut acc = 0.0;
                for &(dx, dy, w) in &weights {
                    let sx = (x + dx).clamp(0, 15) as usize;
                    let sy = (y + dy).clamp(0, 15) as usize;
                    acc += w * img.get(sx, sy, 0);
                }
                acc /= norm;
                assert!((acc - low.get(x as usize, y as usize, 0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn polar_of_constant_is_constant() {
        let img = ImageBuffer::filled(40, 40, 1, 0.25);
        let patch = to_polar(&img, Point::new(20.0, 20.0), 4.0, 15.0, 8, 32).unwrap();
        assert!(patch.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let back = from_polar(&patch, &img).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-15);
    }

    #[test]
    fn radially_symmetric_image_is_flat_along_angle() {
        let c = Point::new(32.0, 32.0);
        let img = ImageBuffer::from_fn(65, 65, 1, |x, y, _| {
            let r = Point::new(x as f64, y as f64).distance(c);
            0.5 + 0.5 * (r / 30.0).min(1.0)
        });
        // bilinear interpolation of a radial profile is not exactly radial, so
        // compare along each ring against its mean
        let patch = to_polar(&img, c, 5.0, 25.0, 10, 64).unwrap();
        for i in 0..10 {
            let ring: Vec<f64> = (0..64).map(|j| patch.get(i, j, 0)).collect();
            let mean = ring.iter().sum::<f64>() / 64.0;
            assert!(ring.iter().all(|v| (v - mean).abs() < 2e-3), "ring {i}");
        }
    }

    #[test]
    fn polar_round_trip_on_smooth_gradient() {
        let img = ImageBuffer::from_fn(64, 64, 1, |x, y, _| (x as f64 + 0.5 * y as f64) / 96.0);
        let c = Point::new(32.0, 32.0);
        let patch = to_polar(&img, c, 6.0, 28.0, 32, 128).unwrap();
        let back = from_polar(&patch, &img).unwrap();
        let mut max_in = 0.0f64;
        for y in 0..64 {
            for x in 0..64 {
                let p = Point::new(x as f64, y as f64);
                let d = (back.get(x, y, 0) - img.get(x, y, 0)).abs();
                if patch.grid.in_annulus(p) {
                    max_in = max_in.max(d);
                } else {
                    assert_eq!(d, 0.0, "pixel outside annulus changed");
                }
            }
        }
        assert!(max_in < 0.02, "round trip error {max_in}");
    }

    #[test]
    fn polar_errors() {
        let img = ImageBuffer::new(20, 20, 1);
        assert!(matches!(
            to_polar(&img, Point::new(10.0, 10.0), 3.0, 12.0, 4, 8),
            Err(ImageError::AnnulusOutOfBounds { .. })
        ));
        assert!(matches!(
            to_polar(&img, Point::new(10.0, 10.0), 5.0, 5.0, 4, 8),
            Err(ImageError::DegenerateRadii { .. })
        ));
    }

    #[test]
    fn png_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        save_png(&ImageBuffer::filled(2, 2, 3, 1.0), &path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.dims(), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 1.0));

        let gray = dir.path().join("gray.png");
        image::GrayImage::from_raw(1, 1, vec![128]).unwrap().save(&gray).unwrap();
        let g = load_image(&gray).unwrap();
        assert_eq!(g.channels(), 1);
        assert!((g.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-15);

        let wide = dir.path().join("wide.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(1, 1, vec![65535u16])
            .unwrap()
            .save(&wide)
            .unwrap();
        assert_eq!(load_image(&wide).unwrap().get(0, 0, 0), 1.0);

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.png");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&truncated), Err(ImageError::CorruptData(_))));

        assert!(matches!(
            load_image(dir.path().join("nope.png")),
            Err(ImageError::MissingFile(_))
        ));
        let text = dir.path().join("notes.png");
        std::fs::write(&text, b"hello world, not an image").unwrap();
        assert!(matches!(load_image(&text), Err(ImageError::UnsupportedFormat(_))));
    }
}
