//! Procedural face-like images with exact 68-point landmarks.
//!
//! Faces are drawn in a face-local frame (x to the subject's left on screen,
//! y down, one unit = half the face width) and then placed with a similarity
//! pose. Every identity carries its own colors and a distinct sinusoidal
//! texture per feature (skin, brows, irises, nose, lips) so that blending two
//! identities leaves a superposition of two patterns. Catchlights and small
//! spots sit at random positions that no landmark tracks, so a blend shows
//! them twice at half strength.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Point;
use crate::imaging::ImageBuffer;
use crate::landmarks::{LandmarkSet, NUM_LANDMARKS};

/// Oriented sinusoid `amp * sin(freq * (u cos a + v sin a) + phase)` in
/// face-local units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub freq: f64,
    pub angle: f64,
    pub phase: f64,
    pub amp: f64,
}

impl Texture {
    fn eval(&self, u: f64, v: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        self.amp * (self.freq * (u * c + v * s) + self.phase).sin()
    }

    fn random<R: Rng + ?Sized>(rng: &mut R, freq: (f64, f64), amp: f64) -> Self {
        Self {
            freq: rng.random_range(freq.0..freq.1),
            angle: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..TAU),
            amp,
        }
    }
}

/// A small darkened or brightened disk in face-local units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub u: f64,
    pub v: f64,
    pub radius: f64,
    /// Multiplies the color underneath.
    pub tone: f64,
}

/// Shape, color, texture and pose of one synthetic identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    /// Face center in image coordinates, as a fraction of width/height.
    pub center: (f64, f64),
    /// Pixels per face unit, as a fraction of the image width.
    pub scale: f64,
    /// In-plane rotation in radians.
    pub tilt: f64,
    pub face_height: f64,
    pub eye_y: f64,
    pub eye_spacing: f64,
    pub eye_width: f64,
    pub eye_height: f64,
    pub brow_y: f64,
    pub brow_arch: f64,
    pub brow_thickness: f64,
    pub nose_tip_y: f64,
    pub nose_width: f64,
    pub mouth_y: f64,
    pub mouth_width: f64,
    pub lip_upper: f64,
    pub lip_lower: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub background: [f64; 3],
    pub skin_texture: Texture,
    pub brow_texture: Texture,
    pub iris_texture: Texture,
    pub nose_texture: Texture,
    pub lip_texture: Texture,
    /// Offset of the eye reflection from the pupil center, in iris radii.
    pub catchlight: Option<(f64, f64)>,
    pub spots: Vec<Spot>,
}

impl FaceParams {
    /// The symmetric reference face, centered, no tilt.
    pub fn canonical() -> Self {
        let flat = Texture {
            freq: 20.0,
            angle: 0.0,
            phase: 0.0,
            amp: 0.0,
        };
        Self {
            center: (0.5, 0.47),
            scale: 0.25,
            tilt: 0.0,
            face_height: 1.3,
            eye_y: -0.2,
            eye_spacing: 0.38,
            eye_width: 0.32,
            eye_height: 0.13,
            brow_y: -0.42,
            brow_arch: 0.06,
            brow_thickness: 0.05,
            nose_tip_y: 0.28,
            nose_width: 0.2,
            mouth_y: 0.62,
            mouth_width: 0.32,
            lip_upper: 0.08,
            lip_lower: 0.1,
            skin: [0.8, 0.62, 0.52],
            hair: [0.25, 0.18, 0.12],
            iris: [0.3, 0.45, 0.6],
            lips: [0.7, 0.35, 0.35],
            background: [0.55, 0.6, 0.65],
            skin_texture: flat,
            brow_texture: flat,
            iris_texture: flat,
            nose_texture: flat,
            lip_texture: flat,
            catchlight: None,
            spots: Vec::new(),
        }
    }

    /// Draws a random identity. `male` shifts a few shape ranges so that the
    /// two genders are distinguishable populations.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, male: bool) -> Self {
        let g = if male { 1.0 } else { 0.0 };
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let skin_tone = u(0.6, 0.8);
        let skin = [skin_tone, skin_tone * u(0.7, 0.82), skin_tone * u(0.55, 0.7)];
        let hair_tone = u(0.05, 0.6);
        let hair = [hair_tone, hair_tone * u(0.7, 0.9), hair_tone * u(0.5, 0.8)];
        let iris = [u(0.25, 0.4), u(0.3, 0.45), u(0.35, 0.5)];
        let lips = [u(0.65, 0.75), u(0.28, 0.36), u(0.3, 0.36)];
        let background = [u(0.3, 0.9), u(0.3, 0.9), u(0.3, 0.9)];
        let light = (u(0.0, TAU), u(0.3, 0.6));
        let catchlight = Some((light.1 * light.0.cos(), light.1 * light.0.sin()));
        let nose_tip_y = u(0.22, 0.32);
        let mouth_y = u(0.58, 0.66);
        let eye_y = u(-0.24, -0.16);
        let eye_spacing = u(0.34, 0.42);
        let mut spots = Vec::with_capacity(4);
        for side in [-1.0, 1.0] {
            spots.push(Spot {
                u: side * (eye_spacing + u(-0.12, 0.12)),
                v: eye_y + u(0.09, 0.13),
                radius: u(0.04, 0.055),
                tone: u(0.35, 0.55),
            });
        }
        spots.push(Spot {
            u: u(-0.12, 0.12),
            v: nose_tip_y + u(-0.02, 0.04),
            radius: u(0.04, 0.055),
            tone: u(0.35, 0.55),
        });
        spots.push(Spot {
            u: u(-0.18, 0.18),
            v: mouth_y + u(-0.05, 0.06),
            radius: u(0.04, 0.055),
            tone: u(0.35, 0.55),
        });
        let params = Self {
            center: (u(0.47, 0.53), u(0.45, 0.49)),
            scale: u(0.23, 0.26),
            tilt: u(-0.08, 0.08),
            face_height: u(1.22, 1.36) + 0.04 * g,
            eye_y,
            eye_spacing,
            eye_width: u(0.27, 0.34),
            eye_height: u(0.11, 0.15) - 0.01 * g,
            brow_y: u(-0.47, -0.4),
            brow_arch: u(0.03, 0.08),
            brow_thickness: u(0.035, 0.055) + 0.015 * g,
            nose_tip_y,
            nose_width: u(0.16, 0.22) + 0.02 * g,
            mouth_y,
            mouth_width: u(0.26, 0.34),
            lip_upper: u(0.06, 0.09) - 0.01 * g,
            lip_lower: u(0.08, 0.11) - 0.01 * g,
            skin,
            hair,
            iris,
            lips,
            background,
            skin_texture: Texture::random(rng, (14.0, 30.0), 0.04),
            brow_texture: Texture::random(rng, (30.0, 60.0), 0.08),
            iris_texture: Texture::random(rng, (3.0, 9.0), 0.25),
            nose_texture: Texture::random(rng, (25.0, 50.0), 0.07),
            lip_texture: Texture::random(rng, (25.0, 55.0), 0.1),
            catchlight,
            spots,
        };
        // brows must clear the eye tops
        let mut p = params;
        p.brow_y = p.brow_y.min(p.eye_y - p.eye_height / 2.0 - p.brow_arch - 0.08);
        p
    }

    /// Face-local landmark positions before posing.
    pub fn local_landmarks(&self) -> Vec<Point> {
        let mut pts = vec![Point::default(); NUM_LANDMARKS];
        let chin = 0.1 + self.face_height;
        let jaw_top = self.eye_y + 0.05;
        for (k, p) in pts.iter_mut().enumerate().take(17) {
            let phi = PI - k as f64 * PI / 16.0;
            *p = Point::new(0.97 * phi.cos(), jaw_top + (chin - jaw_top) * phi.sin());
        }
        let brow = |t: f64, side: f64| {
            let x = side * (0.72 - 0.58 * t);
            Point::new(x, self.brow_y - self.brow_arch * (PI * t).sin())
        };
        for k in 0..5 {
            let t = k as f64 / 4.0;
            pts[17 + k] = brow(t, -1.0);
            pts[26 - k] = brow(t, 1.0);
        }
        for k in 0..4 {
            let t = k as f64 / 3.0;
            pts[27 + k] = Point::new(0.0, self.eye_y + t * (self.nose_tip_y - self.eye_y));
        }
        let base_y = self.nose_tip_y + 0.05;
        for k in 0..5 {
            let t = k as f64 / 4.0 * 2.0 - 1.0;
            let x = t * self.nose_width;
            pts[31 + k] = Point::new(x, base_y - 0.04 * t * t);
        }
        let (es, ew, eh) = (self.eye_spacing, self.eye_width, self.eye_height);
        let eye = |side: f64| -> [Point; 6] {
            let cx = side * es;
            let y = self.eye_y;
            // order: outer, top-outer, top-inner, inner, bottom-inner, bottom-outer
            [
                Point::new(cx + side * ew / 2.0, y),
                Point::new(cx + side * ew / 6.0, y - eh / 2.0),
                Point::new(cx - side * ew / 6.0, y - eh / 2.0),
                Point::new(cx - side * ew / 2.0, y),
                Point::new(cx - side * ew / 6.0, y + eh / 2.0),
                Point::new(cx + side * ew / 6.0, y + eh / 2.0),
            ]
        };
        let right = eye(-1.0);
        pts[36..42].copy_from_slice(&right);
        let left = eye(1.0);
        // left eye runs inner -> top-inner -> top-outer -> outer -> bottom-outer -> bottom-inner
        pts[42] = left[3];
        pts[43] = left[2];
        pts[44] = left[1];
        pts[45] = left[0];
        pts[46] = left[5];
        pts[47] = left[4];
        let (mw, my) = (self.mouth_width, self.mouth_y);
        for k in 0..=6 {
            let a = PI * k as f64 / 6.0;
            pts[48 + k] = Point::new(-mw * a.cos(), my - self.lip_upper * a.sin());
        }
        for k in 7..12 {
            let a = PI * (k - 6) as f64 / 6.0;
            pts[48 + k] = Point::new(mw * a.cos(), my + self.lip_lower * a.sin());
        }
        let (imw, gap) = (0.7 * mw, 0.01);
        for k in 0..=4 {
            let a = PI * k as f64 / 4.0;
            pts[60 + k] = Point::new(-imw * a.cos(), my - gap * a.sin());
        }
        for k in 5..8 {
            let a = PI * (k - 4) as f64 / 4.0;
            pts[60 + k] = Point::new(imw * a.cos(), my + gap * a.sin());
        }
        pts
    }

    fn pose(&self, width: usize, height: usize) -> Pose {
        Pose {
            center: Point::new(self.center.0 * (width - 1) as f64, self.center.1 * (height - 1) as f64),
            scale: self.scale * width as f64,
            tilt: self.tilt,
        }
    }

    /// Landmarks in image coordinates.
    pub fn landmarks(&self, width: usize, height: usize) -> Vec<Point> {
        let pose = self.pose(width, height);
        self.local_landmarks().into_iter().map(|p| pose.to_image(p)).collect()
    }

    /// Renders the face and returns it with its landmarks.
    pub fn render(&self, width: usize, height: usize) -> (ImageBuffer, LandmarkSet) {
        let pose = self.pose(width, height);
        // one pixel in face units, for anti-aliased edges
        let px = 1.0 / pose.scale;
        let mut img = ImageBuffer::new(width, height, 3);
        let mut rgb = [0.0; 3];
        for y in 0..height {
            for x in 0..width {
                let p = pose.to_local(Point::new(x as f64, y as f64));
                self.shade(p.x, p.y, px, x as f64 / width as f64, &mut rgb);
                img.pixel_mut(x, y)
                    .iter_mut()
                    .zip(rgb)
                    .for_each(|(o, v)| *o = v.clamp(0.0, 1.0));
            }
        }
        let lm = LandmarkSet::new(self.landmarks(width, height), width, height)
            .expect("synthetic landmarks lie inside the image");
        (img, lm)
    }

    fn shade(&self, u: f64, v: f64, px: f64, gx: f64, out: &mut [f64; 3]) {
        let mut c = self.background.map(|b| b * (0.9 + 0.2 * gx));
        let face_cy = 0.1;
        let face_r = (u / 0.97).hypot((v - face_cy) / self.face_height);
        let face_w = coverage(1.0 - face_r, px);
        let skin_mod = 1.0 + self.skin_texture.eval(u, v);
        blend(&mut c, self.skin.map(|s| s * skin_mod), face_w);

        // hair cap over the top of the oval
        let hair_w = face_w * coverage(self.brow_y - 0.35 - v, px);
        blend(&mut c, self.hair, hair_w);

        // brows
        for side in [-1.0, 1.0] {
            let t = (0.72 - side * u) / 0.58;
            if (-0.1..=1.1).contains(&t) {
                let tc = t.clamp(0.0, 1.0);
                let by = self.brow_y - self.brow_arch * (PI * tc).sin();
                let taper = 1.0 - 0.4 * (2.0 * tc - 1.0).abs();
                let inside_len = coverage(0.5 - (t - 0.5).abs(), px / 0.58);
                let w = inside_len * coverage(self.brow_thickness * taper - (v - by).abs(), px);
                let tone = 1.0 + self.brow_texture.eval(u, v);
                blend(&mut c, self.hair.map(|h| 0.8 * h * tone), w);
            }
        }

        // eyes: sclera, textured iris, pupil
        for side in [-1.0, 1.0] {
            let (ex, ey) = (side * self.eye_spacing, self.eye_y);
            let (rx, ry) = (self.eye_width / 2.0, self.eye_height / 2.0);
            let er = ((u - ex) / rx).hypot((v - ey) / ry);
            let sclera = coverage((1.0 - er) * ry, px);
            blend(&mut c, [0.93, 0.92, 0.9], sclera);
            let d = (u - ex).hypot(v - ey);
            let iris_r = 0.9 * ry;
            let ang = (v - ey).atan2(u - ex);
            let stripes = 1.0
                + self.iris_texture.amp
                    * (self.iris_texture.freq.round() * ang + self.iris_texture.phase).sin()
                + 0.5 * self.iris_texture.eval(u - ex, v - ey);
            blend(&mut c, self.iris.map(|i| i * stripes), sclera * coverage(iris_r - d, px));
            blend(&mut c, [0.05, 0.05, 0.06], sclera * coverage(0.4 * iris_r - d, px));
            if let Some((ox, oy)) = self.catchlight {
                let dl = (u - ex - ox * iris_r).hypot(v - ey - oy * iris_r);
                blend(&mut c, [0.97, 0.97, 0.95], sclera * coverage(0.45 * iris_r - dl, px));
            }
        }

        // nose: textured bridge shading and dark nostrils
        let base_y = self.nose_tip_y + 0.05;
        let bridge = coverage(0.04 - u.abs(), px)
            * coverage(v - self.eye_y, px)
            * coverage(self.nose_tip_y - v, px);
        let nose_tone = 0.85 + self.nose_texture.eval(u, v);
        blend(&mut c, self.skin.map(|s| s * nose_tone), bridge);
        let wing = coverage(
            1.0 - (u / self.nose_width).hypot((v - base_y + 0.04) / 0.07),
            px / self.nose_width,
        );
        blend(&mut c, self.skin.map(|s| s * (0.92 + self.nose_texture.eval(v, u))), wing);
        for side in [-1.0, 1.0] {
            let nr = ((u - side * 0.45 * self.nose_width) / 0.05).hypot((v - base_y + 0.01) / 0.025);
            blend(&mut c, self.skin.map(|s| 0.3 * s), coverage((1.0 - nr) * 0.025, px));
        }

        // lips with texture and a dark mouth line
        let my = self.mouth_y;
        let lip_h = if v < my { self.lip_upper } else { self.lip_lower };
        let lr = (u / self.mouth_width).hypot((v - my) / lip_h);
        let lip_tone = 1.0 + self.lip_texture.eval(u, v);
        blend(
            &mut c,
            self.lips.map(|l| l * lip_tone),
            coverage((1.0 - lr) * lip_h, px),
        );
        let line = coverage(0.7 * self.mouth_width - u.abs(), px) * coverage(0.008 - (v - my).abs(), px);
        blend(&mut c, [0.2, 0.08, 0.08], line);

        for s in &self.spots {
            let w = face_w * coverage(s.radius - (u - s.u).hypot(v - s.v), px);
            let dark = c.map(|x| x * s.tone);
            blend(&mut c, dark, w);
        }

        *out = c;
    }
}

struct Pose {
    center: Point,
    scale: f64,
    tilt: f64,
}

impl Pose {
    fn to_image(&self, p: Point) -> Point {
        self.center + (p * self.scale).rotate_about(Point::default(), self.tilt)
    }

    fn to_local(&self, p: Point) -> Point {
        (p - self.center).rotate_about(Point::default(), -self.tilt) / self.scale
    }
}

/// Anti-aliased indicator of `signed_dist > 0` with a one-pixel ramp.
fn coverage(signed_dist: f64, px: f64) -> f64 {
    (signed_dist / px + 0.5).clamp(0.0, 1.0)
}

fn blend(c: &mut [f64; 3], top: [f64; 3], w: f64) {
    if w > 0.0 {
        for k in 0..3 {
            c[k] += (top[k] - c[k]) * w;
        }
    }
}

/// Landmarks of the canonical symmetric face on a `width × height` image.
pub fn frontal_landmarks(width: usize, height: usize) -> LandmarkSet {
    let mut p = FaceParams::canonical();
    p.center = (0.5, 0.47);
    LandmarkSet::new(p.landmarks(width, height), width, height)
        .expect("canonical landmarks fit the image")
}
