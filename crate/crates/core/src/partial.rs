//! Facial regions for partial morphs and their feathered composition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{Point, Rect};
use crate::imaging::ImageBuffer;
use crate::landmarks::LandmarkSet;

/// Box growth on every side, as a fraction of the landmark box diagonal;
/// at least the feather width.
pub const REGION_EXPANSION: f64 = 0.15;
/// Feather band width as a fraction of the image height.
pub const FEATHER_FRACTION: f64 = 0.03;

#[derive(Debug, Error)]
pub enum PartialError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("landmarks were placed on a {0:?} image but the images are {1:?}")]
    LandmarkDims((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionId {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl RegionId {
    pub const ALL: [RegionId; 4] = [RegionId::LeftEye, RegionId::RightEye, RegionId::Nose, RegionId::Mouth];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        ['L', 'R', 'N', 'M'][self.index()]
    }

    pub fn name(self) -> &'static str {
        ["left_eye", "right_eye", "nose", "mouth"][self.index()]
    }

    /// Landmarks that define the region. Eye regions include the brow.
    pub fn landmark_indices(self) -> Vec<usize> {
        match self {
            RegionId::LeftEye => (42..48).chain(22..27).collect(),
            RegionId::RightEye => (36..42).chain(17..22).collect(),
            RegionId::Nose => (30..36).collect(),
            RegionId::Mouth => (48..68).collect(),
        }
    }

    pub fn mirrored(self) -> RegionId {
        match self {
            RegionId::LeftEye => RegionId::RightEye,
            RegionId::RightEye => RegionId::LeftEye,
            other => other,
        }
    }
}

/// Set of regions as 4-bit flags, bit `i` for `RegionId::ALL[i]`. Written as
/// a four-character string over `LRNM` with `-` for absent regions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionSet(u8);

impl RegionSet {
    pub const EMPTY: RegionSet = RegionSet(0);
    pub const FULL: RegionSet = RegionSet(0b1111);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits <= 0b1111).then_some(RegionSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, r: RegionId) -> bool {
        self.0 & (1 << r.index()) != 0
    }

    pub fn with(self, r: RegionId) -> Self {
        RegionSet(self.0 | (1 << r.index()))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = RegionId> {
        RegionId::ALL.into_iter().filter(move |&r| self.contains(r))
    }

    /// Label vector with one entry per region in `RegionId::ALL` order.
    pub fn as_labels(self) -> [f64; 4] {
        RegionId::ALL.map(|r| if self.contains(r) { 1.0 } else { 0.0 })
    }

    pub fn mirrored(self) -> Self {
        self.iter().fold(RegionSet::EMPTY, |s, r| s.with(r.mirrored()))
    }
}

impl FromIterator<RegionId> for RegionSet {
    fn from_iter<T: IntoIterator<Item = RegionId>>(iter: T) -> Self {
        iter.into_iter().fold(RegionSet::EMPTY, RegionSet::with)
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in RegionId::ALL {
            write!(f, "{}", if self.contains(r) { r.letter() } else { '-' })?;
        }
        Ok(())
    }
}

impl FromStr for RegionSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 4 {
            return Err(format!("region set must have 4 characters, got {s:?}"));
        }
        let mut set = RegionSet::EMPTY;
        for (r, c) in RegionId::ALL.into_iter().zip(chars) {
            if c == r.letter() {
                set = set.with(r);
            } else if c != '-' {
                return Err(format!("bad region flag {c:?} in {s:?}"));
            }
        }
        Ok(set)
    }
}

impl Serialize for RegionSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RegionSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Feathered region rectangles of one face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRegions {
    pub rects: [Rect; 4],
    /// Per-region feather width: the nominal width, reduced when a cut
    /// against a neighbouring region leaves the landmarks less room.
    pub feathers: [f64; 4],
    width: usize,
    height: usize,
}

/// Separates two overlapping rectangles along one axis. The cut goes through
/// the middle of the gap between the landmark boxes when they are apart on
/// some axis (widest gap wins), else through the middle of the smaller
/// overlap.
fn separate(a: &Rect, b: &Rect, la: &Rect, lb: &Rect) -> Option<(usize, f64, bool)> {
    let ov = [a.x1.min(b.x1) - a.x0.max(b.x0), a.y1.min(b.y1) - a.y0.max(b.y0)];
    if ov[0] <= 0.0 || ov[1] <= 0.0 {
        return None;
    }
    let lo = |r: &Rect, ax: usize| if ax == 0 { r.x0 } else { r.y0 };
    let hi = |r: &Rect, ax: usize| if ax == 0 { r.x1 } else { r.y1 };
    let mut best: Option<(usize, f64, bool, f64)> = None;
    for ax in 0..2 {
        let (gap, a_first) = if hi(la, ax) <= lo(lb, ax) {
            (lo(lb, ax) - hi(la, ax), true)
        } else if hi(lb, ax) <= lo(la, ax) {
            (lo(la, ax) - hi(lb, ax), false)
        } else {
            continue;
        };
        if best.is_none_or(|b| gap > b.3) {
            let cut = if a_first {
                0.5 * (hi(la, ax) + lo(lb, ax))
            } else {
                0.5 * (hi(lb, ax) + lo(la, ax))
            };
            best = Some((ax, cut, a_first, gap));
        }
    }
    if let Some((ax, cut, a_first, _)) = best {
        return Some((ax, cut, a_first));
    }
    let ax = if ov[0] <= ov[1] { 0 } else { 1 };
    let mid = 0.5 * (lo(a, ax).max(lo(b, ax)) + hi(a, ax).min(hi(b, ax)));
    let a_first = lo(a, ax) + hi(a, ax) <= lo(b, ax) + hi(b, ax);
    Some((ax, mid, a_first))
}

impl FaceRegions {
    pub fn new(lm: &LandmarkSet) -> Self {
        let (w, h) = lm.image_dims();
        Self::from_points(lm.points(), w, h)
    }

    /// Regions from raw landmark positions on a `width x height` image; the
    /// points need not lie inside it.
    pub fn from_points(points: &[Point], width: usize, height: usize) -> Self {
        let tight: [Rect; 4] = RegionId::ALL.map(|r| {
            let pts: Vec<Point> = r.landmark_indices().into_iter().map(|i| points[i]).collect();
            Rect::bounding(&pts)
        });
        let feather = FEATHER_FRACTION * height as f64;
        // never narrower than the feather, so landmarks keep full weight
        let grown = tight.map(|r| r.expanded((REGION_EXPANSION * r.diagonal()).max(feather)));
        let mut rects = grown;
        for i in 0..4 {
            for j in i + 1..4 {
                let Some((ax, cut, i_first)) = separate(&grown[i], &grown[j], &tight[i], &tight[j]) else {
                    continue;
                };
                let (first, second) = if i_first { (i, j) } else { (j, i) };
                if ax == 0 {
                    rects[first].x1 = rects[first].x1.min(cut);
                    rects[second].x0 = rects[second].x0.max(cut);
                } else {
                    rects[first].y1 = rects[first].y1.min(cut);
                    rects[second].y0 = rects[second].y0.max(cut);
                }
            }
        }
        let mut feathers = [feather; 4];
        for (k, r) in RegionId::ALL.into_iter().enumerate() {
            let room = r
                .landmark_indices()
                .into_iter()
                .map(|i| rects[k].rounded_inner_distance(points[i], 0.0))
                .fold(f64::INFINITY, f64::min);
            feathers[k] = feather.min(room).max(0.0);
        }
        Self {
            rects,
            feathers,
            width,
            height,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn rect(&self, region: RegionId) -> Rect {
        self.rects[region.index()]
    }

    /// Mask weight in `[0, 1]`: zero outside the rounded rectangle, rising
    /// linearly to one across the feather band.
    pub fn weight(&self, region: RegionId, p: Point) -> f64 {
        let feather = self.feathers[region.index()];
        let d = self.rect(region).rounded_inner_distance(p, feather);
        if feather > 0.0 {
            // absorb rounding for points exactly one feather width inside
            let t = d / feather;
            if t >= 1.0 - 1e-9 {
                1.0
            } else {
                t.max(0.0)
            }
        } else if d >= 0.0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn mask(&self, region: RegionId) -> RegionMask {
        let mut weights = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                weights.push(self.weight(region, Point::new(x as f64, y as f64)));
            }
        }
        RegionMask {
            region,
            width: self.width,
            height: self.height,
            weights,
        }
    }

    /// Per-pixel sum of the masks of `set`.
    pub fn union_weights(&self, set: RegionSet) -> Vec<f64> {
        let mut total = vec![0.0; self.width * self.height];
        for r in set.iter() {
            for (t, m) in total.iter_mut().zip(self.mask(r).weights) {
                *t += m;
            }
        }
        total
    }
}

/// Feathered per-pixel weights of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub region: RegionId,
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl RegionMask {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    /// Hard version: weight of at least one half.
    pub fn is_inside(&self, x: usize, y: usize) -> bool {
        self.get(x, y) >= 0.5
    }
}

pub fn region_mask(region: RegionId, lm: &LandmarkSet) -> RegionMask {
    FaceRegions::new(lm).mask(region)
}

/// `sum_r m_r * morph + (1 - sum_r m_r) * original` over the regions of `set`.
pub fn compose_partial(
    morph: &ImageBuffer,
    aligned_original: &ImageBuffer,
    lm_target: &LandmarkSet,
    set: RegionSet,
) -> Result<ImageBuffer, PartialError> {
    if morph.dims() != aligned_original.dims() {
        return Err(PartialError::DimensionMismatch(morph.dims(), aligned_original.dims()));
    }
    let dims = (morph.width(), morph.height());
    if lm_target.image_dims() != dims {
        return Err(PartialError::LandmarkDims(lm_target.image_dims(), dims));
    }
    if set.is_empty() || morph == aligned_original {
        return Ok(aligned_original.clone());
    }
    let weights = FaceRegions::new(lm_target).union_weights(set);
    let ch = morph.channels();
    let mut out = aligned_original.clone();
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for c in 0..ch {
            let i = k * ch + c;
            out.data_mut()[i] = if w >= 1.0 {
                morph.data()[i]
            } else {
                w * morph.data()[i] + (1.0 - w) * aligned_original.data()[i]
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{frontal_landmarks, FaceParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn region_set_text_round_trip() {
        for bits in 0..16u8 {
            let s = RegionSet::from_bits(bits).unwrap();
            assert_eq!(s.to_string().parse::<RegionSet>().unwrap(), s);
            assert_eq!(s.len(), bits.count_ones() as usize);
        }
        assert_eq!(RegionSet::FULL.to_string(), "LRNM");
        assert_eq!("L-N-".parse::<RegionSet>().unwrap().bits(), 0b0101);
        assert!("LRN".parse::<RegionSet>().is_err());
        assert!("XRNM".parse::<RegionSet>().is_err());
        assert!(RegionSet::from_bits(16).is_none());
    }

    #[test]
    fn masks_cover_their_landmarks_and_exclude_others() {
        for size in [64, 128, 224] {
            let lm = frontal_landmarks(size, size);
            let regions = FaceRegions::new(&lm);
            for r in RegionId::ALL {
                for i in r.landmark_indices() {
                    assert_eq!(regions.weight(r, lm.point(i)), 1.0, "{r:?} landmark {i} at {size}");
                }
            }
            for eye in [lm.left_eye_center(), lm.right_eye_center()] {
                assert_eq!(regions.weight(RegionId::Mouth, eye), 0.0);
            }
        }
    }

    #[test]
    fn masks_are_disjoint_on_random_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let male = rng.random();
            let (_, lm) = FaceParams::random(&mut rng, male).render(64, 64);
            let regions = FaceRegions::new(&lm);
            let masks: Vec<RegionMask> = RegionId::ALL.iter().map(|&r| regions.mask(r)).collect();
            for y in 0..64 {
                for x in 0..64 {
                    let inside = masks.iter().filter(|m| m.is_inside(x, y)).count();
                    assert!(inside <= 1);
                    let sum: f64 = masks.iter().map(|m| m.get(x, y)).sum();
                    assert!(sum <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn mirroring_swaps_eye_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (_, lm) = FaceParams::random(&mut rng, false).render(80, 80);
        let mirrored = lm.mirrored();
        let a = FaceRegions::new(&lm);
        let b = FaceRegions::new(&mirrored);
        for r in RegionId::ALL {
            let ma = a.mask(r);
            let mb = b.mask(r.mirrored());
            for y in 0..80 {
                for x in 0..80 {
                    assert!((ma.get(x, y) - mb.get(79 - x, y)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn compose_partial_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (orig, lm) = FaceParams::random(&mut rng, true).render(64, 64);
        let morph = ImageBuffer::from_fn(64, 64, 3, |_, _, _| rng.random());
        assert_eq!(compose_partial(&morph, &orig, &lm, RegionSet::EMPTY).unwrap(), orig);
        assert_eq!(compose_partial(&orig, &orig, &lm, RegionSet::FULL).unwrap(), orig);

        let nose = RegionSet::EMPTY.with(RegionId::Nose);
        let out = compose_partial(&morph, &orig, &lm, nose).unwrap();
        let regions = FaceRegions::new(&lm);
        let nose_mask = regions.mask(RegionId::Nose);
        let all = regions.union_weights(RegionSet::FULL);
        for y in 0..64 {
            for x in 0..64 {
                if nose_mask.get(x, y) == 1.0 {
                    assert_eq!(out.pixel(x, y), morph.pixel(x, y));
                }
                if all[y * 64 + x] == 0.0 {
                    assert_eq!(out.pixel(x, y), orig.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn adding_a_region_changes_only_its_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (orig, lm) = FaceParams::random(&mut rng, false).render(64, 64);
        let morph = orig.map(|v| 1.0 - v);
        let base = RegionSet::EMPTY.with(RegionId::LeftEye);
        let a = compose_partial(&morph, &orig, &lm, base).unwrap();
        let b = compose_partial(&morph, &orig, &lm, base.with(RegionId::Mouth)).unwrap();
        let mouth = region_mask(RegionId::Mouth, &lm);
        for y in 0..64 {
            for x in 0..64 {
                if mouth.get(x, y) == 0.0 {
                    assert_eq!(a.pixel(x, y), b.pixel(x, y));
                }
            }
        }
    }
}
