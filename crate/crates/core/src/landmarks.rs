//! 68-point facial landmarks: parsing, the extended point set used by the
//! triangle warp, and the fixed line pattern used by field morphing.
//!
//! Indices follow the common 68-point annotation (0-based):
//!
//! | range   | feature                          |
//! |---------|----------------------------------|
//! | 0–16    | jaw contour, subject's right to left |
//! | 17–21   | right eyebrow                    |
//! | 22–26   | left eyebrow                     |
//! | 27–30   | nose bridge                      |
//! | 31–35   | nose base                        |
//! | 36–41   | right eye                        |
//! | 42–47   | left eye                         |
//! | 48–59   | outer lip                        |
//! | 60–67   | inner lip                        |
//!
//! "Left" and "right" are from the subject's point of view, so the right eye
//! appears on the left side of a frontal image.
//!
//! The extra points (cheeks, forehead, mouth–chin) and the line pattern are a
//! fixed convention chosen here; they are not taken from any reference layout.

use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{centroid, Point};

pub const NUM_LANDMARKS: usize = 68;

pub const JAW: Range<usize> = 0..17;
pub const RIGHT_BROW: Range<usize> = 17..22;
pub const LEFT_BROW: Range<usize> = 22..27;
pub const NOSE_BRIDGE: Range<usize> = 27..31;
pub const NOSE_BASE: Range<usize> = 31..36;
pub const RIGHT_EYE: Range<usize> = 36..42;
pub const LEFT_EYE: Range<usize> = 42..48;
pub const OUTER_LIP: Range<usize> = 48..60;
pub const INNER_LIP: Range<usize> = 60..68;

pub const CHIN_TIP: usize = 8;
pub const RIGHT_EYE_OUTER: usize = 36;
pub const LEFT_EYE_OUTER: usize = 45;
pub const RIGHT_MOUTH_CORNER: usize = 48;
pub const LEFT_MOUTH_CORNER: usize = 54;
pub const LOWER_LIP_BOTTOM: usize = 57;
pub const RIGHT_BROW_TOP: usize = 19;
pub const LEFT_BROW_TOP: usize = 24;
/// Upper and lower inner-lip centers; fused into one point in the extended set.
pub const INNER_LIP_TOP: usize = 62;
pub const INNER_LIP_BOTTOM: usize = 66;

/// Number of points in an [`ExtendedLandmarkSet`]: 68 − 1 fused + 15 extras.
pub const NUM_EXTENDED: usize = NUM_LANDMARKS - 1 + 15;

/// Number of segments produced by [`build_line_pattern`].
pub const LINE_PATTERN_LEN: usize = 55;

const FOREHEAD_RAISE: f64 = 0.6;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("expected {NUM_LANDMARKS} landmarks, found {0}")]
    WrongPointCount(usize),
    #[error("landmark {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("cannot read landmark file {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("eye centroids coincide")]
    CoincidentEyes,
    #[error("degenerate segment between landmarks {0} and {1}")]
    DegenerateSegment(usize, usize),
    #[error("point sets differ in size: {0} vs {1}")]
    CardinalityMismatch(usize, usize),
}

/// 68 landmark positions together with the dimensions of their image.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
    image_width: usize,
    image_height: usize,
}

impl LandmarkSet {
    /// Validates count, bounds (`0 <= x < width`, `0 <= y < height`) and
    /// distinct eye centroids.
    pub fn new(points: Vec<Point>, image_width: usize, image_height: usize) -> Result<Self, LandmarkError> {
        if points.len() != NUM_LANDMARKS {
            return Err(LandmarkError::WrongPointCount(points.len()));
        }
        for (index, p) in points.iter().enumerate() {
            let inside = p.x >= 0.0
                && p.y >= 0.0
                && p.x < image_width as f64
                && p.y < image_height as f64;
            if !inside {
                return Err(LandmarkError::PointOutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width: image_width,
                    height: image_height,
                });
            }
        }
        let set = Self {
            points,
            image_width,
            image_height,
        };
        if set.right_eye_center() == set.left_eye_center() {
            return Err(LandmarkError::CoincidentEyes);
        }
        Ok(set)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Point {
        self.points[index]
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }

    pub fn right_eye_center(&self) -> Point {
        centroid(&self.points[RIGHT_EYE])
    }

    pub fn left_eye_center(&self) -> Point {
        centroid(&self.points[LEFT_EYE])
    }

    /// Distance between the two eye centroids.
    pub fn inter_ocular_distance(&self) -> f64 {
        self.right_eye_center().distance(self.left_eye_center())
    }

    pub fn mouth_center(&self) -> Point {
        centroid(&self.points[OUTER_LIP])
    }

    /// Point-wise mean of two sets on the same image size.
    pub fn average(a: &LandmarkSet, b: &LandmarkSet) -> Result<LandmarkSet, LandmarkError> {
        let points = average_landmarks(&a.points, &b.points)?;
        LandmarkSet::new(points, a.image_width, a.image_height)
    }

    /// Horizontal mirror image: positions reflected about the vertical center
    /// line and indices permuted so that anatomy labels stay correct.
    pub fn mirrored(&self) -> LandmarkSet {
        let w = (self.image_width - 1) as f64;
        let points = (0..NUM_LANDMARKS)
            .map(|i| {
                let p = self.points[mirror_index(i)];
                Point::new(w - p.x, p.y)
            })
            .collect();
        LandmarkSet {
            points,
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }

    /// Serializes in the plain-text landmark format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            s.push_str(&format!("{} {}\n", p.x, p.y));
        }
        s
    }
}

/// Index of the anatomically mirrored landmark.
pub fn mirror_index(i: usize) -> usize {
    match i {
        0..=16 => 16 - i,
        17..=26 => 43 - i,
        27..=30 => i,
        31..=35 => 66 - i,
        // eyes: 36<->45, 37<->44, 38<->43, 39<->42, 40<->47, 41<->46
        36..=39 => 81 - i,
        40 | 41 => 87 - i,
        42..=45 => 81 - i,
        46 | 47 => 87 - i,
        // outer lip: 48<->54, 49<->53, 50<->52, 51, 55<->59, 56<->58, 57
        48..=54 => 102 - i,
        55..=59 => 114 - i,
        // inner lip: 60<->64, 61<->63, 62, 65<->67, 66
        60..=64 => 124 - i,
        65..=67 => 132 - i,
        _ => panic!("landmark index {i} out of range"),
    }
}

/// Parses the plain-text landmark format: one `x y` pair per line (whitespace
/// or comma separated), blank lines and `#` comments ignored.
pub fn parse_landmarks_str(
    text: &str,
    image_width: usize,
    image_height: usize,
) -> Result<LandmarkSet, LandmarkError> {
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 2 {
            return Err(LandmarkError::ParseError {
                line: n + 1,
                reason: format!("expected two coordinates, found {}", fields.len()),
            });
        }
        let parse = |f: &str| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| LandmarkError::ParseError {
                    line: n + 1,
                    reason: format!("invalid coordinate {f:?}"),
                })
        };
        points.push(Point::new(parse(fields[0])?, parse(fields[1])?));
    }
    LandmarkSet::new(points, image_width, image_height)
}

pub fn parse_landmarks(
    path: impl AsRef<Path>,
    image_dims: (usize, usize),
) -> Result<LandmarkSet, LandmarkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LandmarkError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_landmarks_str(&text, image_dims.0, image_dims.1)
}

/// Element-wise mean of two equally long point lists.
pub fn average_landmarks(a: &[Point], b: &[Point]) -> Result<Vec<Point>, LandmarkError> {
    if a.len() != b.len() {
        return Err(LandmarkError::CardinalityMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&p, &q)| p.midpoint(q)).collect())
}

/// Names of the 15 points added by [`extend_landmarks`], in storage order.
pub const EXTRA_NAMES: [&str; 15] = [
    "corner_top_left",
    "corner_top_right",
    "corner_bottom_left",
    "corner_bottom_right",
    "edge_top",
    "edge_right",
    "edge_bottom",
    "edge_left",
    "right_eye_center",
    "left_eye_center",
    "right_cheek",
    "left_cheek",
    "mouth_chin",
    "right_forehead",
    "left_forehead",
];

/// Base landmarks with the inner-lip centers fused plus 15 added points.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedLandmarkSet {
    pub base: LandmarkSet,
    /// Midpoint of the two inner-lip center points.
    pub fused_lip_center: Point,
    /// The added points in [`EXTRA_NAMES`] order.
    pub extras: [Point; 15],
}

impl ExtendedLandmarkSet {
    /// All [`NUM_EXTENDED`] points: base points in index order with the fused
    /// lip point at position 62 and index 66 removed, followed by the extras.
    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(NUM_EXTENDED);
        for (i, &p) in self.base.points().iter().enumerate() {
            match i {
                INNER_LIP_TOP => out.push(self.fused_lip_center),
                INNER_LIP_BOTTOM => {}
                _ => out.push(p),
            }
        }
        out.extend_from_slice(&self.extras);
        out
    }

    pub fn extra(&self, name: &str) -> Option<Point> {
        EXTRA_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.extras[i])
    }
}

/// Adds border, eye-center, cheek, mouth–chin and forehead points and fuses
/// the inner-lip centers.
///
/// * border: the four image corners and the four edge midpoints;
/// * eye centers: centroid of each eye contour;
/// * cheeks: midpoint between the outer eye corner and the jaw contour at the
///   height of the mouth corner on the same side;
/// * mouth–chin: midpoint of the lower-lip bottom and the chin tip;
/// * forehead: the top eyebrow point raised by `0.6 ×` inter-ocular distance.
///
/// Added face points are clamped one pixel inside the image so they never
/// coincide with or lie outside the border points.
pub fn extend_landmarks(lm: &LandmarkSet) -> ExtendedLandmarkSet {
    let (w, h) = lm.image_dims();
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let inside = |p: Point| {
        Point::new(
            p.x.clamp(1.0_f64.min(xmax), (xmax - 1.0).max(0.0)),
            p.y.clamp(1.0_f64.min(ymax), (ymax - 1.0).max(0.0)),
        )
    };
    let pts = lm.points();
    let iod = lm.inter_ocular_distance();

    let right_cheek = pts[RIGHT_EYE_OUTER].midpoint(jaw_at_height(
        &pts[0..=CHIN_TIP],
        pts[RIGHT_MOUTH_CORNER].y,
    ));
    let left_cheek = pts[LEFT_EYE_OUTER].midpoint(jaw_at_height(
        &pts[CHIN_TIP..JAW.end],
        pts[LEFT_MOUTH_CORNER].y,
    ));
    let raise = Point::new(0.0, -FOREHEAD_RAISE * iod);

    let extras = [
        Point::new(0.0, 0.0),
        Point::new(xmax, 0.0),
        Point::new(0.0, ymax),
        Point::new(xmax, ymax),
        Point::new(0.5 * xmax, 0.0),
        Point::new(xmax, 0.5 * ymax),
        Point::new(0.5 * xmax, ymax),
        Point::new(0.0, 0.5 * ymax),
        inside(lm.right_eye_center()),
        inside(lm.left_eye_center()),
        inside(right_cheek),
        inside(left_cheek),
        inside(pts[LOWER_LIP_BOTTOM].midpoint(pts[CHIN_TIP])),
        inside(pts[RIGHT_BROW_TOP] + raise),
        inside(pts[LEFT_BROW_TOP] + raise),
    ];
    ExtendedLandmarkSet {
        base: lm.clone(),
        fused_lip_center: pts[INNER_LIP_TOP].midpoint(pts[INNER_LIP_BOTTOM]),
        extras,
    }
}

/// Intersection of the jaw polyline with the horizontal line `y`, or the
/// vertically closest jaw point when the line misses the polyline.
fn jaw_at_height(jaw: &[Point], y: f64) -> Point {
    for w in jaw.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (lo, hi) = if a.y <= b.y { (a.y, b.y) } else { (b.y, a.y) };
        if y >= lo && y <= hi {
            if hi == lo {
                return a.midpoint(b);
            }
            return a.lerp(b, (y - a.y) / (b.y - a.y));
        }
    }
    *jaw
        .iter()
        .min_by(|p, q| (p.y - y).abs().total_cmp(&(q.y - y).abs()))
        .expect("jaw polyline is non-empty")
}

/// Index pairs of the fixed field-morphing line pattern.
///
/// Chin contour (16), each eyebrow (4 + 4), each eye as a closed contour
/// (6 + 6), nose bridge (3), nose base (4) and the closed outer lip (12).
pub fn line_pattern_indices() -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(LINE_PATTERN_LEN);
    let open = |r: Range<usize>, out: &mut Vec<(usize, usize)>| {
        for i in r.start..r.end - 1 {
            out.push((i, i + 1));
        }
    };
    let closed = |r: Range<usize>, out: &mut Vec<(usize, usize)>| {
        for i in r.clone() {
            let j = if i + 1 == r.end { r.start } else { i + 1 };
            out.push((i, j));
        }
    };
    open(JAW, &mut out);
    open(RIGHT_BROW, &mut out);
    open(LEFT_BROW, &mut out);
    closed(RIGHT_EYE, &mut out);
    closed(LEFT_EYE, &mut out);
    open(NOSE_BRIDGE, &mut out);
    open(NOSE_BASE, &mut out);
    closed(OUTER_LIP, &mut out);
    debug_assert_eq!(out.len(), LINE_PATTERN_LEN);
    out
}

/// A directed segment between two points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: Point,
    pub end: Point,
}

/// Instantiates the line pattern on one landmark set.
pub fn build_line_pattern(lm: &LandmarkSet) -> Result<Vec<Segment>, LandmarkError> {
    line_pattern_indices()
        .into_iter()
        .map(|(i, j)| {
            let (start, end) = (lm.point(i), lm.point(j));
            if start == end {
                Err(LandmarkError::DegenerateSegment(i, j))
            } else {
                Ok(Segment { start, end })
            }
        })
        .collect()
}

/// Corresponding segments in the source image and the target geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegmentPair {
    pub src_start: Point,
    pub src_end: Point,
    pub dst_start: Point,
    pub dst_end: Point,
}

impl LineSegmentPair {
    /// Returns `None` if either segment has zero length.
    pub fn new(src_start: Point, src_end: Point, dst_start: Point, dst_end: Point) -> Option<Self> {
        let ok = |a: Point, b: Point| (b - a).norm() > 0.0;
        (ok(src_start, src_end) && ok(dst_start, dst_end)).then_some(Self {
            src_start,
            src_end,
            dst_start,
            dst_end,
        })
    }

    /// Unit normal of the source segment.
    pub fn src_normal(&self) -> Point {
        let d = self.src_end - self.src_start;
        d.perp() / d.norm()
    }

    /// Unit normal of the target segment.
    pub fn dst_normal(&self) -> Point {
        let d = self.dst_end - self.dst_start;
        d.perp() / d.norm()
    }
}

/// Pairs the line pattern of the source landmarks with that of the target.
pub fn line_pairs(src: &LandmarkSet, dst: &LandmarkSet) -> Result<Vec<LineSegmentPair>, LandmarkError> {
    let s = build_line_pattern(src)?;
    let d = build_line_pattern(dst)?;
    Ok(s.iter()
        .zip(&d)
        .map(|(a, b)| LineSegmentPair {
            src_start: a.start,
            src_end: a.end,
            dst_start: b.start,
            dst_end: b.end,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::frontal_landmarks;

    fn assert_close(a: Point, b: Point, tol: f64) {
        assert!(a.distance(b) <= tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn mirror_index_is_an_involution() {
        for i in 0..NUM_LANDMARKS {
            assert_eq!(mirror_index(mirror_index(i)), i, "index {i}");
        }
        assert_eq!(mirror_index(36), 45);
        assert_eq!(mirror_index(40), 47);
        assert_eq!(mirror_index(48), 54);
        assert_eq!(mirror_index(62), 62);
        assert_eq!(mirror_index(65), 67);
    }

    #[test]
    fn parse_round_trip_and_comments() {
        let lm = frontal_landmarks(100, 100);
        let text = format!("# header\n\n{}", lm.to_text());
        let parsed = parse_landmarks_str(&text, 100, 100).unwrap();
        assert_eq!(parsed, lm);
    }

    #[test]
    fn parse_errors() {
        let lm = frontal_landmarks(100, 100);
        let short: String = lm.to_text().lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            parse_landmarks_str(&short, 100, 100),
            Err(LandmarkError::WrongPointCount(67))
        ));
        let bad = lm.to_text().replacen(&format!("{} {}", lm.point(0).x, lm.point(0).y), "-3 10", 1);
        assert!(matches!(
            parse_landmarks_str(&bad, 100, 100),
            Err(LandmarkError::PointOutOfBounds { index: 0, .. })
        ));
        assert!(matches!(
            parse_landmarks_str("1 2 3\n", 100, 100),
            Err(LandmarkError::ParseError { line: 1, .. })
        ));
        assert!(matches!(
            parse_landmarks_str("1 abc\n", 100, 100),
            Err(LandmarkError::ParseError { .. })
        ));
    }

    #[test]
    fn extended_set_has_82_points_and_border() {
        let lm = frontal_landmarks(100, 100);
        let ext = extend_landmarks(&lm);
        let pts = ext.points();
        assert_eq!(pts.len(), 82);
        assert_eq!(NUM_EXTENDED, 82);
        for corner in [(0.0, 0.0), (99.0, 0.0), (0.0, 99.0), (99.0, 99.0), (49.5, 0.0), (99.0, 49.5), (49.5, 99.0), (0.0, 49.5)] {
            assert!(pts.contains(&Point::from(corner)), "missing border point {corner:?}");
        }
        assert_eq!(
            pts[INNER_LIP_TOP],
            lm.point(INNER_LIP_TOP).midpoint(lm.point(INNER_LIP_BOTTOM))
        );
        assert_eq!(ext.extra("right_eye_center"), Some(lm.right_eye_center()));
    }

    #[test]
    fn extended_set_is_mirror_symmetric() {
        let lm = frontal_landmarks(120, 120);
        // the synthetic frontal face is exactly symmetric
        let mirror = lm.mirrored();
        for i in 0..NUM_LANDMARKS {
            assert_close(mirror.point(i), lm.point(i), 1e-9);
        }
        let ext = extend_landmarks(&lm);
        let w = 119.0;
        let mirror_pt = |p: Point| Point::new(w - p.x, p.y);
        for (a, b) in [
            ("right_eye_center", "left_eye_center"),
            ("right_cheek", "left_cheek"),
            ("right_forehead", "left_forehead"),
        ] {
            assert_close(mirror_pt(ext.extra(a).unwrap()), ext.extra(b).unwrap(), 1e-9);
        }
        let mc = ext.extra("mouth_chin").unwrap();
        assert!((mc.x - 59.5).abs() < 1e-9);
    }

    #[test]
    fn line_pattern_has_55_positive_segments() {
        let lm = frontal_landmarks(100, 100);
        let segs = build_line_pattern(&lm).unwrap();
        assert_eq!(segs.len(), 55);
        assert!(segs.iter().all(|s| s.start.distance(s.end) > 0.0));
    }

    #[test]
    fn line_pattern_mirrors() {
        let lm = frontal_landmarks(100, 100);
        let mut shifted = lm.points().to_vec();
        // break the symmetry so the mirror is a genuinely different face
        shifted[19].y -= 2.0;
        shifted[50].x += 1.5;
        let lm = LandmarkSet::new(shifted, 100, 100).unwrap();
        let segs = build_line_pattern(&lm).unwrap();
        let mirrored = build_line_pattern(&lm.mirrored()).unwrap();
        let reflect = |p: Point| Point::new(99.0 - p.x, p.y);
        let key = |a: Point, b: Point| {
            let (a, b) = if (a.x, a.y) < (b.x, b.y) { (a, b) } else { (b, a) };
            [a.x, a.y, b.x, b.y].map(|v| (v * 1e6).round() as i64)
        };
        let mut expect: Vec<_> = segs.iter().map(|s| key(reflect(s.start), reflect(s.end))).collect();
        let mut got: Vec<_> = mirrored.iter().map(|s| key(s.start, s.end)).collect();
        expect.sort();
        got.sort();
        assert_eq!(expect, got);
    }

    #[test]
    fn coincident_chin_points_are_degenerate() {
        let lm = frontal_landmarks(100, 100);
        let mut pts = lm.points().to_vec();
        pts[4] = pts[3];
        let lm = LandmarkSet::new(pts, 100, 100).unwrap();
        assert!(matches!(
            build_line_pattern(&lm),
            Err(LandmarkError::DegenerateSegment(3, 4))
        ));
    }

    #[test]
    fn averaging() {
        let a = vec![Point::new(0.0, 0.0), Point::new(3.0, 1.0)];
        let b = vec![Point::new(10.0, 20.0), Point::new(3.0, 1.0)];
        assert_eq!(average_landmarks(&a, &b).unwrap(), vec![Point::new(5.0, 10.0), Point::new(3.0, 1.0)]);
        assert_eq!(average_landmarks(&a, &a).unwrap(), a);
        assert!(matches!(
            average_landmarks(&a, &b[..1]),
            Err(LandmarkError::CardinalityMismatch(2, 1))
        ));
    }

    #[test]
    fn pair_normals_are_unit() {
        let p = LineSegmentPair::new(
            Point::new(0.0, 0.0),
            Point::new(3.0, 4.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 5.0),
        )
        .unwrap();
        assert!((p.src_normal().norm() - 1.0).abs() < 1e-15);
        assert_eq!(p.dst_normal(), Point::new(-1.0, 0.0));
        assert!(LineSegmentPair::new(Point::default(), Point::default(), Point::default(), Point::new(1.0, 0.0)).is_none());
    }

    proptest::proptest! {
        #[test]
        fn average_is_symmetric(coords in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..40),
                                shift in (-20.0f64..20.0, -20.0f64..20.0)) {
            let a: Vec<Point> = coords.iter().map(|&c| Point::from(c)).collect();
            let b: Vec<Point> = a.iter().map(|&p| p + Point::from(shift)).collect();
            proptest::prop_assert_eq!(average_landmarks(&a, &b).unwrap(), average_landmarks(&b, &a).unwrap());
        }
    }
}
