//! Image alignment backends: Delaunay triangle warping and line-segment
//! field morphing. Both use backward mapping: every output pixel looks up
//! its source position and samples the input bilinearly.

use robust::{incircle, orient2d, Coord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{distance_to_segment, signed_area2, Point};
use crate::imaging::ImageBuffer;
use crate::landmarks::{extend_landmarks, line_pairs, LandmarkError, LandmarkSet, LineSegmentPair};

/// Triangles with at most this area (px²) are treated as degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("triangulation needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("all points are collinear")]
    AllCollinear,
    #[error("points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("non-finite point at index {0}")]
    NonFinitePoint(usize),
    #[error("source triangle is degenerate")]
    DegenerateSourceTriangle,
    #[error("output pixel ({x}, {y}) is not covered by any triangle")]
    CoverageGap { x: usize, y: usize },
    #[error("mesh has {mesh} vertices but point list has {points}")]
    PointCountMismatch { mesh: usize, points: usize },
    #[error("field morphing needs at least one segment pair")]
    NoSegments,
    #[error("segment pair {0} has a zero-length segment")]
    DegenerateSegment(usize),
    #[error("field morph epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("input images differ in size: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
}

/// Which alignment backend to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMethod {
    Triangle,
    Field,
}

impl std::fmt::Display for WarpMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WarpMethod::Triangle => "triangle",
            WarpMethod::Field => "field",
        })
    }
}

impl std::str::FromStr for WarpMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "triangle" => Ok(WarpMethod::Triangle),
            "field" => Ok(WarpMethod::Field),
            other => Err(format!("unknown warp method {other:?}")),
        }
    }
}

/// Vertices plus counter-clockwise (in the `orient2d > 0` sense) index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn triangle(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }
}

const GHOST: usize = usize::MAX;

fn coord(p: Point) -> Coord<f64> {
    Coord { x: p.x, y: p.y }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    orient2d(coord(a), coord(b), coord(c))
}

/// Delaunay triangulation by incremental Bowyer–Watson insertion.
///
/// The unbounded exterior is represented by ghost triangles sharing a vertex
/// at infinity, so no bounding super-triangle is needed and hull edges come out
/// exact. Points are inserted in lexicographic `(x, y)` order and the
/// circumcircle test is strict, which fixes the result for co-circular input.
pub fn delaunay(points: &[Point]) -> Result<TriangleMesh, WarpError> {
    if points.len() < 3 {
        return Err(WarpError::TooFewPoints(points.len()));
    }
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(WarpError::NonFinitePoint(i));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .x
            .total_cmp(&points[b].x)
            .then(points[a].y.total_cmp(&points[b].y))
            .then(a.cmp(&b))
    });
    for w in order.windows(2) {
        if points[w[0]] == points[w[1]] {
            return Err(WarpError::DuplicatePoint(w[0].min(w[1]), w[0].max(w[1])));
        }
    }

    let (a, b) = (order[0], order[1]);
    let k = order[2..]
        .iter()
        .position(|&c| orient(points[a], points[b], points[c]) != 0.0)
        .ok_or(WarpError::AllCollinear)?
        + 2;
    let c = order[k];
    let first = if orient(points[a], points[b], points[c]) > 0.0 {
        [a, b, c]
    } else {
        [a, c, b]
    };
    let mut tris: Vec<[usize; 3]> = vec![first];
    for e in 0..3 {
        let (u, v) = (first[e], first[(e + 1) % 3]);
        tris.push([v, u, GHOST]);
    }

    let in_circle = |t: &[usize; 3], p: Point| -> bool {
        match t.iter().position(|&i| i == GHOST) {
            None => {
                incircle(
                    coord(points[t[0]]),
                    coord(points[t[1]]),
                    coord(points[t[2]]),
                    coord(p),
                ) > 0.0
            }
            Some(g) => {
                let u = points[t[(g + 1) % 3]];
                let v = points[t[(g + 2) % 3]];
                let o = orient(u, v, p);
                if o != 0.0 {
                    return o > 0.0;
                }
                // collinear with the hull edge: inside only strictly between
                let t = (p - u).dot(v - u);
                t > 0.0 && t < (v - u).norm_sq()
            }
        }
    };

    let mut bad = Vec::new();
    let mut keep = Vec::new();
    for &pi in order.iter().enumerate().filter(|&(n, _)| n != 0 && n != 1 && n != k).map(|(_, i)| i) {
        let p = points[pi];
        bad.clear();
        keep.clear();
        for t in tris.drain(..) {
            if in_circle(&t, p) {
                bad.push(t);
            } else {
                keep.push(t);
            }
        }
        std::mem::swap(&mut tris, &mut keep);
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(bad.len() * 3);
        for t in &bad {
            for e in 0..3 {
                edges.push((t[e], t[(e + 1) % 3]));
            }
        }
        for &(u, v) in &edges {
            if !edges.contains(&(v, u)) {
                tris.push([u, v, pi]);
            }
        }
    }

    let triangles: Vec<[usize; 3]> = tris.into_iter().filter(|t| !t.contains(&GHOST)).collect();
    Ok(TriangleMesh {
        vertices: points.to_vec(),
        triangles,
    })
}

/// Affine map `p -> (m00 x + m01 y + m02, m10 x + m11 y + m12)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(t: Point) -> Self {
        AffineTransform {
            m: [[1.0, 0.0, t.x], [0.0, 1.0, t.y]],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        Point::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }
}

/// The unique affine map sending each `src[i]` to `dst[i]`.
pub fn affine_from_triangles(src: [Point; 3], dst: [Point; 3]) -> Result<AffineTransform, WarpError> {
    if src == dst {
        return Ok(AffineTransform::IDENTITY);
    }
    let det = signed_area2(src[0], src[1], src[2]);
    if !(det.abs() / 2.0 > MIN_TRIANGLE_AREA) {
        return Err(WarpError::DegenerateSourceTriangle);
    }
    let (e1, e2) = (src[1] - src[0], src[2] - src[0]);
    let (f1, f2) = (dst[1] - dst[0], dst[2] - dst[0]);
    // L [e1 e2] = [f1 f2]  =>  L = [f1 f2] [e1 e2]^-1
    let inv = [[e2.y / det, -e2.x / det], [-e1.y / det, e1.x / det]];
    let l = [
        [f1.x * inv[0][0] + f2.x * inv[1][0], f1.x * inv[0][1] + f2.x * inv[1][1]],
        [f1.y * inv[0][0] + f2.y * inv[1][0], f1.y * inv[0][1] + f2.y * inv[1][1]],
    ];
    let t = Point::new(
        dst[0].x - (l[0][0] * src[0].x + l[0][1] * src[0].y),
        dst[0].y - (l[1][0] * src[0].x + l[1][1] * src[0].y),
    );
    Ok(AffineTransform {
        m: [[l[0][0], l[0][1], t.x], [l[1][0], l[1][1], t.y]],
    })
}

/// Piecewise-affine backward map defined by one topology on two point sets.
#[derive(Debug, Clone)]
pub struct TriangleWarp {
    dst: Vec<[Point; 3]>,
    inverse: Vec<AffineTransform>,
}

impl TriangleWarp {
    pub fn new(src_pts: &[Point], dst_pts: &[Point], topology: &TriangleMesh) -> Result<Self, WarpError> {
        for pts in [src_pts, dst_pts] {
            if pts.len() != topology.vertices.len() {
                return Err(WarpError::PointCountMismatch {
                    mesh: topology.vertices.len(),
                    points: pts.len(),
                });
            }
        }
        let mut dst = Vec::with_capacity(topology.triangles.len());
        let mut inverse = Vec::with_capacity(topology.triangles.len());
        for t in &topology.triangles {
            let d = t.map(|i| dst_pts[i]);
            let s = t.map(|i| src_pts[i]);
            inverse.push(affine_from_triangles(d, s)?);
            dst.push(d);
        }
        Ok(Self { dst, inverse })
    }

    /// Index of the first triangle (in topology order) containing `p`.
    pub fn locate(&self, p: Point) -> Option<usize> {
        self.dst.iter().position(|t| contains(t, p))
    }

    /// Source position of output position `p`, if `p` is covered.
    pub fn source_position(&self, p: Point) -> Option<Point> {
        self.locate(p).map(|t| self.inverse[t].apply(p))
    }

    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, WarpError> {
        let (w, h, ch) = img.dims();
        let mut out = ImageBuffer::new(w, h, ch);
        let mut done = vec![false; w * h];
        for (t, tri) in self.dst.iter().enumerate() {
            let fit = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
            let x0 = fit(tri.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor(), w) as usize;
            let x1 = fit(tri.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil(), w) as usize;
            let y0 = fit(tri.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor(), h) as usize;
            let y1 = fit(tri.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil(), h) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if done[y * w + x] {
                        continue;
                    }
                    let p = Point::new(x as f64, y as f64);
                    if !contains(tri, p) {
                        continue;
                    }
                    done[y * w + x] = true;
                    let s = self.inverse[t].apply(p);
                    for c in 0..ch {
                        out.set(x, y, c, img.sample_bilinear(s.x, s.y, c));
                    }
                }
            }
        }
        if let Some(i) = done.iter().position(|d| !d) {
            return Err(WarpError::CoverageGap { x: i % w, y: i / w });
        }
        Ok(out)
    }
}

/// Inclusive point-in-triangle test with a small tolerance for pixels that
/// sit exactly on shared edges.
fn contains(t: &[Point; 3], p: Point) -> bool {
    let area = signed_area2(t[0], t[1], t[2]);
    let tol = 1e-9 * area.abs().max(1.0);
    let s = area.signum();
    (0..3).all(|e| s * signed_area2(t[e], t[(e + 1) % 3], p) >= -tol)
}

/// Warps `img` so that each `src_pts` triangle lands on its `dst_pts` twin.
pub fn warp_triangle_mesh(
    img: &ImageBuffer,
    src_pts: &[Point],
    dst_pts: &[Point],
    topology: &TriangleMesh,
) -> Result<ImageBuffer, WarpError> {
    TriangleWarp::new(src_pts, dst_pts, topology)?.apply(img)
}

/// Stabilizer for the field-morph weight `(1 / (d + epsilon))^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldMorphParams {
    pub epsilon: f64,
}

impl Default for FieldMorphParams {
    fn default() -> Self {
        Self { epsilon: 0.5 }
    }
}

impl FieldMorphParams {
    /// The distance-weight exponent is fixed.
    pub const WEIGHT_EXPONENT: i32 = 2;
}

fn validate_pairs(pairs: &[LineSegmentPair], params: &FieldMorphParams) -> Result<(), WarpError> {
    if pairs.is_empty() {
        return Err(WarpError::NoSegments);
    }
    if !(params.epsilon > 0.0) {
        return Err(WarpError::BadEpsilon(params.epsilon));
    }
    if let Some(i) = pairs
        .iter()
        .position(|p| p.src_start == p.src_end || p.dst_start == p.dst_end)
    {
        return Err(WarpError::DegenerateSegment(i));
    }
    Ok(())
}

/// Source position of target pixel `p` under field morphing.
///
/// For each pair, `p` is expressed as `(u, v)` relative to the target segment
/// (`u` along the segment as a fraction of its length, `v` signed distance
/// along the unit normal) and re-expressed relative to the source segment.
/// The displacements are averaged with weights `(1 / (d + epsilon))^2`, `d`
/// being the distance from `p` to the target segment.
pub fn field_morph_point(
    p: Point,
    pairs: &[LineSegmentPair],
    params: &FieldMorphParams,
) -> Result<Point, WarpError> {
    validate_pairs(pairs, params)?;
    Ok(field_morph_unchecked(p, pairs, params.epsilon))
}

#[inline]
fn field_morph_unchecked(p: Point, pairs: &[LineSegmentPair], epsilon: f64) -> Point {
    let mut disp = Point::default();
    let mut wsum = 0.0;
    for pair in pairs {
        let d = pair.dst_end - pair.dst_start;
        let dlen = d.norm();
        let rel = p - pair.dst_start;
        let u = rel.dot(d) / (dlen * dlen);
        let v = rel.dot(d.perp()) / dlen;
        let s = pair.src_end - pair.src_start;
        let mapped = pair.src_start + s * u + s.perp() * (v / s.norm());
        let dist = distance_to_segment(p, pair.dst_start, pair.dst_end);
        let w = (1.0 / (dist + epsilon)).powi(FieldMorphParams::WEIGHT_EXPONENT);
        disp += (mapped - p) * w;
        wsum += w;
    }
    p + disp / wsum
}

/// Backward field-morph warp of the whole image.
pub fn warp_field(
    img: &ImageBuffer,
    pairs: &[LineSegmentPair],
    params: &FieldMorphParams,
) -> Result<ImageBuffer, WarpError> {
    validate_pairs(pairs, params)?;
    let (w, h, ch) = img.dims();
    let mut out = ImageBuffer::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let s = field_morph_unchecked(Point::new(x as f64, y as f64), pairs, params.epsilon);
            for c in 0..ch {
                out.set(x, y, c, img.sample_bilinear(s.x, s.y, c));
            }
        }
    }
    Ok(out)
}

/// Both inputs warped onto their mean landmark geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub warped_a: ImageBuffer,
    pub warped_b: ImageBuffer,
    pub target: LandmarkSet,
}

/// Warps `img` from landmarks `from` onto landmarks `to` with the given
/// backend. For the triangle backend, `topology` must triangulate the
/// extended `to` set; pass `None` to compute it.
pub fn warp_to(
    img: &ImageBuffer,
    from: &LandmarkSet,
    to: &LandmarkSet,
    method: WarpMethod,
    field: &FieldMorphParams,
) -> Result<ImageBuffer, WarpError> {
    match method {
        WarpMethod::Triangle => {
            let src = extend_landmarks(from).points();
            let dst = extend_landmarks(to).points();
            let topo = delaunay(&dst)?;
            warp_triangle_mesh(img, &src, &dst, &topo)
        }
        WarpMethod::Field => warp_field(img, &line_pairs(from, to)?, field),
    }
}

/// Aligns two faces onto the average of their landmarks.
pub fn morph_align(
    img_a: &ImageBuffer,
    img_b: &ImageBuffer,
    lm_a: &LandmarkSet,
    lm_b: &LandmarkSet,
    method: WarpMethod,
    field: &FieldMorphParams,
) -> Result<AlignedPair, WarpError> {
    let dims_a = (img_a.width(), img_a.height());
    let dims_b = (img_b.width(), img_b.height());
    if dims_a != dims_b || lm_a.image_dims() != dims_a || lm_b.image_dims() != dims_b {
        return Err(WarpError::DimensionMismatch(dims_a, dims_b));
    }
    let target = LandmarkSet::average(lm_a, lm_b)?;
    let (warped_a, warped_b) = match method {
        WarpMethod::Triangle => {
            let ext_a = extend_landmarks(lm_a).points();
            let ext_b = extend_landmarks(lm_b).points();
            let dst = crate::landmarks::average_landmarks(&ext_a, &ext_b)?;
            let topo = delaunay(&dst)?;
            (
                warp_triangle_mesh(img_a, &ext_a, &dst, &topo)?,
                warp_triangle_mesh(img_b, &ext_b, &dst, &topo)?,
            )
        }
        WarpMethod::Field => (
            warp_field(img_a, &line_pairs(lm_a, &target)?, field)?,
            warp_field(img_b, &line_pairs(lm_b, &target)?, field)?,
        ),
    };
    Ok(AlignedPair {
        warped_a,
        warped_b,
        target,
    })
}
