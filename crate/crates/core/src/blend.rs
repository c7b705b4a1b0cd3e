//! Final morph composition: the blended inner face is joined to one warped
//! original across an elliptical annulus. The low frequency band crosses the
//! annulus through a Poisson solve, the high band through a minimum-cost seam
//! found by max-flow on a polar resampling of the annulus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Ellipse, Point};
use crate::imaging::{resample_polar, split_frequency, ImageBuffer, ImageError, PolarGrid, SignedImage};
use crate::landmarks::{LandmarkSet, LOWER_LIP_BOTTOM, LEFT_EYE_OUTER, RIGHT_EYE_OUTER};
use crate::maxflow::FlowGraph;
use crate::warp::{morph_align, FieldMorphParams, WarpError, WarpMethod};

pub const INNER_SCALE: f64 = 1.05;
pub const OUTER_SCALE: f64 = 1.35;
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Frequency-split sigma as a fraction of the inter-ocular distance.
pub const DEFAULT_SIGMA_IOD_FRACTION: f64 = 0.01;
/// Target RMS residual of the Poisson solve.
pub const POISSON_TOLERANCE: f64 = 1e-12;
/// Largest RMS residual accepted after the solve.
pub const POISSON_MAX_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum BlendError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("transition annulus contains no pixel")]
    EmptyAnnulus,
    #[error("Poisson solver did not converge (rms residual {residual:.3e} after {iterations} iterations)")]
    SolverDiverged { residual: f64, iterations: usize },
    #[error("seam graph produced a non-finite or inconsistent flow")]
    FlowOverflow,
    #[error("polar grid needs at least 2 rings and 3 angular samples, got {radial}x{angular}")]
    BadPolarDims { radial: usize, angular: usize },
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Which warped original supplies the face surroundings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterSource {
    #[default]
    A,
    B,
}

impl std::str::FromStr for OuterSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(OuterSource::A),
            "b" | "B" => Ok(OuterSource::B),
            other => Err(format!("outer source must be A or B, got {other:?}")),
        }
    }
}

impl std::fmt::Display for OuterSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OuterSource::A => "A",
            OuterSource::B => "B",
        })
    }
}

/// Where a pixel sits relative to the transition annulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZoneClass {
    Inner,
    Annulus,
    Outer,
}

/// Two concentric ellipses and their pixel classification.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionZone {
    pub inner: Ellipse,
    pub outer: Ellipse,
    width: usize,
    height: usize,
    classes: Vec<ZoneClass>,
}

impl TransitionZone {
    pub fn new(inner: Ellipse, outer: Ellipse, width: usize, height: usize) -> Self {
        let mut classes = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let p = Point::new(x as f64, y as f64);
                classes.push(if inner.radius_of(p) <= 1.0 {
                    ZoneClass::Inner
                } else if outer.radius_of(p) >= 1.0 {
                    ZoneClass::Outer
                } else {
                    ZoneClass::Annulus
                });
            }
        }
        Self {
            inner,
            outer,
            width,
            height,
            classes,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn class(&self, x: usize, y: usize) -> ZoneClass {
        self.classes[y * self.width + x]
    }

    pub fn annulus_len(&self) -> usize {
        self.classes.iter().filter(|&&c| c == ZoneClass::Annulus).count()
    }

    /// Default polar resolution: about one sample per pixel in both directions
    /// at the outer boundary.
    pub fn default_polar_dims(&self) -> PolarDims {
        let r_in = self.inner.semi_axis_x.max(self.inner.semi_axis_y);
        let r_out = self.outer.semi_axis_x.max(self.outer.semi_axis_y);
        PolarDims {
            radial: ((r_out - r_in).ceil() as usize + 1).max(2),
            angular: ((std::f64::consts::TAU * r_out).ceil() as usize).max(8),
        }
    }

    pub fn polar_grid(&self, dims: PolarDims) -> PolarGrid {
        PolarGrid {
            center: self.inner.center,
            r_min: self.inner.semi_axis_x,
            r_max: self.outer.semi_axis_x,
            radial_samples: dims.radial,
            angular_samples: dims.angular,
            aspect_y: self.inner.semi_axis_y / self.inner.semi_axis_x,
        }
    }
}

/// Builds the transition annulus from landmark geometry.
///
/// The base ellipse is centered between the eye midpoint and the mouth center,
/// with semi axes of half the outer-eye-corner distance and half the
/// brow-top-to-lower-lip distance. It is grown (never shrunk) until it holds
/// every brow, eye, nose and mouth landmark, then scaled by [`INNER_SCALE`];
/// the outer ellipse is the inner one scaled by [`OUTER_SCALE`].
pub fn transition_ellipses(lm: &LandmarkSet) -> TransitionZone {
    let eye_mid = lm.right_eye_center().midpoint(lm.left_eye_center());
    let center = eye_mid.midpoint(lm.mouth_center());
    let half_w = 0.5 * lm.point(RIGHT_EYE_OUTER).distance(lm.point(LEFT_EYE_OUTER));
    let brow_top = lm.points()[17..27].iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let half_h = 0.5 * (lm.point(LOWER_LIP_BOTTOM).y - brow_top);
    let base = Ellipse {
        center,
        semi_axis_x: half_w.max(1.0),
        semi_axis_y: half_h.max(1.0),
    };
    let reach = lm.points()[17..]
        .iter()
        .map(|&p| base.radius_of(p))
        .fold(1.0, f64::max);
    let inner = base.scaled(INNER_SCALE * reach);
    let outer = inner.scaled(OUTER_SCALE);
    let (w, h) = lm.image_dims();
    TransitionZone::new(inner, outer, w, h)
}

/// `alpha * a + (1 - alpha) * b`, clamped to `[0, 1]`.
pub fn alpha_blend(a: &ImageBuffer, b: &ImageBuffer, alpha: f64) -> Result<ImageBuffer, BlendError> {
    if a.dims() != b.dims() {
        return Err(BlendError::DimensionMismatch(a.dims(), b.dims()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BlendError::AlphaOutOfRange(alpha));
    }
    if a == b {
        return Ok(a.clamped());
    }
    Ok(a.zip_map(b, |x, y| (alpha * x + (1.0 - alpha) * y).clamp(0.0, 1.0)))
}

/// Linear system of the annulus Poisson problem, one right-hand side per
/// channel. Row `k` reads `deg_k x_k - sum_{unknown q} x_q = rhs_k`.
#[derive(Debug, Clone)]
pub struct PoissonSystem {
    /// Pixel `(x, y)` of each unknown.
    pub pixels: Vec<(usize, usize)>,
    /// In-image 4-neighbour count of each unknown.
    pub degree: Vec<f64>,
    /// Unknown-to-unknown adjacency.
    pub neighbours: Vec<Vec<usize>>,
    /// `rhs[c][k]`.
    pub rhs: Vec<Vec<f64>>,
}

impl PoissonSystem {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..x.len() {
            let mut v = self.degree[k] * x[k];
            for &q in &self.neighbours[k] {
                v -= x[q];
            }
            out[k] = v;
        }
    }

    /// RMS of `rhs - A x`.
    pub fn residual_rms(&self, channel: usize, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.apply(x, &mut ax);
        let ss: f64 = ax.iter().zip(&self.rhs[channel]).map(|(a, b)| (b - a) * (b - a)).sum();
        (ss / x.len().max(1) as f64).sqrt()
    }
}

fn neighbours4(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (x.wrapping_sub(1), y),
        (x + 1, y),
        (x, y.wrapping_sub(1)),
        (x, y + 1),
    ];
    cand.into_iter().filter(move |&(a, b)| a < w && b < h)
}

/// Assembles the Poisson system: unknowns are annulus pixels, guidance is
/// the discrete gradient field of `low_inner`, and known pixels take
/// `low_inner` on the inner side and `low_outer` on the outer side.
pub fn poisson_system(
    low_inner: &ImageBuffer,
    low_outer: &ImageBuffer,
    zone: &TransitionZone,
) -> Result<PoissonSystem, BlendError> {
    if low_inner.dims() != low_outer.dims() {
        return Err(BlendError::DimensionMismatch(low_inner.dims(), low_outer.dims()));
    }
    let (w, h, ch) = low_inner.dims();
    if zone.dims() != (w, h) {
        return Err(BlendError::DimensionMismatch(
            low_inner.dims(),
            (zone.width, zone.height, ch),
        ));
    }
    let mut index = vec![usize::MAX; w * h];
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if zone.class(x, y) == ZoneClass::Annulus {
                index[y * w + x] = pixels.len();
                pixels.push((x, y));
            }
        }
    }
    if pixels.is_empty() {
        return Err(BlendError::EmptyAnnulus);
    }
    let mut degree = Vec::with_capacity(pixels.len());
    let mut neighbours = Vec::with_capacity(pixels.len());
    let mut rhs = vec![vec![0.0; pixels.len()]; ch];
    for (k, &(x, y)) in pixels.iter().enumerate() {
        let mut deg = 0.0;
        let mut adj = Vec::with_capacity(4);
        for (qx, qy) in neighbours4(x, y, w, h) {
            deg += 1.0;
            let q = index[qy * w + qx];
            for (c, r) in rhs.iter_mut().enumerate() {
                r[k] += low_inner.get(x, y, c) - low_inner.get(qx, qy, c);
            }
            if q != usize::MAX {
                adj.push(q);
                continue;
            }
            let known = match zone.class(qx, qy) {
                ZoneClass::Inner => low_inner,
                _ => low_outer,
            };
            for (c, r) in rhs.iter_mut().enumerate() {
                r[k] += known.get(qx, qy, c);
            }
        }
        degree.push(deg);
        neighbours.push(adj);
    }
    Ok(PoissonSystem {
        pixels,
        degree,
        neighbours,
        rhs,
    })
}

/// Conjugate gradients from `x`; stops when the RMS residual reaches
/// [`POISSON_TOLERANCE`]. Returns the iteration count.
fn conjugate_gradient(sys: &PoissonSystem, channel: usize, x: &mut [f64]) -> Result<usize, BlendError> {
    let n = x.len();
    let target = POISSON_TOLERANCE * POISSON_TOLERANCE * n as f64;
    let mut r = vec![0.0; n];
    sys.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(&sys.rhs[channel]) {
        *ri = bi - *ri;
    }
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let cap = 10 * n;
    let mut it = 0;
    while rr > target && it < cap {
        sys.apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            break;
        }
        let step = rr / pap;
        for k in 0..n {
            x[k] += step * p[k];
            r[k] -= step * ap[k];
        }
        let rr_next: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_next / rr;
        rr = rr_next;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        it += 1;
    }
    let residual = sys.residual_rms(channel, x);
    if !(residual <= POISSON_MAX_RESIDUAL) {
        return Err(BlendError::SolverDiverged { residual, iterations: it });
    }
    Ok(it)
}

/// Low-band transition: Poisson fill of the annulus guided by `low_inner`.
/// Pixels outside the annulus are copied from the side they belong to.
pub fn poisson_blend_low(
    low_inner: &ImageBuffer,
    low_outer: &ImageBuffer,
    zone: &TransitionZone,
) -> Result<ImageBuffer, BlendError> {
    let sys = poisson_system(low_inner, low_outer, zone)?;
    let (w, h, ch) = low_inner.dims();
    let mut out = ImageBuffer::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let src = match zone.class(x, y) {
                ZoneClass::Outer => low_outer,
                _ => low_inner,
            };
            out.pixel_mut(x, y).copy_from_slice(src.pixel(x, y));
        }
    }
    for c in 0..ch {
        let mut sol: Vec<f64> = sys.pixels.iter().map(|&(x, y)| low_inner.get(x, y, c)).collect();
        conjugate_gradient(&sys, c, &mut sol)?;
        for (&(x, y), v) in sys.pixels.iter().zip(sol) {
            out.set(x, y, c, v);
        }
    }
    Ok(out)
}

/// Resolution of the polar resampling used for the seam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarDims {
    pub radial: usize,
    pub angular: usize,
}

/// Minimum-cost cyclic seam. `cut[j]` is the outermost ring of angular
/// column `j` that is taken from the inner band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamCut {
    pub cut: Vec<usize>,
    pub cost: f64,
    /// Max-flow value; equals `cost` up to rounding.
    pub flow: f64,
}

/// Cost of a seam on a radial-major node-cost grid: each cut edge between
/// neighbours `p`, `q` costs `costs[p] + costs[q]`.
pub fn cut_cost(costs: &[f64], radial: usize, angular: usize, cut: &[usize]) -> f64 {
    let at = |i: usize, j: usize| costs[i * angular + j];
    let mut total = 0.0;
    for j in 0..angular {
        let k = cut[j];
        total += at(k, j) + at(k + 1, j);
        let j2 = (j + 1) % angular;
        let (lo, hi) = (k.min(cut[j2]), k.max(cut[j2]));
        for i in lo + 1..=hi {
            total += at(i, j) + at(i, j2);
        }
    }
    debug_assert!(cut.iter().all(|&k| k + 1 < radial));
    total
}

/// Solves the cyclic seam on a `radial x angular` node-cost grid by
/// max-flow. Ring 0 is tied to the source and the last ring to the sink;
/// infinite inward edges force exactly one transition per column, and
/// `smoothness` (if given) bounds the jump between neighbouring columns.
pub fn min_cyclic_cut(
    costs: &[f64],
    radial: usize,
    angular: usize,
    smoothness: Option<usize>,
) -> Result<SeamCut, BlendError> {
    if radial < 2 || angular < 3 || costs.len() != radial * angular {
        return Err(BlendError::BadPolarDims { radial, angular });
    }
    if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(BlendError::FlowOverflow);
    }
    let inf = f64::INFINITY;
    let node = |i: usize, j: usize| i * angular + j;
    let (s, t) = (radial * angular, radial * angular + 1);
    let mut g = FlowGraph::new(radial * angular + 2);
    for j in 0..angular {
        g.add_edge(s, node(0, j), inf, 0.0);
        g.add_edge(node(radial - 1, j), t, inf, 0.0);
        let j2 = (j + 1) % angular;
        for i in 0..radial {
            if i + 1 < radial {
                let w = costs[node(i, j)] + costs[node(i + 1, j)];
                g.add_edge(node(i, j), node(i + 1, j), w, inf);
            }
            let w = costs[node(i, j)] + costs[node(i, j2)];
            g.add_edge(node(i, j), node(i, j2), w, w);
        }
        if let Some(bound) = smoothness.filter(|&b| b + 1 < radial) {
            let jp = (j + angular - 1) % angular;
            for i in bound.max(1)..radial {
                g.add_edge(node(i, j), node(i - bound, j2), inf, 0.0);
                g.add_edge(node(i, j), node(i - bound, jp), inf, 0.0);
            }
        }
    }
    let flow = g.max_flow(s, t);
    if !flow.is_finite() {
        return Err(BlendError::FlowOverflow);
    }
    let side = g.source_side(s);
    let cut: Vec<usize> = (0..angular)
        .map(|j| (0..radial).rev().find(|&i| side[node(i, j)]).unwrap_or(0))
        .collect();
    if cut.iter().any(|&k| k + 1 >= radial) {
        return Err(BlendError::FlowOverflow);
    }
    let cost = cut_cost(costs, radial, angular, &cut);
    if (cost - flow).abs() > 1e-9 * cost.abs().max(1.0) {
        return Err(BlendError::FlowOverflow);
    }
    Ok(SeamCut { cut, cost, flow })
}

/// Node costs on the polar grid: per channel, the Euclidean norm of the
/// difference between the inner and outer forward-difference gradients,
/// summed over channels.
pub fn seam_costs(high_inner: &SignedImage, high_outer: &SignedImage, grid: &PolarGrid) -> Vec<f64> {
    let a = resample_polar(high_inner, grid);
    let b = resample_polar(high_outer, grid);
    let (nr, nt, ch) = (grid.radial_samples, grid.angular_samples, a.channels);
    let d = |i: usize, j: usize, c: usize| a.get(i, j, c) - b.get(i, j, c);
    let mut costs = vec![0.0; nr * nt];
    for i in 0..nr {
        for j in 0..nt {
            let mut total = 0.0;
            for c in 0..ch {
                let gr = if i + 1 < nr {
                    d(i + 1, j, c) - d(i, j, c)
                } else {
                    d(i, j, c) - d(i - 1, j, c)
                };
                let gt = d(i, (j + 1) % nt, c) - d(i, j, c);
                total += gr.hypot(gt);
            }
            costs[i * nt + j] = total;
        }
    }
    costs
}

/// High-band seam across the annulus of `zone`.
pub fn seam_cut_high(
    high_inner: &SignedImage,
    high_outer: &SignedImage,
    zone: &TransitionZone,
    polar_dims: PolarDims,
    smoothness: Option<usize>,
) -> Result<SeamCut, BlendError> {
    if high_inner.dims() != high_outer.dims() {
        return Err(BlendError::DimensionMismatch(high_inner.dims(), high_outer.dims()));
    }
    if zone.annulus_len() == 0 {
        return Err(BlendError::EmptyAnnulus);
    }
    if polar_dims.radial < 2 || polar_dims.angular < 3 {
        return Err(BlendError::BadPolarDims {
            radial: polar_dims.radial,
            angular: polar_dims.angular,
        });
    }
    let grid = zone.polar_grid(polar_dims);
    let costs = seam_costs(high_inner, high_outer, &grid);
    min_cyclic_cut(&costs, polar_dims.radial, polar_dims.angular, smoothness)
}

/// Composites the high bands: inner band up to and including the seam ring,
/// outer band beyond it. The seam ring is interpolated between columns.
pub fn compose_high(
    high_inner: &SignedImage,
    high_outer: &SignedImage,
    zone: &TransitionZone,
    polar_dims: PolarDims,
    seam: &SeamCut,
) -> SignedImage {
    let grid = zone.polar_grid(polar_dims);
    let (w, h, ch) = high_inner.dims();
    let n = polar_dims.angular;
    let mut out = SignedImage::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let inner_side = match zone.class(x, y) {
                ZoneClass::Inner => true,
                ZoneClass::Outer => false,
                ZoneClass::Annulus => {
                    let (fi, fj) = grid.lattice_of(Point::new(x as f64, y as f64));
                    let j0 = (fj.floor() as usize) % n;
                    let j1 = (j0 + 1) % n;
                    let t = fj - fj.floor();
                    let k = seam.cut[j0] as f64 * (1.0 - t) + seam.cut[j1] as f64 * t;
                    fi <= k + 0.5
                }
            };
            let src = if inner_side { high_inner } else { high_outer };
            out.pixel_mut(x, y).copy_from_slice(src.pixel(x, y));
        }
    }
    out
}

/// Options for [`compose_morph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphParams {
    pub method: WarpMethod,
    pub alpha: f64,
    pub outer_source: OuterSource,
    /// Frequency-split sigma in pixels; `None` uses 1% of the target
    /// inter-ocular distance.
    pub sigma: Option<f64>,
    pub polar_dims: Option<PolarDims>,
    pub smoothness: Option<usize>,
    pub field: FieldMorphParams,
}

impl Default for MorphParams {
    fn default() -> Self {
        Self {
            method: WarpMethod::Triangle,
            alpha: DEFAULT_ALPHA,
            outer_source: OuterSource::A,
            sigma: None,
            polar_dims: None,
            smoothness: None,
            field: FieldMorphParams::default(),
        }
    }
}

/// Intermediate products of [`compose_morph_detailed`].
#[derive(Debug, Clone)]
pub struct MorphComposite {
    pub image: ImageBuffer,
    pub blended: ImageBuffer,
    pub outer: ImageBuffer,
    pub zone: TransitionZone,
    pub seam: SeamCut,
    pub target: LandmarkSet,
}

/// Full morph pipeline.
pub fn compose_morph(
    img_a: &ImageBuffer,
    img_b: &ImageBuffer,
    lm_a: &LandmarkSet,
    lm_b: &LandmarkSet,
    params: &MorphParams,
) -> Result<ImageBuffer, BlendError> {
    compose_morph_detailed(img_a, img_b, lm_a, lm_b, params).map(|m| m.image)
}

pub fn compose_morph_detailed(
    img_a: &ImageBuffer,
    img_b: &ImageBuffer,
    lm_a: &LandmarkSet,
    lm_b: &LandmarkSet,
    params: &MorphParams,
) -> Result<MorphComposite, BlendError> {
    if img_a.dims() != img_b.dims() {
        return Err(BlendError::DimensionMismatch(img_a.dims(), img_b.dims()));
    }
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(BlendError::AlphaOutOfRange(params.alpha));
    }
    let aligned = morph_align(img_a, img_b, lm_a, lm_b, params.method, &params.field)?;
    let blended = alpha_blend(&aligned.warped_a, &aligned.warped_b, params.alpha)?;
    let outer = match params.outer_source {
        OuterSource::A => aligned.warped_a,
        OuterSource::B => aligned.warped_b,
    };
    let zone = transition_ellipses(&aligned.target);
    let sigma = params
        .sigma
        .unwrap_or(DEFAULT_SIGMA_IOD_FRACTION * aligned.target.inter_ocular_distance());
    let dims = params.polar_dims.unwrap_or_else(|| zone.default_polar_dims());
    let (low_in, high_in) = split_frequency(&blended, sigma)?;
    let (low_out, high_out) = split_frequency(&outer, sigma)?;
    let low = poisson_blend_low(&low_in, &low_out, &zone)?;
    let seam = seam_cut_high(&high_in, &high_out, &zone, dims, params.smoothness)?;
    let high = compose_high(&high_in, &high_out, &zone, dims, &seam);
    // identical bands make every stage an identity; keep the result exact
    let image = if blended == outer {
        blended.clone()
    } else {
        low.zip_map(&high, |l, h| (l + h).clamp(0.0, 1.0))
    };
    Ok(MorphComposite {
        image,
        blended,
        outer,
        zone,
        seam,
        target: aligned.target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{frontal_landmarks, FaceParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_blend_examples() {
        let a = ImageBuffer::filled(4, 3, 3, 0.2);
        let b = ImageBuffer::filled(4, 3, 3, 0.6);
        assert_eq!(alpha_blend(&a, &b, 1.0).unwrap(), a);
        let m = alpha_blend(&a, &b, 0.5).unwrap();
        assert!(m.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert_eq!(alpha_blend(&a, &a, 0.5).unwrap(), a);
        let c = ImageBuffer::filled(4, 4, 3, 0.2);
        assert!(matches!(alpha_blend(&a, &c, 0.5), Err(BlendError::DimensionMismatch(..))));
    }

    #[test]
    fn ellipses_follow_similarity_transforms() {
        let lm = frontal_landmarks(128, 128);
        let z = transition_ellipses(&lm);
        let big = LandmarkSet::new(lm.points().iter().map(|&p| p * 2.0).collect(), 256, 256).unwrap();
        let zb = transition_ellipses(&big);
        assert!((zb.inner.semi_axis_x - 2.0 * z.inner.semi_axis_x).abs() < 1e-9);
        assert!((zb.outer.semi_axis_y - 2.0 * z.outer.semi_axis_y).abs() < 1e-9);
        assert!(zb.inner.center.distance(z.inner.center * 2.0) < 1e-9);
        let shift = Point::new(3.0, -2.0);
        let moved = LandmarkSet::new(lm.points().iter().map(|&p| p + shift).collect(), 128, 128).unwrap();
        let zm = transition_ellipses(&moved);
        assert!((zm.inner.semi_axis_x - z.inner.semi_axis_x).abs() < 1e-9);
        assert!(zm.outer.center.distance(z.outer.center + shift) < 1e-9);
    }

    #[test]
    fn annulus_holds_no_feature_landmark() {
        let lm = frontal_landmarks(128, 128);
        let z = transition_ellipses(&lm);
        for p in &lm.points()[17..] {
            let r = z.inner.radius_of(*p);
            assert!(r < 1.0, "landmark at inner radius {r}");
        }
        assert!(z.annulus_len() > 0);
    }

    fn small_zone() -> TransitionZone {
        let c = Point::new(3.5, 3.5);
        TransitionZone::new(
            Ellipse::new(c, 1.2, 1.2).unwrap(),
            Ellipse::new(c, 3.3, 3.3).unwrap(),
            8,
            8,
        )
    }

    #[test]
    fn poisson_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = ImageBuffer::from_fn(8, 8, 2, |_, _, _| rng.random());
        let zone = small_zone();
        assert_eq!(poisson_blend_low(&img, &img, &zone).unwrap(), img);
        let inner = ImageBuffer::filled(8, 8, 1, 0.3);
        let outer = ImageBuffer::filled(8, 8, 1, 0.7);
        let out = poisson_blend_low(&inner, &outer, &zone).unwrap();
        // maximum principle, boundary copied exactly
        for y in 0..8 {
            for x in 0..8 {
                let v = out.get(x, y, 0);
                match zone.class(x, y) {
                    ZoneClass::Inner => assert_eq!(v, 0.3),
                    ZoneClass::Outer => assert_eq!(v, 0.7),
                    ZoneClass::Annulus => assert!((0.3 - 1e-9..=0.7 + 1e-9).contains(&v)),
                }
            }
        }
    }

    #[test]
    fn poisson_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inner = ImageBuffer::from_fn(8, 8, 1, |_, _, _| rng.random());
        let outer = ImageBuffer::from_fn(8, 8, 1, |_, _, _| rng.random());
        let zone = small_zone();
        let out = poisson_blend_low(&inner, &outer, &zone).unwrap();
        // independent assembly: L f = L g on unknowns, with Dirichlet data
        let known = |x: usize, y: usize| match zone.class(x, y) {
            ZoneClass::Inner => Some(inner.get(x, y, 0)),
            ZoneClass::Outer => Some(outer.get(x, y, 0)),
            ZoneClass::Annulus => None,
        };
        let unknowns: Vec<(usize, usize)> = (0..64)
            .map(|k| (k % 8, k / 8))
            .filter(|&(x, y)| known(x, y).is_none())
            .collect();
        let n = unknowns.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        for (r, &(x, y)) in unknowns.iter().enumerate() {
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                if !(0..8).contains(&qx) || !(0..8).contains(&qy) {
                    continue;
                }
                let (qx, qy) = (qx as usize, qy as usize);
                a[(r, r)] += 1.0;
                b[r] += inner.get(x, y, 0) - inner.get(qx, qy, 0);
                match known(qx, qy) {
                    Some(v) => b[r] += v,
                    None => {
                        let col = unknowns.iter().position(|&u| u == (qx, qy)).unwrap();
                        a[(r, col)] -= 1.0;
                    }
                }
            }
        }
        let sol = a.lu().solve(&b).unwrap();
        let rms = (unknowns
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| (out.get(x, y, 0) - sol[k]).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!(rms < 1e-8, "rms {rms}");
    }

    fn brute_force(costs: &[f64], nr: usize, nt: usize, smooth: Option<usize>) -> f64 {
        let choices = nr - 1;
        let mut best = f64::INFINITY;
        let mut cut = vec![0usize; nt];
        loop {
            let ok = smooth.is_none_or(|s| {
                (0..nt).all(|j| cut[j].abs_diff(cut[(j + 1) % nt]) <= s)
            });
            if ok {
                // direct edge enumeration: every neighbour pair on opposite sides
                let inner = |i: usize, j: usize| i <= cut[j];
                let mut total = 0.0;
                for i in 0..nr {
                    for j in 0..nt {
                        if i + 1 < nr && inner(i, j) != inner(i + 1, j) {
                            total += costs[i * nt + j] + costs[(i + 1) * nt + j];
                        }
                        let j2 = (j + 1) % nt;
                        if inner(i, j) != inner(i, j2) {
                            total += costs[i * nt + j] + costs[i * nt + j2];
                        }
                    }
                }
                best = best.min(total);
            }
            let mut k = 0;
            while k < nt {
                cut[k] += 1;
                if cut[k] < choices {
                    break;
                }
                cut[k] = 0;
                k += 1;
            }
            if k == nt {
                return best;
            }
        }
    }

    #[test]
    fn seam_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..30 {
            let nr = 3 + case % 2;
            let nt = 7;
            let costs: Vec<f64> = (0..nr * nt).map(|_| rng.random::<f64>()).collect();
            for smooth in [None, Some(1)] {
                let seam = min_cyclic_cut(&costs, nr, nt, smooth).unwrap();
                let bf = brute_force(&costs, nr, nt, smooth);
                assert!((seam.cost - bf).abs() < 1e-9, "{} vs {bf}", seam.cost);
                assert!((seam.flow - seam.cost).abs() < 1e-9);
                if let Some(s) = smooth {
                    assert!((0..nt).all(|j| seam.cut[j].abs_diff(seam.cut[(j + 1) % nt]) <= s));
                }
            }
        }
    }

    #[test]
    fn seam_on_zero_cost_ring() {
        let (nr, nt, k) = (6, 9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let costs: Vec<f64> = (0..nr * nt)
            .map(|n| if n / nt < k { 0.5 + rng.random::<f64>() } else { 0.0 })
            .collect();
        let seam = min_cyclic_cut(&costs, nr, nt, None).unwrap();
        assert_eq!(seam.cost, 0.0);
        assert!(seam.cut.iter().all(|&c| c == k));
    }

    #[test]
    fn seam_of_identical_bands_is_free() {
        let zone = small_zone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hi = SignedImage::from_fn(8, 8, 3, |_, _, _| rng.random::<f64>() - 0.5);
        let seam = seam_cut_high(&hi, &hi, &zone, PolarDims { radial: 4, angular: 12 }, None).unwrap();
        assert_eq!(seam.cost, 0.0);
    }

    #[test]
    fn compose_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (img, lm) = FaceParams::random(&mut rng, true).render(64, 64);
        for method in [WarpMethod::Triangle, WarpMethod::Field] {
            let params = MorphParams {
                method,
                alpha: 0.3,
                ..MorphParams::default()
            };
            assert_eq!(compose_morph(&img, &img, &lm, &lm, &params).unwrap(), img);
        }
        let (other, _) = FaceParams::random(&mut rng, false).render(64, 64);
        let params = MorphParams {
            alpha: 1.0,
            ..MorphParams::default()
        };
        assert_eq!(compose_morph(&img, &other, &lm, &lm, &params).unwrap(), img);
    }

    #[test]
    fn compose_regions_match_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, lm_a) = FaceParams::random(&mut rng, true).render(96, 96);
        let (b, lm_b) = FaceParams::random(&mut rng, false).render(96, 96);
        for outer_source in [OuterSource::A, OuterSource::B] {
            let params = MorphParams {
                outer_source,
                ..MorphParams::default()
            };
            let m = compose_morph_detailed(&a, &b, &lm_a, &lm_b, &params).unwrap();
            assert_eq!(m.image.dims(), a.dims());
            assert!(m.image.data().iter().all(|v| v.is_finite()));
            for y in 0..96 {
                for x in 0..96 {
                    for c in 0..3 {
                        let v = m.image.get(x, y, c);
                        match m.zone.class(x, y) {
                            ZoneClass::Inner => assert!((v - m.blended.get(x, y, c)).abs() < 1e-6),
                            ZoneClass::Outer => assert!((v - m.outer.get(x, y, c)).abs() < 1e-6),
                            ZoneClass::Annulus => {}
                        }
                    }
                }
            }
        }
    }
}
