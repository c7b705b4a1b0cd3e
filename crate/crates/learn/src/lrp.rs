//! Layer-wise relevance propagation and per-region relevance statistics.

use morphforge_core::geometry::Point;
use morphforge_core::partial::{FaceRegions, RegionId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Conv, Dense, Layer, Network, NnError, Tensor};

/// Softmax (or sigmoid) output the explained class must reach.
pub const DEFAULT_GATE: f64 = 0.1;
/// Stabilizer for conservation checks.
pub const EPSILON_EXACT: f64 = 1e-9;
/// Stabilizer for visual maps.
pub const EPSILON_VISUAL: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum LrpError {
    #[error("class {class} output {score} is below the gate {gate}")]
    BelowGate { class: usize, score: f64, gate: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no relevance maps given")]
    EmptyList,
    #[error("no positive relevance inside the face regions")]
    ZeroRegionRelevance,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Epsilon,
    AlphaBeta,
    Flat,
}

/// Which decomposition rule each parameterized layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpRules {
    /// Stabilizer of the epsilon rule.
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Convolutions with a layer index below this use the flat rule, later
    /// ones alpha-beta. Fully connected layers always use epsilon.
    pub flat_until: usize,
    /// Minimum output of the explained class; `None` disables the gate.
    pub gate: Option<f64>,
}

impl LrpRules {
    /// Flat rule for the convolutions before the first pooling layer.
    pub fn for_network(net: &Network) -> Self {
        let flat_until = net
            .layers
            .iter()
            .position(|l| matches!(l, Layer::MaxPool))
            .unwrap_or(0);
        Self {
            epsilon: EPSILON_VISUAL,
            alpha: 2.0,
            beta: -1.0,
            flat_until,
            gate: Some(DEFAULT_GATE),
        }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    pub fn rule(&self, index: usize, layer: &Layer) -> Option<Rule> {
        match layer {
            Layer::Dense(_) => Some(Rule::Epsilon),
            Layer::Conv(_) if index < self.flat_until => Some(Rule::Flat),
            Layer::Conv(_) => Some(Rule::AlphaBeta),
            _ => None,
        }
    }
}

/// Per-pixel relevance (summed over channels).
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl RelevanceMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Relevance at the input and the relevance it started from.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub input: Tensor,
    pub start: f64,
}

fn sign(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn dense_epsilon(d: &Dense, a: &[f64], r: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; d.nin];
    for k in 0..d.nout {
        if r[k] == 0.0 {
            continue;
        }
        let w = &d.weights[k * d.nin..(k + 1) * d.nin];
        // bias stays out of the denominator so relevance is conserved
        let z: f64 = w.iter().zip(a).map(|(w, a)| w * a).sum();
        let s = r[k] / (z + eps * sign(z));
        for j in 0..d.nin {
            out[j] += a[j] * w[j] * s;
        }
    }
    out
}

/// Visits every (input index, weight index) pair feeding conv output `k`.
fn receptive(c: &Conv, in_shape: &[usize], out_shape: &[usize], k: usize, mut f: impl FnMut(usize, usize)) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let co = k / (oh * ow);
    let oy = (k / ow) % oh;
    let ox = k % ow;
    let p = c.kernel / 2;
    for ci in 0..c.cin {
        for ky in 0..c.kernel {
            let iy = (oy * c.stride + ky) as isize - p as isize;
            if iy < 0 || iy as usize >= h {
                continue;
            }
            for kx in 0..c.kernel {
                let ix = (ox * c.stride + kx) as isize - p as isize;
                if ix < 0 || ix as usize >= w {
                    continue;
                }
                let j = (ci * h + iy as usize) * w + ix as usize;
                f(j, ((co * c.cin + ci) * c.kernel + ky) * c.kernel + kx);
            }
        }
    }
}

fn conv_flat(c: &Conv, x: &Tensor, out_shape: &[usize], r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..r.len() {
        if r[k] == 0.0 {
            continue;
        }
        let mut n = 0usize;
        receptive(c, x.shape(), out_shape, k, |_, _| n += 1);
        let share = r[k] / n as f64;
        receptive(c, x.shape(), out_shape, k, |j, _| out[j] += share);
    }
    out
}

fn conv_alpha_beta(c: &Conv, x: &Tensor, out_shape: &[usize], r: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let a = x.data();
    let mut out = vec![0.0; x.len()];
    for k in 0..r.len() {
        if r[k] == 0.0 {
            continue;
        }
        let (mut pos, mut neg, mut n) = (0.0, 0.0, 0usize);
        receptive(c, x.shape(), out_shape, k, |j, wi| {
            let z = a[j] * c.weights[wi];
            if z > 0.0 {
                pos += z;
            } else {
                neg += z;
            }
            n += 1;
        });
        // a missing side hands its weight to the other so the layer still
        // conserves relevance
        let (wp, wn) = match (pos > 0.0, neg < 0.0) {
            (true, true) => (alpha / pos, beta / neg),
            (true, false) => (1.0 / pos, 0.0),
            (false, true) => (0.0, 1.0 / neg),
            (false, false) => {
                let share = r[k] / n as f64;
                receptive(c, x.shape(), out_shape, k, |j, _| out[j] += share);
                continue;
            }
        };
        receptive(c, x.shape(), out_shape, k, |j, wi| {
            let z = a[j] * c.weights[wi];
            out[j] += r[k] * if z > 0.0 { z * wp } else { z * wn };
        });
    }
    out
}

fn pool_relevance(x: &Tensor, out_shape: &[usize], r: &[f64]) -> Vec<f64> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let a = x.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..out_shape[0] {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if a[i] > a[best] {
                        best = i;
                    }
                }
                out[best] += r[(ch * oh + oy) * ow + ox];
            }
        }
    }
    out
}

/// Propagates the logit of `class` back to the input.
pub fn lrp_input(net: &Network, img: &Tensor, class: usize, rules: &LrpRules) -> Result<Propagation, LrpError> {
    let n = net.layers.len();
    if n < 2 || !matches!(net.layers[n - 1], Layer::Softmax | Layer::Sigmoid) {
        return Err(LrpError::ShapeMismatch("network must end in a softmax or sigmoid head".into()));
    }
    let fwd = net.forward(img)?;
    let probs = fwd.output().data();
    if class >= probs.len() {
        return Err(LrpError::ShapeMismatch(format!("class {class} out of {} outputs", probs.len())));
    }
    if let Some(gate) = rules.gate {
        if !(probs[class] >= gate) {
            return Err(LrpError::BelowGate {
                class,
                score: probs[class],
                gate,
            });
        }
    }
    let logits = fwd.acts[n - 1].data();
    let mut r = vec![0.0; logits.len()];
    r[class] = logits[class];
    let start = r[class];
    for i in (0..n - 1).rev() {
        let x = &fwd.acts[i];
        let y_shape = fwd.acts[i + 1].shape();
        let layer = &net.layers[i];
        r = match (layer, rules.rule(i, layer)) {
            (Layer::Dense(d), _) => dense_epsilon(d, x.data(), &r, rules.epsilon),
            (Layer::Conv(c), Some(Rule::Flat)) => conv_flat(c, x, y_shape, &r),
            (Layer::Conv(c), _) => conv_alpha_beta(c, x, y_shape, &r, rules.alpha, rules.beta),
            (Layer::MaxPool, _) => pool_relevance(x, y_shape, &r),
            (Layer::Relu | Layer::Flatten, _) => r,
            (Layer::Softmax | Layer::Sigmoid, _) => {
                return Err(LrpError::ShapeMismatch(format!("output head inside the network at layer {i}")))
            }
        };
    }
    Ok(Propagation {
        input: Tensor::new(img.shape().to_vec(), r).map_err(LrpError::Nn)?,
        start,
    })
}

/// Relevance map of `class` for a `C x H x W` input.
pub fn lrp_propagate(net: &Network, img: &Tensor, class: usize, rules: &LrpRules) -> Result<RelevanceMap, LrpError> {
    let [c, h, w] = img.shape()[..] else {
        return Err(LrpError::ShapeMismatch(format!("expected C x H x W input, got {:?}", img.shape())));
    };
    let p = lrp_input(net, img, class, rules)?;
    let d = p.input.data();
    let values = (0..h * w).map(|k| (0..c).map(|ch| d[ch * h * w + k]).sum()).collect();
    Ok(RelevanceMap {
        width: w,
        height: h,
        values,
    })
}

/// Subtracts the per-pixel mean over `maps` from each map and clamps the
/// result at zero.
pub fn mean_adjust(maps: &[RelevanceMap]) -> Result<Vec<RelevanceMap>, LrpError> {
    let first = maps.first().ok_or(LrpError::EmptyList)?;
    if maps.iter().any(|m| (m.width, m.height) != (first.width, first.height)) {
        return Err(LrpError::ShapeMismatch("relevance maps differ in size".into()));
    }
    let n = maps.len() as f64;
    let mean: Vec<f64> = (0..first.values.len())
        .map(|i| maps.iter().map(|m| m.values[i]).sum::<f64>() / n)
        .collect();
    Ok(maps
        .iter()
        .map(|m| RelevanceMap {
            width: m.width,
            height: m.height,
            values: m.values.iter().zip(&mean).map(|(v, u)| (v - u).max(0.0)).collect(),
        })
        .collect())
}

/// Hard region membership: inside the region rectangle, right and bottom
/// edges excluded so neighbouring regions never share a pixel.
fn in_region(regions: &FaceRegions, r: RegionId, p: Point) -> bool {
    let rect = regions.rect(r);
    p.x >= rect.x0 && p.x < rect.x1 && p.y >= rect.y0 && p.y < rect.y1
}

/// Fraction of the in-region relevance falling into each region, in
/// [`RegionId::ALL`] order. `landmarks` are the 68 points in map coordinates.
pub fn region_relevance(map: &RelevanceMap, landmarks: &[Point]) -> Result<[f64; 4], LrpError> {
    if landmarks.len() != 68 {
        return Err(LrpError::ShapeMismatch(format!("expected 68 landmarks, got {}", landmarks.len())));
    }
    let regions = FaceRegions::from_points(landmarks, map.width, map.height);
    let mut sums = [0.0; 4];
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.get(x, y).max(0.0);
            if v == 0.0 {
                continue;
            }
            let p = Point::new(x as f64, y as f64);
            for r in RegionId::ALL {
                if in_region(&regions, r, p) {
                    sums[r.index()] += v;
                }
            }
        }
    }
    let total: f64 = sums.iter().sum();
    if !(total > 0.0) {
        return Err(LrpError::ZeroRegionRelevance);
    }
    Ok(sums.map(|s| s / total))
}

/// Tab-separated table of region fractions, one row per label.
pub fn region_table(rows: &[(String, [f64; 4])]) -> String {
    let mut s = String::from("kind");
    for r in RegionId::ALL {
        s.push('\t');
        s.push_str(r.name());
    }
    s.push('\n');
    for (label, f) in rows {
        s.push_str(label);
        for v in f {
            s.push_str(&format!("\t{v:.4}"));
        }
        s.push('\n');
    }
    s
}
