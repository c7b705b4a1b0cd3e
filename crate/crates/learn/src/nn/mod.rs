//! A small convolutional network in `f64` with exact backpropagation.
//!
//! Activations are single samples in channel-major (`C x H x W`) order;
//! batches are loops over samples.

mod eval;
pub mod gradcheck;
mod io;
mod train;

pub use eval::{evaluate, evaluate_scores, EvalReport, SweepPoint};
pub use io::{load_network, save_network, FORMAT_MAGIC, FORMAT_VERSION};
pub use train::{
    binary_target, retrain_head, train, Example, Examples, HeadRetrainConfig, Loss, Sgd, TrainConfig, TrainReport,
};

use morphforge_core::imaging::ImageBuffer;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward pass needs the cache of a forward pass through this network")]
    NoForwardCache,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("head retraining needs at least two fully connected layers, found {0}")]
    TooFewFCLayers(usize),
    #[error("loss {loss:?} does not match the network head {head:?}")]
    LossHeadMismatch { loss: Loss, head: Option<Head> },
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Dense real array with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel-major copy of an interleaved image.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let (w, h, c) = img.dims();
        let mut data = vec![0.0; w * h * c];
        for (k, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * w * h + k] = v;
            }
        }
        Self {
            shape: vec![c, h, w],
            data,
        }
    }

    /// Inverse of [`Tensor::from_image`] for `C x H x W` tensors.
    pub fn to_image(&self) -> Result<ImageBuffer, NnError> {
        let [c, h, w] = self.shape[..] else {
            return Err(NnError::ShapeMismatch(format!("expected C x H x W, got {:?}", self.shape)));
        };
        Ok(ImageBuffer::from_fn(w, h, c, |x, y, ch| self.data[ch * w * h + y * w + x]))
    }
}

/// Architecture description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square `kernel x kernel` convolution, zero padding `kernel / 2`.
    Conv { kernel: usize, stride: usize, cin: usize, cout: usize },
    Relu,
    /// 2x2 max pooling with stride 2.
    MaxPool,
    Flatten,
    Dense { nin: usize, nout: usize },
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
    /// `cout x cin x kernel x kernel`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    /// `nout x nin`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Relu,
    MaxPool,
    Flatten,
    Dense(Dense),
    Softmax,
    Sigmoid,
}

/// Output nonlinearity of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Softmax(usize),
    Sigmoid(usize),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                kernel: c.kernel,
                stride: c.stride,
                cin: c.cin,
                cout: c.cout,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool => LayerSpec::MaxPool,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense { nin: d.nin, nout: d.nout },
            Layer::Softmax => LayerSpec::Softmax,
            Layer::Sigmoid => LayerSpec::Sigmoid,
        }
    }

    /// Layer with fan-in scaled uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Layer {
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        match spec {
            LayerSpec::Conv { kernel, stride, cin, cout } => Layer::Conv(Conv {
                kernel,
                stride,
                cin,
                cout,
                weights: uniform(cout * cin * kernel * kernel, cin * kernel * kernel),
                bias: vec![0.0; cout],
            }),
            LayerSpec::Dense { nin, nout } => Layer::Dense(Dense {
                nin,
                nout,
                weights: uniform(nout * nin, nin),
                bias: vec![0.0; nout],
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Softmax => Layer::Softmax,
            LayerSpec::Sigmoid => Layer::Sigmoid,
        }
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv(c) => Some((&c.weights, &c.bias)),
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Conv(c) => Some((&mut c.weights, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }

    /// Output shape for an input shape, or a description of the mismatch.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match (self, input) {
            (Layer::Conv(c), &[ch, h, w]) => {
                if ch != c.cin {
                    return Err(format!("conv expects {} channels, got {ch}", c.cin));
                }
                if c.kernel == 0 || c.kernel % 2 == 0 || c.stride == 0 {
                    return Err(format!("conv needs an odd kernel and positive stride, got {}/{}", c.kernel, c.stride));
                }
                let p = c.kernel / 2;
                Ok(vec![c.cout, (h + 2 * p - c.kernel) / c.stride + 1, (w + 2 * p - c.kernel) / c.stride + 1])
            }
            (Layer::Conv(_), s) => Err(format!("conv expects C x H x W input, got {s:?}")),
            (Layer::MaxPool, &[ch, h, w]) if h >= 2 && w >= 2 => Ok(vec![ch, h / 2, w / 2]),
            (Layer::MaxPool, s) => Err(format!("max pooling needs C x H x W with H, W >= 2, got {s:?}")),
            (Layer::Relu, s) => Ok(s.to_vec()),
            (Layer::Flatten, s) => Ok(vec![s.iter().product()]),
            (Layer::Dense(d), &[n]) if n == d.nin => Ok(vec![d.nout]),
            (Layer::Dense(d), s) => Err(format!("dense layer expects [{}], got {s:?}", d.nin)),
            (Layer::Softmax | Layer::Sigmoid, &[n]) => Ok(vec![n]),
            (Layer::Softmax | Layer::Sigmoid, s) => Err(format!("output head expects a vector, got {s:?}")),
        }
    }

    pub fn forward(&self, x: &Tensor, out_shape: &[usize]) -> Tensor {
        let data = match self {
            Layer::Conv(c) => conv_forward(c, x, out_shape),
            Layer::Relu => x.data.iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool => pool_forward(x, out_shape).0,
            Layer::Flatten => x.data.clone(),
            Layer::Dense(d) => (0..d.nout)
                .map(|o| d.bias[o] + dot(&d.weights[o * d.nin..(o + 1) * d.nin], &x.data))
                .collect(),
            Layer::Softmax => softmax(&x.data),
            Layer::Sigmoid => x.data.iter().map(|&z| sigmoid(z)).collect(),
        };
        Tensor {
            shape: out_shape.to_vec(),
            data,
        }
    }

    /// Gradient with respect to the input, accumulating parameter gradients
    /// into `grad` when the layer has parameters.
    pub fn backward(&self, x: &Tensor, y: &Tensor, g: &[f64], grad: Option<&mut ParamGrad>) -> Vec<f64> {
        match self {
            Layer::Conv(c) => conv_backward(c, x, y.shape(), g, grad),
            Layer::Relu => x.data.iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect(),
            Layer::MaxPool => {
                let (_, arg) = pool_forward(x, y.shape());
                let mut gx = vec![0.0; x.len()];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
                gx
            }
            Layer::Flatten => g.to_vec(),
            Layer::Dense(d) => {
                if let Some(pg) = grad {
                    for o in 0..d.nout {
                        pg.bias[o] += g[o];
                        if g[o] != 0.0 {
                            axpy(g[o], &x.data, &mut pg.weights[o * d.nin..(o + 1) * d.nin]);
                        }
                    }
                }
                let mut gx = vec![0.0; d.nin];
                for o in 0..d.nout {
                    if g[o] != 0.0 {
                        axpy(g[o], &d.weights[o * d.nin..(o + 1) * d.nin], &mut gx);
                    }
                }
                gx
            }
            Layer::Softmax => {
                let s: f64 = g.iter().zip(&y.data).map(|(a, b)| a * b).sum();
                y.data.iter().zip(g).map(|(&p, &gi)| p * (gi - s)).collect()
            }
            Layer::Sigmoid => y.data.iter().zip(g).map(|(&s, &gi)| gi * s * (1.0 - s)).collect(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Output range `[lo, hi)` of positions `o` whose input `o * stride + k - pad`
/// falls inside `0..n`.
fn valid_range(k: usize, pad: usize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= n - 1
    let hi = if n + pad < k + 1 { 0 } else { ((n + pad - k - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

fn conv_forward(c: &Conv, x: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let (h, w) = (x.shape[1], x.shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (k, s, p) = (c.kernel, c.stride, c.kernel / 2);
    let mut out = vec![0.0; c.cout * oh * ow];
    for co in 0..c.cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(c.bias[co]);
        for ci in 0..c.cin {
            let src = &x.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, p, s, h, oh);
                for kx in 0..k {
                    let wv = c.weights[((co * c.cin + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(kx, p, s, w, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let row = &mut plane[oy * ow..(oy + 1) * ow];
                        let srow = &src[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            axpy(wv, &srow[ix0..ix0 + (ox1 - ox0)], &mut row[ox0..ox1]);
                        } else {
                            for ox in ox0..ox1 {
                                row[ox] += wv * srow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(c: &Conv, x: &Tensor, out_shape: &[usize], g: &[f64], mut grad: Option<&mut ParamGrad>) -> Vec<f64> {
    let (h, w) = (x.shape[1], x.shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (k, s, p) = (c.kernel, c.stride, c.kernel / 2);
    let mut gx = vec![0.0; x.len()];
    for co in 0..c.cout {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        if let Some(pg) = grad.as_deref_mut() {
            pg.bias[co] += gplane.iter().sum::<f64>();
        }
        for ci in 0..c.cin {
            let src = &x.data[ci * h * w..(ci + 1) * h * w];
            let gsrc = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, p, s, h, oh);
                for kx in 0..k {
                    let widx = ((co * c.cin + ci) * k + ky) * k + kx;
                    let wv = c.weights[widx];
                    let (ox0, ox1) = valid_range(kx, p, s, w, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut gw = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            let n = ox1 - ox0;
                            gw += dot(&grow[ox0..ox1], &src[iy * w + ix0..iy * w + ix0 + n]);
                            axpy(wv, &grow[ox0..ox1], &mut gsrc[iy * w + ix0..iy * w + ix0 + n]);
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - p;
                                gw += grow[ox] * src[iy * w + ix];
                                gsrc[iy * w + ix] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(pg) = grad.as_deref_mut() {
                        pg.weights[widx] += gw;
                    }
                }
            }
        }
    }
    gx
}

/// Max pooling values and, per output, the flat index of the first maximum.
fn pool_forward(x: &Tensor, out_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (x.shape[1], x.shape[2]);
    let (c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut vals = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[i] > best.0 || (dy, dx) == (0, 0) {
                        best = (x.data[i], i);
                    }
                }
                vals.push(best.0);
                arg.push(best.1);
            }
        }
    }
    (vals, arg)
}

/// Gradient of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients of a whole network (`None` for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    l.params().map(|(w, b)| ParamGrad {
                        weights: vec![0.0; w.len()],
                        bias: vec![0.0; b.len()],
                    })
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in self.layers.iter_mut().flatten() {
            g.weights.iter_mut().for_each(|x| *x *= f);
            g.bias.iter_mut().for_each(|x| *x *= f);
        }
    }

    /// Euclidean norm over every parameter gradient.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weights.iter().chain(&g.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|g| g.weights.iter().chain(&g.bias).all(|&v| v == 0.0))
    }
}

/// Activations of one forward pass: `acts[0]` is the input and `acts[i + 1]`
/// the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub acts: Vec<Tensor>,
}

impl Forward {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("forward cache holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds and validates a network from layers.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self, NnError> {
        let net = Self { input_shape, layers };
        net.shapes()?;
        Ok(net)
    }

    /// Randomly initialized network for an architecture.
    pub fn from_specs<R: Rng + ?Sized>(input_shape: Vec<usize>, specs: &[LayerSpec], rng: &mut R) -> Result<Self, NnError> {
        let layers = specs.iter().map(|&s| Layer::init(s, rng)).collect();
        Self::new(input_shape, layers)
    }

    /// `[Conv3x3(width)-ReLU-MaxPool] x blocks -> Dense(hidden) -> ReLU -> Dense(classes) -> head`
    /// for a square `side x side x channels` input.
    pub fn default_specs(channels: usize, side: usize, blocks: usize, width: usize, hidden: usize, head: Head) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut cin = channels;
        let mut s = side;
        for _ in 0..blocks {
            specs.push(LayerSpec::Conv {
                kernel: 3,
                stride: 1,
                cin,
                cout: width,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool);
            cin = width;
            s /= 2;
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense {
            nin: cin * s * s,
            nout: hidden,
        });
        specs.push(LayerSpec::Relu);
        let (n, last) = match head {
            Head::Softmax(n) => (n, LayerSpec::Softmax),
            Head::Sigmoid(n) => (n, LayerSpec::Sigmoid),
        };
        specs.push(LayerSpec::Dense { nin: hidden, nout: n });
        specs.push(last);
        specs
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Shapes of the input and of every layer output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let next = l
                .output_shape(shapes.last().unwrap())
                .map_err(|e| NnError::ShapeMismatch(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn head(&self) -> Option<Head> {
        let n = *self.shapes().ok()?.last()?.first()?;
        match self.layers.last()? {
            Layer::Softmax => Some(Head::Softmax(n)),
            Layer::Sigmoid => Some(Head::Sigmoid(n)),
            _ => None,
        }
    }

    /// Indices of the fully connected layers in order.
    pub fn dense_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Dense(_)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Forward, NnError> {
        self.forward_upto(x, self.layers.len())
    }

    /// Runs only the first `end` layers.
    pub fn forward_upto(&self, x: &Tensor, end: usize) -> Result<Forward, NnError> {
        if x.shape != self.input_shape {
            return Err(NnError::ShapeMismatch(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape, x.shape
            )));
        }
        let shapes = self.shapes()?;
        let mut acts = Vec::with_capacity(end + 1);
        acts.push(x.clone());
        for (i, l) in self.layers[..end].iter().enumerate() {
            let y = l.forward(&acts[i], &shapes[i + 1]);
            acts.push(y);
        }
        Ok(Forward { acts })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(x)?.acts.pop().unwrap().data)
    }

    /// Backpropagates `grad_out` (gradient at the network output).
    /// Returns parameter gradients and the gradient at the input.
    pub fn backward(&self, fwd: &Forward, grad_out: &[f64]) -> Result<(Gradients, Vec<f64>), NnError> {
        self.backward_from(fwd, self.layers.len(), grad_out)
    }

    /// Backpropagates a gradient given at the output of layer `end - 1`
    /// through layers `0..end`.
    pub fn backward_from(&self, fwd: &Forward, end: usize, grad: &[f64]) -> Result<(Gradients, Vec<f64>), NnError> {
        if fwd.acts.len() < end + 1 || fwd.acts.is_empty() {
            return Err(NnError::NoForwardCache);
        }
        let shapes = self.shapes()?;
        for (i, a) in fwd.acts.iter().take(end + 1).enumerate() {
            if a.shape != shapes[i] {
                return Err(NnError::NoForwardCache);
            }
        }
        if grad.len() != fwd.acts[end].len() {
            return Err(NnError::ShapeMismatch(format!(
                "gradient has {} values, layer output has {}",
                grad.len(),
                fwd.acts[end].len()
            )));
        }
        let mut grads = Gradients::zeros(self);
        let mut g = grad.to_vec();
        for i in (0..end).rev() {
            g = self.layers[i].backward(&fwd.acts[i], &fwd.acts[i + 1], &g, grads.layers[i].as_mut());
        }
        Ok((grads, g))
    }

    /// Applies `params -= step * grads` layer by layer.
    pub fn apply_update(&mut self, update: &Gradients) {
        for (l, u) in self.layers.iter_mut().zip(&update.layers) {
            if let (Some((w, b)), Some(u)) = (l.params_mut(), u) {
                w.iter_mut().zip(&u.weights).for_each(|(p, d)| *p += d);
                b.iter_mut().zip(&u.bias).for_each(|(p, d)| *p += d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weight_softmax_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::from_specs(vec![3], &[LayerSpec::Dense { nin: 3, nout: 2 }, LayerSpec::Softmax], &mut rng).unwrap();
        if let Layer::Dense(d) = &mut net.layers[0] {
            d.weights.fill(0.0);
        }
        assert_eq!(net.predict(&Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn relu_zeroes_negatives() {
        let x = Tensor::vector(vec![-1.0, -0.5, 0.0, 2.0]);
        let y = Layer::Relu.forward(&x, &[4]);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_impulse_copies_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let Layer::Conv(c) = Layer::init(LayerSpec::Conv { kernel: 3, stride: 1, cin: 1, cout: 1 }, &mut rng) else {
            unreachable!()
        };
        let mut x = Tensor::zeros(vec![1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let y = Layer::Conv(c.clone()).forward(&x, &[1, 5, 5]);
        // correlation: output at (2 - dy, 2 - dx) sees the impulse through w[1 + dy, 1 + dx]
        for ky in 0..3 {
            for kx in 0..3 {
                assert_eq!(y.data()[(3 - ky) * 5 + (3 - kx)], c.weights[ky * 3 + kx]);
            }
        }
        assert_eq!(y.data().iter().filter(|v| **v != 0.0).count(), c.weights.iter().filter(|v| **v != 0.0).count());
    }

    #[test]
    fn strided_conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, h, w) in [(3, 2, 7, 6), (5, 1, 6, 4), (1, 3, 5, 5), (3, 1, 1, 1)] {
            let layer = Layer::init(LayerSpec::Conv { kernel: k, stride: s, cin: 2, cout: 3 }, &mut rng);
            let Layer::Conv(c) = &layer else { unreachable!() };
            let x = rand_tensor(vec![2, h, w], &mut rng);
            let shape = layer.output_shape(x.shape()).unwrap();
            let y = layer.forward(&x, &shape);
            let p = (k / 2) as i64;
            for co in 0..3 {
                for oy in 0..shape[1] {
                    for ox in 0..shape[2] {
                        let mut acc = c.bias[co];
                        for ci in 0..2 {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as i64 - p;
                                    let ix = (ox * s + kx) as i64 - p;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += c.weights[((co * 2 + ci) * k + ky) * k + kx]
                                            * x.data()[ci * h * w + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[(co * shape[1] + oy) * shape[2] + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_sigmoid_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            assert!((softmax(&z).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(z.iter().all(|&v| (0.0..=1.0).contains(&sigmoid(v))));
        }
        assert!(sigmoid(3.0) > 0.0 && sigmoid(3.0) < 1.0);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs = Network::default_specs(1, 8, 2, 3, 5, Head::Softmax(2));
        let net = Network::from_specs(vec![1, 8, 8], &specs, &mut rng).unwrap();
        let fwd = net.forward(&rand_tensor(vec![1, 8, 8], &mut rng)).unwrap();
        let (g, gx) = net.backward(&fwd, &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_softmax_cross_entropy_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Network::from_specs(vec![4], &[LayerSpec::Dense { nin: 4, nout: 2 }, LayerSpec::Softmax], &mut rng).unwrap();
        let x = rand_tensor(vec![4], &mut rng);
        let y = [0.0, 1.0];
        let fwd = net.forward(&x).unwrap();
        let p = fwd.output().data().to_vec();
        let dl_dp: Vec<f64> = p.iter().zip(&y).map(|(p, y)| -y / p).collect();
        let (g, _) = net.backward(&fwd, &dl_dp).unwrap();
        let pg = g.layers[0].as_ref().unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let expect = (p[o] - y[o]) * x.data()[i];
                assert!((pg.weights[o * 4 + i] - expect).abs() < 1e-10);
            }
            assert!((pg.bias[o] - (p[o] - y[o])).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bad = Network::from_specs(vec![3], &[LayerSpec::Dense { nin: 4, nout: 2 }], &mut rng);
        assert!(matches!(bad, Err(NnError::ShapeMismatch(_))));
        let net = Network::from_specs(vec![3], &[LayerSpec::Dense { nin: 3, nout: 2 }], &mut rng).unwrap();
        assert!(matches!(net.forward(&Tensor::vector(vec![1.0; 4])), Err(NnError::ShapeMismatch(_))));
        let short = Forward { acts: vec![Tensor::vector(vec![1.0; 3])] };
        assert!(matches!(net.backward(&short, &[1.0, 1.0]), Err(NnError::NoForwardCache)));
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = ImageBuffer::from_fn(5, 4, 3, |x, y, c| (x * 100 + y * 10 + c) as f64);
        let t = Tensor::from_image(&img);
        assert_eq!(t.shape(), &[3, 4, 5]);
        assert_eq!(t.data()[2 * 20 + 3 * 5 + 1], 132.0);
        assert_eq!(t.to_image().unwrap(), img);
    }
}
