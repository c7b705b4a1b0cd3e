use std::borrow::Cow;

use morphforge_core::seed::{derive_seed, derived_rng};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Forward, Gradients, Head, Layer, LayerSpec, Network, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Softmax head, one-hot targets.
    CrossEntropy,
    /// Sigmoid head, summed per-output binary cross-entropy.
    MultilabelBce,
}

impl Loss {
    fn fits(self, head: Option<Head>) -> bool {
        matches!(
            (self, head),
            (Loss::CrossEntropy, Some(Head::Softmax(_))) | (Loss::MultilabelBce, Some(Head::Sigmoid(_)))
        )
    }
}

/// One-hot target for a binary label (`true` = morph = class 1).
pub fn binary_target(morph: bool) -> Vec<f64> {
    if morph {
        vec![0.0, 1.0]
    } else {
        vec![1.0, 0.0]
    }
}

/// Loss of one forward pass and its gradient at the head input.
pub(crate) fn loss_and_logit_grad(fwd: &Forward, target: &[f64], loss: Loss) -> (f64, Vec<f64>) {
    let n = fwd.acts.len();
    let out = fwd.acts[n - 1].data();
    let logits = fwd.acts[n - 2].data();
    let mut grad: Vec<f64> = out.iter().zip(target).map(|(p, y)| p - y).collect();
    // for a one-hot target write the true class as minus the other
    // probabilities, so the gradient sums to zero exactly
    let ones: Vec<usize> = (0..target.len()).filter(|&k| target[k] == 1.0).collect();
    if loss == Loss::CrossEntropy && ones.len() == 1 && target.iter().filter(|&&y| y != 0.0).count() == 1 {
        let c = ones[0];
        grad[c] = -(0..out.len()).filter(|&k| k != c).map(|k| out[k]).sum::<f64>();
    }
    let value = match loss {
        Loss::CrossEntropy => -target
            .iter()
            .zip(out)
            .filter(|(y, _)| **y != 0.0)
            .map(|(y, p)| y * p.max(f64::MIN_POSITIVE).ln())
            .sum::<f64>(),
        Loss::MultilabelBce => logits
            .iter()
            .zip(target)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum(),
    };
    (value, grad)
}

impl Network {
    /// Loss, parameter gradients and input gradient for one example.
    pub fn loss_gradients(&self, x: &Tensor, target: &[f64], loss: Loss) -> Result<(f64, Gradients, Vec<f64>), NnError> {
        if !loss.fits(self.head()) {
            return Err(NnError::LossHeadMismatch { loss, head: self.head() });
        }
        let fwd = self.forward(x)?;
        if target.len() != fwd.output().len() {
            return Err(NnError::ShapeMismatch(format!(
                "target has {} values, output has {}",
                target.len(),
                fwd.output().len()
            )));
        }
        let (value, g) = loss_and_logit_grad(&fwd, target, loss);
        let (grads, gx) = self.backward_from(&fwd, self.layers.len() - 1, &g)?;
        Ok((value, grads, gx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub target: Vec<f64>,
}

/// Training data. `epoch` lets implementations vary inputs between epochs
/// (e.g. crop shifts) while staying deterministic.
pub trait Examples: Sync {
    fn len(&self) -> usize;
    fn input(&self, index: usize, epoch: usize) -> Cow<'_, Tensor>;
    fn target(&self, index: usize) -> Cow<'_, [f64]>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Examples for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }
    fn input(&self, index: usize, _epoch: usize) -> Cow<'_, Tensor> {
        Cow::Borrowed(&self[index].input)
    }
    fn target(&self, index: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self[index].target)
    }
}

impl Examples for Vec<Example> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn input(&self, index: usize, epoch: usize) -> Cow<'_, Tensor> {
        self.as_slice().input(index, epoch)
    }
    fn target(&self, index: usize) -> Cow<'_, [f64]> {
        self.as_slice().target(index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: Loss,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-layer learning rates overriding `lr`; zero freezes a layer.
    pub layer_lr: Option<Vec<f64>>,
    /// Rates fall linearly over the epochs to this fraction of their start
    /// value; 1 keeps them constant.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
    /// Batch gradients longer than this are rescaled to this norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::CrossEntropy,
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            layer_lr: None,
            final_lr_fraction: 1.0,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over each epoch's examples.
    pub epoch_loss: Vec<f64>,
}

/// SGD with classical momentum: `v = mu * v - lr * g; p += v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Gradients,
    momentum: f64,
    rates: Vec<f64>,
    /// Multiplies every rate.
    pub scale: f64,
}

impl Sgd {
    pub fn new(net: &Network, lr: f64, momentum: f64, layer_lr: Option<&[f64]>) -> Self {
        let rates = match layer_lr {
            Some(r) => r.to_vec(),
            None => vec![lr; net.layers.len()],
        };
        Self {
            velocity: Gradients::zeros(net),
            momentum,
            rates,
            scale: 1.0,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        for (i, (layer, g)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
            let lr = self.rates.get(i).copied().unwrap_or(0.0) * self.scale;
            // frozen layers stay bit-identical
            if lr == 0.0 {
                continue;
            }
            let (Some((w, b)), Some(g), Some(v)) = (layer.params_mut(), g, self.velocity.layers[i].as_mut()) else {
                continue;
            };
            for (p, (gv, vv)) in w.iter_mut().zip(g.weights.iter().zip(v.weights.iter_mut())) {
                *vv = self.momentum * *vv - lr * gv;
                *p += *vv;
            }
            for (p, (gv, vv)) in b.iter_mut().zip(g.bias.iter().zip(v.bias.iter_mut())) {
                *vv = self.momentum * *vv - lr * gv;
                *p += *vv;
            }
        }
    }
}

/// Mini-batch SGD. Each batch's per-example gradients are computed in
/// parallel and summed in example order, so results do not depend on the
/// number of threads.
pub fn train<E: Examples + ?Sized>(net: &mut Network, data: &E, cfg: &TrainConfig) -> Result<TrainReport, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if !cfg.loss.fits(net.head()) {
        return Err(NnError::LossHeadMismatch {
            loss: cfg.loss,
            head: net.head(),
        });
    }
    let mut sgd = Sgd::new(net, cfg.lr, cfg.momentum, cfg.layer_lr.as_deref());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        if cfg.epochs > 1 {
            let t = epoch as f64 / (cfg.epochs - 1) as f64;
            sgd.scale = 1.0 + t * (cfg.final_lr_fraction - 1.0);
        }
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, "epoch", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let snapshot = &*net;
            let parts: Vec<Result<(f64, Gradients), NnError>> = chunk
                .par_iter()
                .map(|&i| {
                    let (l, g, _) = snapshot.loss_gradients(&data.input(i, epoch), &data.target(i), cfg.loss)?;
                    Ok((l, g))
                })
                .collect();
            let mut sum = Gradients::zeros(net);
            for p in parts {
                let (l, g) = p?;
                total += l;
                sum.add(&g);
            }
            sum.scale(1.0 / chunk.len() as f64);
            if let Some(limit) = cfg.max_grad_norm {
                let norm = sum.norm();
                if norm > limit {
                    sum.scale(limit / norm);
                }
            }
            sgd.step(net, &sum);
        }
        epoch_loss.push(total / data.len() as f64);
    }
    Ok(TrainReport { epoch_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRetrainConfig {
    pub lr_last: f64,
    /// Defaults to a tenth of `lr_last`.
    pub lr_second_last: Option<f64>,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub final_lr_fraction: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for HeadRetrainConfig {
    fn default() -> Self {
        Self {
            lr_last: 0.01,
            lr_second_last: None,
            momentum: 0.9,
            epochs: 5,
            batch_size: 16,
            seed: 0,
            final_lr_fraction: 1.0,
            max_grad_norm: None,
        }
    }
}

/// Replaces the last fully connected layer and the head by a fresh two-class
/// softmax head, then trains only the last two fully connected layers.
pub fn retrain_head<E: Examples + ?Sized>(
    net: &Network,
    data: &E,
    cfg: &HeadRetrainConfig,
) -> Result<(Network, TrainReport), NnError> {
    let dense = net.dense_indices();
    if dense.len() < 2 {
        return Err(NnError::TooFewFCLayers(dense.len()));
    }
    let (last, second) = (dense[dense.len() - 1], dense[dense.len() - 2]);
    let Layer::Dense(old) = &net.layers[last] else {
        unreachable!("dense index points at a dense layer")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "head", 0));
    let mut layers = net.layers[..last].to_vec();
    layers.push(Layer::init(LayerSpec::Dense { nin: old.nin, nout: 2 }, &mut rng));
    layers.push(Layer::Softmax);
    let mut out = Network::new(net.input_shape.clone(), layers)?;
    let mut rates = vec![0.0; out.layers.len()];
    rates[last] = cfg.lr_last;
    rates[second] = cfg.lr_second_last.unwrap_or(cfg.lr_last / 10.0);
    let train_cfg = TrainConfig {
        loss: Loss::CrossEntropy,
        lr: 0.0,
        momentum: cfg.momentum,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        layer_lr: Some(rates),
        final_lr_fraction: cfg.final_lr_fraction,
        max_grad_norm: cfg.max_grad_norm,
    };
    let report = train(&mut out, data, &train_cfg)?;
    Ok((out, report))
}
