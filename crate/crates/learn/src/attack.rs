//! Fast gradient sign attacks, oracle-access substitute training and
//! robustness-versus-epsilon curves.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{binary_target, train, Example, Head, Loss, Network, NnError, Tensor, TrainConfig};

pub const GENUINE_CLASS: usize = 0;
pub const MORPH_CLASS: usize = 1;
/// Jacobian augmentation step on `[0, 1]` intensities.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Attack strengths on the 0-255 intensity scale.
pub const DEFAULT_EPSILONS: [f64; 8] = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),
    #[error("no morph is detected by the oracle before the attack")]
    NoCorrectlyDetectedMorphs,
    #[error("substitute training needs a non-empty seed set")]
    EmptySeedSet,
    #[error("epsilons must be finite, non-negative and strictly increasing: {0:?}")]
    BadEpsilons(Vec<f64>),
}

/// Moves every value by `step * sign(direction)`, staying inside `[0, 1]`
/// (or not moving further out when already outside). The result differs
/// from `x` by at most `step` in every value, exactly.
pub fn signed_step(x: &Tensor, direction: &[f64], step: f64) -> Tensor {
    let mut out = x.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(direction) {
        if g == 0.0 || step == 0.0 || g.is_nan() {
            continue;
        }
        let x0 = *v;
        let target = if g > 0.0 { x0 + step } else { x0 - step };
        let mut moved = target.clamp(x0.min(0.0), x0.max(1.0));
        // rounding in x0 +- step may overshoot by an ulp
        while (moved - x0).abs() > step {
            moved = if moved > x0 { moved.next_down() } else { moved.next_up() };
        }
        *v = moved;
    }
    out
}

/// `clamp(img + (epsilon / 255) * sign(d loss / d img))` for the
/// cross-entropy loss of `true_label` under a softmax network.
pub fn fgsm(net: &Network, img: &Tensor, true_label: usize, epsilon: f64) -> Result<Tensor, AttackError> {
    let Some(Head::Softmax(n)) = net.head() else {
        return Err(NnError::LossHeadMismatch {
            loss: Loss::CrossEntropy,
            head: net.head(),
        }
        .into());
    };
    if !(epsilon >= 0.0 && epsilon.is_finite()) || true_label >= n {
        return Err(AttackError::BadEpsilons(vec![epsilon]));
    }
    if epsilon == 0.0 {
        return Ok(img.clone());
    }
    let mut target = vec![0.0; n];
    target[true_label] = 1.0;
    let (_, _, grad) = net.loss_gradients(img, &target, Loss::CrossEntropy)?;
    Ok(signed_step(img, &grad, epsilon / 255.0))
}

/// Label-only access to a classifier, counting every query.
pub trait Oracle: Sync {
    fn classify(&self, x: &Tensor) -> Result<usize, AttackError>;
    fn queries(&self) -> usize;
}

/// Oracle backed by a local network (class with the largest output).
pub struct NetOracle {
    net: Network,
    count: AtomicUsize,
}

impl NetOracle {
    pub fn new(net: Network) -> Self {
        Self {
            net,
            count: AtomicUsize::new(0),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Oracle for NetOracle {
    fn classify(&self, x: &Tensor) -> Result<usize, AttackError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        Ok(argmax(&self.net.predict(x)?))
    }

    fn queries(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

/// Oracle backed by a closure.
pub struct FnOracle<F> {
    f: F,
    count: AtomicUsize,
}

impl<F: Fn(&Tensor) -> usize + Sync> FnOracle<F> {
    pub fn new(f: F) -> Self {
        Self {
            f,
            count: AtomicUsize::new(0),
        }
    }
}

impl<F: Fn(&Tensor) -> usize + Sync> Oracle for FnOracle<F> {
    fn classify(&self, x: &Tensor) -> Result<usize, AttackError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        Ok((self.f)(x))
    }

    fn queries(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteConfig {
    pub rounds: usize,
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for SubstituteConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            lambda: DEFAULT_LAMBDA,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteReport {
    /// Fraction of the round's training set on which the trained substitute
    /// agrees with the oracle, per round.
    pub agreement: Vec<f64>,
    pub set_sizes: Vec<usize>,
    pub oracle_queries: usize,
}

fn predicted(net: &Network, x: &Tensor) -> Result<usize, NnError> {
    Ok(argmax(&net.predict(x)?))
}

/// Trains `substitute` to mimic `oracle`. Each round labels the points added
/// since the last round (one query each), trains on everything labelled so
/// far, then doubles the set with `x + lambda * sign(d F_label / d x)`.
pub fn train_substitute(
    oracle: &dyn Oracle,
    seed_set: &[Tensor],
    substitute: Network,
    cfg: &SubstituteConfig,
) -> Result<(Network, SubstituteReport), AttackError> {
    if seed_set.is_empty() {
        return Err(AttackError::EmptySeedSet);
    }
    let classes = match substitute.head() {
        Some(Head::Softmax(n)) => n,
        head => {
            return Err(NnError::LossHeadMismatch {
                loss: Loss::CrossEntropy,
                head,
            }
            .into())
        }
    };
    let before = oracle.queries();
    let mut net = substitute;
    let mut points: Vec<Tensor> = seed_set.to_vec();
    let mut labels: Vec<usize> = Vec::new();
    let mut report = SubstituteReport {
        agreement: Vec::new(),
        set_sizes: Vec::new(),
        oracle_queries: 0,
    };
    for round in 0..=cfg.rounds {
        let fresh = points[labels.len()..]
            .par_iter()
            .map(|x| oracle.classify(x))
            .collect::<Result<Vec<_>, _>>()?;
        labels.extend(fresh);
        let data: Vec<Example> = points
            .iter()
            .zip(&labels)
            .map(|(x, &l)| {
                let mut target = vec![0.0; classes];
                target[l.min(classes - 1)] = 1.0;
                Example { input: x.clone(), target }
            })
            .collect();
        let train_cfg = TrainConfig {
            loss: Loss::CrossEntropy,
            seed: morphforge_core::seed::derive_seed(cfg.train.seed, "substitute", round as u64),
            ..cfg.train.clone()
        };
        train(&mut net, &data, &train_cfg)?;
        let agree = points
            .iter()
            .zip(&labels)
            .map(|(x, &l)| predicted(&net, x).map(|p| p == l))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|&ok| ok)
            .count();
        report.agreement.push(agree as f64 / points.len() as f64);
        report.set_sizes.push(points.len());
        if round < cfg.rounds {
            let added = points
                .par_iter()
                .zip(&labels)
                .map(|(x, &l)| {
                    let fwd = net.forward(x)?;
                    let mut probe = vec![0.0; classes];
                    probe[l.min(classes - 1)] = 1.0;
                    let (_, gx) = net.backward(&fwd, &probe)?;
                    Ok(signed_step(x, &gx, cfg.lambda))
                })
                .collect::<Result<Vec<_>, NnError>>()?;
            points.extend(added);
        }
    }
    report.oracle_queries = oracle.queries() - before;
    Ok((net, report))
}

/// Detected fraction of adversarial morphs per epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub points: Vec<(f64, f64)>,
    /// Morphs detected before the attack (the attacked population).
    pub attacked: usize,
    pub screened: usize,
}

impl RobustnessCurve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epsilon\tdetected\n");
        for (e, f) in &self.points {
            s.push_str(&format!("{e}\t{f}\n"));
        }
        s
    }
}

/// Screens `morphs` with one oracle query each, then for every epsilon crafts
/// FGSM examples on the substitute (away from the morph class) and queries
/// the oracle once per detected morph.
pub fn blackbox_attack(
    oracle: &dyn Oracle,
    substitute: &Network,
    morphs: &[Tensor],
    epsilons: &[f64],
) -> Result<RobustnessCurve, AttackError> {
    blackbox_attack_with(oracle, substitute, morphs, epsilons, |_, _, _| {})
}

/// [`blackbox_attack`] with a callback receiving `(epsilon, morph index,
/// adversarial image)` for every crafted example.
pub fn blackbox_attack_with(
    oracle: &dyn Oracle,
    substitute: &Network,
    morphs: &[Tensor],
    epsilons: &[f64],
    on_example: impl Fn(f64, usize, &Tensor) + Sync,
) -> Result<RobustnessCurve, AttackError> {
    let valid = epsilons.iter().all(|e| e.is_finite() && *e >= 0.0) && epsilons.windows(2).all(|w| w[0] < w[1]);
    if !valid {
        return Err(AttackError::BadEpsilons(epsilons.to_vec()));
    }
    let screen = morphs
        .par_iter()
        .map(|m| oracle.classify(m))
        .collect::<Result<Vec<_>, _>>()?;
    let kept: Vec<usize> = (0..morphs.len()).filter(|&i| screen[i] == MORPH_CLASS).collect();
    if kept.is_empty() {
        return Err(AttackError::NoCorrectlyDetectedMorphs);
    }
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let hits = kept
            .par_iter()
            .map(|&i| {
                let adv = fgsm(substitute, &morphs[i], MORPH_CLASS, eps)?;
                on_example(eps, i, &adv);
                Ok(oracle.classify(&adv)? == MORPH_CLASS)
            })
            .collect::<Result<Vec<bool>, AttackError>>()?;
        points.push((eps, hits.iter().filter(|&&h| h).count() as f64 / kept.len() as f64));
    }
    Ok(RobustnessCurve {
        points,
        attacked: kept.len(),
        screened: morphs.len(),
    })
}

/// Detected fraction of morphs under white-box FGSM against `net` itself.
pub fn whitebox_curve(net: &Network, morphs: &[Tensor], epsilons: &[f64]) -> Result<RobustnessCurve, AttackError> {
    let oracle = NetOracle::new(net.clone());
    blackbox_attack(&oracle, net, morphs, epsilons)
}

/// Convenience: binary examples from tensors and morph flags.
pub fn binary_examples(inputs: &[Tensor], is_morph: &[bool]) -> Vec<Example> {
    inputs
        .iter()
        .zip(is_morph)
        .map(|(x, &m)| Example {
            input: x.clone(),
            target: binary_target(m),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, Layer, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::new(vec![1, n, n], (0..n * n).map(|_| rng.random()).collect()).unwrap()
    }

    fn linear_net(w: [Vec<f64>; 2]) -> Network {
        let nin = w[0].len();
        Network::new(
            vec![nin],
            vec![
                Layer::Dense(Dense {
                    nin,
                    nout: 2,
                    weights: w.concat(),
                    bias: vec![0.1, -0.1],
                }),
                Layer::Softmax,
            ],
        )
        .unwrap()
    }

    #[test]
    fn fgsm_linear_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut w1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        w1[2] = w0[2];
        let net = linear_net([w0.clone(), w1.clone()]);
        let x = Tensor::vector(vec![0.3, 0.5, 0.7, 0.2, 0.9, 0.4]);
        let adv = fgsm(&net, &x, 1, 8.0).unwrap();
        let d = 8.0 / 255.0;
        for i in 0..6 {
            // loss of class 1 grows along w0 - w1; a sum that rounds past
            // the bound is pulled back one ulp toward the input
            let x0 = x.data()[i];
            let expect = if w0[i] == w1[i] {
                x0
            } else {
                let v = x0 + (w0[i] - w1[i]).signum() * d;
                if (v - x0).abs() > d {
                    if v > x0 { v.next_down() } else { v.next_up() }
                } else {
                    v
                }
            };
            assert_eq!(adv.data()[i], expect, "pixel {i}");
        }
        assert_eq!(fgsm(&net, &x, 1, 0.0).unwrap(), x);
    }

    #[test]
    fn fgsm_bound_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = Network::default_specs(1, 8, 1, 3, 6, Head::Softmax(2));
        let net = Network::from_specs(vec![1, 8, 8], &specs, &mut rng).unwrap();
        for _ in 0..50 {
            let x = image(&mut rng, 8);
            let eps = rng.random_range(0.0..20.0);
            let adv = fgsm(&net, &x, rng.random_range(0..2), eps).unwrap();
            for (a, b) in adv.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= eps / 255.0);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    fn toy_oracle() -> FnOracle<impl Fn(&Tensor) -> usize + Sync> {
        FnOracle::new(|x: &Tensor| (x.data().iter().sum::<f64>() / x.len() as f64 > 0.5) as usize)
    }

    fn toy_substitute(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::from_specs(
            vec![1, 6, 6],
            &[
                LayerSpec::Flatten,
                LayerSpec::Dense { nin: 36, nout: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { nin: 8, nout: 2 },
                LayerSpec::Softmax,
            ],
            &mut rng,
        )
        .unwrap()
    }

    fn toy_images(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let base: f64 = rng.random_range(0.2..0.8);
                Tensor::new(vec![1, 6, 6], (0..36).map(|_| (base + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect())
                    .unwrap()
            })
            .collect()
    }

    fn sub_cfg(rounds: usize) -> SubstituteConfig {
        SubstituteConfig {
            rounds,
            lambda: DEFAULT_LAMBDA,
            train: TrainConfig {
                lr: 0.1,
                epochs: 60,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn substitute_learns_the_toy_oracle() {
        let oracle = toy_oracle();
        let seeds = toy_images(100, 3);
        let (sub, report) = train_substitute(&oracle, &seeds, toy_substitute(4), &sub_cfg(3)).unwrap();
        assert_eq!(report.set_sizes, vec![100, 200, 400, 800]);
        assert_eq!(report.oracle_queries, 800);
        let probe = toy_images(200, 5);
        let agree = probe
            .iter()
            .filter(|x| predicted(&sub, x).unwrap() == oracle.classify(x).unwrap())
            .count();
        assert!(agree as f64 / 200.0 >= 0.95, "agreement {agree}/200 {report:?}");

        let (_, zero) = train_substitute(&oracle, &seeds, toy_substitute(4), &sub_cfg(0)).unwrap();
        assert_eq!(zero.set_sizes, vec![100]);
        assert_eq!(zero.oracle_queries, 100);
        assert!(matches!(
            train_substitute(&oracle, &[], toy_substitute(4), &sub_cfg(0)),
            Err(AttackError::EmptySeedSet)
        ));
    }

    #[test]
    fn self_oracle_agrees_at_round_zero() {
        let net = toy_substitute(6);
        let oracle = NetOracle::new(net.clone());
        let (_, report) = train_substitute(&oracle, &toy_images(30, 7), net, &sub_cfg(0)).unwrap();
        assert_eq!(report.agreement, vec![1.0]);
    }

    #[test]
    fn blackbox_protocol() {
        let oracle = toy_oracle();
        let (sub, _) = train_substitute(&oracle, &toy_images(40, 8), toy_substitute(9), &sub_cfg(2)).unwrap();
        let morphs: Vec<Tensor> = toy_images(60, 10);
        let detected = morphs.iter().filter(|m| oracle.classify(m).unwrap() == MORPH_CLASS).count();
        let before = oracle.queries();
        let eps = [0.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        let curve = blackbox_attack(&oracle, &sub, &morphs, &eps).unwrap();
        assert_eq!(oracle.queries() - before, morphs.len() + eps.len() * detected);
        assert_eq!(curve.points[0], (0.0, 1.0));
        assert!(curve.points.windows(2).all(|w| w[1].1 <= w[0].1), "{curve:?}");
        assert!(curve.points.last().unwrap().1 < 1.0);

        let mut zero = sub.clone();
        for l in &mut zero.layers {
            if let Some((w, b)) = l.params_mut() {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
        let flat = blackbox_attack(&oracle, &zero, &morphs, &eps).unwrap();
        assert!(flat.points.iter().all(|p| p.1 == 1.0));
        assert_eq!(blackbox_attack(&oracle, &sub, &morphs, &[0.0]).unwrap().points, vec![(0.0, 1.0)]);
        let genuine: Vec<Tensor> = morphs.iter().filter(|m| oracle.classify(m).unwrap() == GENUINE_CLASS).cloned().collect();
        assert!(matches!(
            blackbox_attack(&oracle, &sub, &genuine, &eps),
            Err(AttackError::NoCorrectlyDetectedMorphs)
        ));
        assert!(matches!(blackbox_attack(&oracle, &sub, &morphs, &[2.0, 1.0]), Err(AttackError::BadEpsilons(_))));
    }
}
