//! Central finite-difference comparison of backpropagated gradients.

use super::{Network, NnError, Tensor};

/// Relative error `|a - n| / max(|a| + |n|, floor)` over a whole parameter
/// tensor, using Euclidean norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `(layer index, weight error, bias error)` for each parameterized layer.
    pub params: Vec<(usize, f64, f64)>,
    pub input: f64,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|&(_, w, b)| [w, b])
            .fold(self.input, f64::max)
    }
}

/// Reads (and optionally overwrites) weight (`part` 0) or bias (`part` 1)
/// value `k` of layer `i`, returning the previous value.
fn param(net: &mut Network, i: usize, part: usize, k: usize, value: Option<f64>) -> f64 {
    let (w, b) = net.layers[i].params_mut().expect("parameterized layer");
    let slot = if part == 0 { &mut w[k] } else { &mut b[k] };
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

/// Checks the gradient of `L = sum_i probe_i * output_i` with respect to
/// every parameter and every input value.
pub fn gradient_check(net: &Network, x: &Tensor, probe: &[f64], h: f64) -> Result<GradCheck, NnError> {
    let fwd = net.forward(x)?;
    let (grads, gx) = net.backward(&fwd, probe)?;
    let objective = |n: &Network, x: &Tensor| -> Result<f64, NnError> {
        Ok(n.predict(x)?.iter().zip(probe).map(|(o, p)| o * p).sum())
    };
    let mut params = Vec::new();
    let mut work = net.clone();
    for (i, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let mut errs = [0.0; 2];
        for (part, analytic) in [&g.weights, &g.bias].into_iter().enumerate() {
            let mut numeric = Vec::with_capacity(analytic.len());
            for k in 0..analytic.len() {
                let orig = param(&mut work, i, part, k, None);
                param(&mut work, i, part, k, Some(orig + h));
                let up = objective(&work, x)?;
                param(&mut work, i, part, k, Some(orig - h));
                let down = objective(&work, x)?;
                param(&mut work, i, part, k, Some(orig));
                numeric.push((up - down) / (2.0 * h));
            }
            errs[part] = relative_error(analytic, &numeric);
        }
        params.push((i, errs[0], errs[1]));
    }
    let mut xs = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = xs.data()[k];
        xs.data_mut()[k] = orig + h;
        let up = objective(net, &xs)?;
        xs.data_mut()[k] = orig - h;
        let down = objective(net, &xs)?;
        xs.data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(GradCheck {
        params,
        input: relative_error(&gx, &numeric),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_layer_type_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nets = [
            (
                vec![2, 8, 8],
                vec![
                    LayerSpec::Conv { kernel: 3, stride: 1, cin: 2, cout: 3 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool,
                    LayerSpec::Conv { kernel: 3, stride: 2, cin: 3, cout: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { nin: 8, nout: 3 },
                    LayerSpec::Softmax,
                ],
            ),
            (
                vec![5],
                vec![
                    LayerSpec::Dense { nin: 5, nout: 4 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { nin: 4, nout: 4 },
                    LayerSpec::Sigmoid,
                ],
            ),
        ];
        for (shape, specs) in nets {
            let net = Network::from_specs(shape.clone(), &specs, &mut rng).unwrap();
            let n = shape.iter().product();
            let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let outs = net.predict(&x).unwrap().len();
            let probe: Vec<f64> = (0..outs).map(|_| rng.random_range(-1.0..1.0)).collect();
            let check = gradient_check(&net, &x, &probe, 1e-4).unwrap();
            assert!(check.max_error() < 1e-4, "{check:?}");
        }
    }
}
