use serde::{Deserialize, Serialize};

use super::{Head, Network, NnError, Tensor};

/// Rates at one threshold. A sample is called a morph when its score is at
/// least the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    /// Genuine images classified genuine.
    pub tpr: f64,
    /// Morphs classified morph.
    pub tnr: f64,
}

impl SweepPoint {
    /// Morphs accepted as genuine.
    pub fn fpr(&self) -> f64 {
        1.0 - self.tnr
    }

    /// Genuine images rejected as morphs.
    pub fn fnr(&self) -> f64 {
        1.0 - self.tpr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Operating threshold for `true_positive_rate` / `true_negative_rate`.
    pub threshold: f64,
    pub true_positive_rate: f64,
    pub true_negative_rate: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub genuine: usize,
    pub morphs: usize,
    pub curve: Vec<SweepPoint>,
}

impl EvalReport {
    /// Tab-separated sweep table with a header row.
    pub fn curve_tsv(&self) -> String {
        let mut s = String::from("threshold\ttpr\ttnr\n");
        for p in &self.curve {
            s.push_str(&format!("{}\t{}\t{}\n", p.threshold, p.tpr, p.tnr));
        }
        s
    }
}

fn rates_at(scores: &[f64], is_morph: &[bool], t: f64, genuine: usize, morphs: usize) -> SweepPoint {
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &m) in scores.iter().zip(is_morph) {
        match (m, s >= t) {
            (false, false) => tp += 1,
            (true, true) => tn += 1,
            _ => {}
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    SweepPoint {
        threshold: t,
        tpr: frac(tp, genuine),
        tnr: frac(tn, morphs),
    }
}

/// Evaluates morph scores. Without explicit thresholds the sweep uses every
/// distinct score plus one threshold above all scores. The EER is read off
/// where `fpr - fnr` changes sign, interpolating linearly between the two
/// neighbouring sweep points.
pub fn evaluate_scores(
    scores: &[f64],
    is_morph: &[bool],
    thresholds: Option<&[f64]>,
    operating: f64,
) -> Result<EvalReport, NnError> {
    if scores.is_empty() || scores.len() != is_morph.len() {
        return Err(NnError::EmptyDataset);
    }
    let morphs = is_morph.iter().filter(|&&m| m).count();
    let genuine = is_morph.len() - morphs;
    let mut ts: Vec<f64> = match thresholds {
        Some(t) => t.to_vec(),
        None => {
            let mut t = scores.to_vec();
            let top = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            t.push(top + 1.0);
            t
        }
    };
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let curve: Vec<SweepPoint> = ts.iter().map(|&t| rates_at(scores, is_morph, t, genuine, morphs)).collect();

    let diff = |p: &SweepPoint| p.fpr() - p.fnr();
    let mut eer = None;
    for w in curve.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (da, db) = (diff(a), diff(b));
        if da == 0.0 {
            eer = Some((a.fpr(), a.threshold));
            break;
        }
        if db == 0.0 {
            eer = Some((b.fpr(), b.threshold));
            break;
        }
        if da < 0.0 && db > 0.0 {
            let lam = da / (da - db);
            let fpr = a.fpr() + lam * (b.fpr() - a.fpr());
            let fnr = a.fnr() + lam * (b.fnr() - a.fnr());
            eer = Some((0.5 * (fpr + fnr), a.threshold + lam * (b.threshold - a.threshold)));
            break;
        }
    }
    // no sign change: take the point with the smallest gap
    let (eer, eer_threshold) = eer.unwrap_or_else(|| {
        let p = curve
            .iter()
            .min_by(|a, b| diff(a).abs().total_cmp(&diff(b).abs()))
            .expect("sweep is non-empty");
        (0.5 * (p.fpr() + p.fnr()), p.threshold)
    });
    let op = rates_at(scores, is_morph, operating, genuine, morphs);
    Ok(EvalReport {
        threshold: operating,
        true_positive_rate: op.tpr,
        true_negative_rate: op.tnr,
        eer,
        eer_threshold,
        genuine,
        morphs,
        curve,
    })
}

impl Network {
    /// Morph score in `[0, 1]`: the class-1 probability of a two-class
    /// softmax head, or the largest output of a sigmoid head.
    pub fn morph_score(&self, x: &Tensor) -> Result<f64, NnError> {
        let out = self.predict(x)?;
        match self.head() {
            Some(Head::Softmax(2)) => Ok(out[1]),
            Some(Head::Sigmoid(_)) => Ok(out.iter().copied().fold(0.0, f64::max)),
            other => Err(NnError::ShapeMismatch(format!("cannot score with head {other:?}"))),
        }
    }
}

/// Scores every input and evaluates at threshold 0.5.
pub fn evaluate(net: &Network, inputs: &[Tensor], is_morph: &[bool], thresholds: Option<&[f64]>) -> Result<EvalReport, NnError> {
    let scores = inputs.iter().map(|x| net.morph_score(x)).collect::<Result<Vec<_>, _>>()?;
    evaluate_scores(&scores, is_morph, thresholds, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_scorer() {
        let r = evaluate_scores(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true], None, 0.5).unwrap();
        assert_eq!((r.true_positive_rate, r.true_negative_rate, r.eer), (1.0, 1.0, 0.0));
    }

    #[test]
    fn hand_computed_tables() {
        // t = 0.6: genuine {0.1, 0.4} pass, morphs {0.7, 0.9} caught, so
        // fpr = fnr = 1/3 exactly at a sweep point
        let scores = [0.1, 0.4, 0.6, 0.3, 0.7, 0.9];
        let labels = [false, false, false, true, true, true];
        let r = evaluate_scores(&scores, &labels, None, 0.5).unwrap();
        assert!((r.eer - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.eer_threshold, 0.6);
        assert!((r.true_positive_rate - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.true_negative_rate - 2.0 / 3.0).abs() < 1e-12);

        // fpr - fnr goes -0.25 (t = 0.2) -> +0.25 (t = 0.3); halfway both are 0.25
        let scores = [0.1, 0.2, 0.15, 0.3, 0.4, 0.5];
        let labels = [false, false, true, true, true, true];
        let r = evaluate_scores(&scores, &labels, None, 0.5).unwrap();
        assert!((r.eer - 0.25).abs() < 1e-12);
        assert!((r.eer_threshold - 0.25).abs() < 1e-12);
    }

    #[test]
    fn coin_flip_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let r = evaluate_scores(&scores, &labels, None, 0.5).unwrap();
        // binomial std of each rate is about 0.011
        assert!((r.eer - 0.5).abs() < 0.05, "{}", r.eer);
        assert!(r.curve.iter().all(|p| (0.0..=1.0).contains(&p.tpr) && (0.0..=1.0).contains(&p.tnr)));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(evaluate_scores(&[], &[], None, 0.5), Err(NnError::EmptyDataset)));
    }
}
