//! Lexical overlap features and the calibrated linear judge.
//!
//! The linear judge scores a tuple `(q, r, s?, t)` from four similarity
//! features, fits a max-margin separator on them, and maps raw margins to
//! probabilities with a sigmoid calibration fitted on held-out data.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalTuple;
use crate::metrics;
use crate::tape::sigmoid;

#[derive(Debug, Error)]
pub enum LexicalError {
    #[error("training data contains a single class (label {0})")]
    SingleClass(u8),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed model file: {0}")]
    Parse(String),
}

/// Lowercases `text` and splits it on maximal runs of non-alphanumeric
/// characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_set(text: &str) -> HashSet<String> {
    tokenize(text).into_iter().collect()
}

/// Dice overlap of the token sets of `a` and `b`; 0 when both are empty.
pub fn sim_text(a: &str, b: &str) -> f64 {
    let ta = token_set(a);
    let tb = token_set(b);
    let denom = ta.len() + tb.len();
    if denom == 0 {
        return 0.0;
    }
    let inter = ta.intersection(&tb).count();
    2.0 * inter as f64 / denom as f64
}

fn normalize_ws_lower(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// 1 when the short answer occurs inside the reference (case-insensitive,
/// whitespace-normalised), 0 otherwise or when there is no short answer.
pub fn sim_token(short_answer: Option<&str>, reference: &str) -> u8 {
    match short_answer {
        Some(s) => {
            let s = normalize_ws_lower(s);
            if s.is_empty() {
                return 0;
            }
            u8::from(normalize_ws_lower(reference).contains(&s))
        }
        None => 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// sim_token(s, r)
    pub x1: u8,
    /// sim_text(r, t)
    pub x2: f64,
    /// sim_text(r, q)
    pub x3: f64,
    /// sim_text(q, t)
    pub x4: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; 4] {
        [f64::from(self.x1), self.x2, self.x3, self.x4]
    }
}

pub fn featurize(question: &str, reference: &str, short_answer: Option<&str>, candidate: &str) -> FeatureVector {
    FeatureVector {
        x1: sim_token(short_answer, reference),
        x2: sim_text(reference, candidate),
        x3: sim_text(reference, question),
        x4: sim_text(question, candidate),
    }
}

fn tuple_features(t: &EvalTuple) -> [f64; 4] {
    featurize(&t.question, &t.reference, t.short_answer.as_deref(), &t.candidate).as_array()
}

/// Sigmoid calibration `p = 1 / (1 + exp(a·f + b))` over raw margins `f`.
/// `a <= 0` keeps the map non-decreasing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattCalibration {
    pub a: f64,
    pub b: f64,
}

impl PlattCalibration {
    pub fn apply(&self, raw: f64) -> f64 {
        sigmoid(-(self.a * raw + self.b))
    }

    /// Newton fit with the regularised targets of Lin, Lin and Weng (2007).
    pub fn fit(scores: &[f64], labels: &[u8]) -> Self {
        let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let n_neg = labels.len() as f64 - n_pos;
        let hi = (n_pos + 1.0) / (n_pos + 2.0);
        let lo = 1.0 / (n_neg + 2.0);
        let targets: Vec<f64> = labels.iter().map(|&l| if l == 1 { hi } else { lo }).collect();

        let max_iter = 100;
        let min_step = 1e-10;
        let sigma = 1e-12;
        let mut a = 0.0;
        let mut b = ((n_neg + 1.0) / (n_pos + 1.0)).ln();

        let objective = |a: f64, b: f64| -> f64 {
            scores
                .iter()
                .zip(&targets)
                .map(|(&f, &t)| {
                    let fapb = f * a + b;
                    if fapb >= 0.0 {
                        t * fapb + (-fapb).exp().ln_1p()
                    } else {
                        (t - 1.0) * fapb + fapb.exp().ln_1p()
                    }
                })
                .sum()
        };
        let mut fval = objective(a, b);

        for _ in 0..max_iter {
            let (mut h11, mut h22, mut h21, mut g1, mut g2) = (sigma, sigma, 0.0, 0.0, 0.0);
            for (&f, &t) in scores.iter().zip(&targets) {
                let fapb = f * a + b;
                let (p, q) = if fapb >= 0.0 {
                    let e = (-fapb).exp();
                    (e / (1.0 + e), 1.0 / (1.0 + e))
                } else {
                    let e = fapb.exp();
                    (1.0 / (1.0 + e), e / (1.0 + e))
                };
                let d2 = p * q;
                h11 += f * f * d2;
                h22 += d2;
                h21 += f * d2;
                let d1 = t - p;
                g1 += f * d1;
                g2 += d1;
            }
            if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
                break;
            }
            let det = h11 * h22 - h21 * h21;
            let da = -(h22 * g1 - h21 * g2) / det;
            let db = -(-h21 * g1 + h11 * g2) / det;
            let gd = g1 * da + g2 * db;
            let mut step = 1.0;
            while step >= min_step {
                let (na, nb) = (a + step * da, b + step * db);
                let nf = objective(na, nb);
                if nf < fval + 1e-4 * step * gd {
                    a = na;
                    b = nb;
                    fval = nf;
                    break;
                }
                step /= 2.0;
            }
            if step < min_step {
                break;
            }
        }

        if a > 0.0 {
            // Anti-correlated margins: fall back to the base rate so the map
            // stays monotone.
            a = 0.0;
            b = ((n_neg + 1.0) / (n_pos + 1.0)).ln();
        }
        Self { a, b }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: [f64; 4],
    pub bias: f64,
    pub calibration: PlattCalibration,
    /// Decision threshold on the calibrated score.
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearTrainConfig {
    /// Soft-margin penalty.
    pub c: f64,
    pub max_passes: usize,
    pub tolerance: f64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        Self { c: 1.0, max_passes: 1000, tolerance: 1e-6 }
    }
}

impl LinearModel {
    pub fn raw_score(&self, features: &FeatureVector) -> f64 {
        let x = features.as_array();
        x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }

    pub fn score(&self, features: &FeatureVector) -> f64 {
        self.calibration.apply(self.raw_score(features))
    }

    /// Calibrated score and the decision `score > alpha`.
    pub fn predict(&self, question: &str, reference: &str, short_answer: Option<&str>, candidate: &str) -> (f64, u8) {
        let p = self.score(&featurize(question, reference, short_answer, candidate));
        (p, u8::from(p > self.alpha))
    }

    pub fn save(&self, path: &Path) -> Result<(), LexicalError> {
        std::fs::write(path, self.to_string()).map_err(|source| LexicalError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, LexicalError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexicalError::Io { path: path.display().to_string(), source })?;
        text.parse()
    }
}

impl fmt::Display for LinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = &self.weights;
        writeln!(f, "w = {:?} {:?} {:?} {:?}", w[0], w[1], w[2], w[3])?;
        writeln!(f, "bias = {:?}", self.bias)?;
        writeln!(f, "calibration.a = {:?}", self.calibration.a)?;
        writeln!(f, "calibration.b = {:?}", self.calibration.b)?;
        writeln!(f, "alpha = {:?}", self.alpha)
    }
}

impl std::str::FromStr for LinearModel {
    type Err = LexicalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut weights = None;
        let (mut bias, mut a, mut b, mut alpha) = (None, None, None, None);
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| LexicalError::Parse(format!("{v:?}: {e}")));
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line.split_once('=').ok_or_else(|| LexicalError::Parse(format!("expected key = value, got {line:?}")))?;
            match key.trim() {
                "w" => {
                    let parts = value.split_whitespace().map(num).collect::<Result<Vec<_>, _>>()?;
                    let arr: [f64; 4] = parts.try_into().map_err(|_| LexicalError::Parse("w needs 4 values".into()))?;
                    weights = Some(arr);
                }
                "bias" => bias = Some(num(value)?),
                "calibration.a" => a = Some(num(value)?),
                "calibration.b" => b = Some(num(value)?),
                "alpha" => alpha = Some(num(value)?),
                other => return Err(LexicalError::Parse(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| LexicalError::Parse(format!("missing {k}"));
        Ok(Self {
            weights: weights.ok_or_else(|| missing("w"))?,
            bias: bias.ok_or_else(|| missing("bias"))?,
            calibration: PlattCalibration { a: a.ok_or_else(|| missing("calibration.a"))?, b: b.ok_or_else(|| missing("calibration.b"))? },
            alpha: alpha.ok_or_else(|| missing("alpha"))?,
        })
    }
}

/// Dual coordinate descent for the L2-regularised hinge-loss SVM. The bias is
/// a constant extra feature, so it is regularised along with the weights.
fn fit_svm(xs: &[[f64; 4]], ys: &[f64], cfg: &LinearTrainConfig) -> ([f64; 4], f64) {
    const BIAS_FEATURE: f64 = 1.0;
    let n = xs.len();
    let aug = |x: &[f64; 4]| [x[0], x[1], x[2], x[3], BIAS_FEATURE];
    let data: Vec<[f64; 5]> = xs.iter().map(aug).collect();
    let qdiag: Vec<f64> = data.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
    let mut alpha = vec![0.0; n];
    let mut w = [0.0; 5];

    for _ in 0..cfg.max_passes {
        let mut max_pg: f64 = f64::NEG_INFINITY;
        let mut min_pg: f64 = f64::INFINITY;
        for i in 0..n {
            let x = &data[i];
            let g = ys[i] * x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg);
            min_pg = min_pg.min(pg);
            if pg.abs() > 1e-12 && qdiag[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qdiag[i]).clamp(0.0, cfg.c);
                let delta = (alpha[i] - old) * ys[i];
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj += delta * xj;
                }
            }
        }
        if max_pg - min_pg < cfg.tolerance {
            break;
        }
    }
    ([w[0], w[1], w[2], w[3]], w[4] * BIAS_FEATURE)
}

/// Chooses the threshold on calibrated dev scores that maximises F1.
/// Candidates are midpoints between consecutive distinct scores plus 0.5;
/// ties go to the candidate nearest 0.5.
fn select_alpha(scores: &[f64], labels: &[u8]) -> f64 {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![0.5];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.retain(|&a| a > 0.0 && a < 1.0);

    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for &a in &candidates {
        let decisions: Vec<u8> = scores.iter().map(|&s| u8::from(s > a)).collect();
        let f1 = metrics::precision_recall_f1(&decisions, labels).map(|p| p.f1).unwrap_or(0.0);
        let better = f1 > best.0 + 1e-12 || ((f1 - best.0).abs() <= 1e-12 && (a - 0.5).abs() < (best.1 - 0.5).abs());
        if better {
            best = (f1, a);
        }
    }
    best.1
}

/// Trains the linear judge on `train`, then fits the calibration and picks
/// the decision threshold on `dev`.
pub fn train_linear(train: &[EvalTuple], dev: &[EvalTuple]) -> Result<LinearModel, LexicalError> {
    train_linear_with(train, dev, &LinearTrainConfig::default())
}

pub fn train_linear_with(train: &[EvalTuple], dev: &[EvalTuple], cfg: &LinearTrainConfig) -> Result<LinearModel, LexicalError> {
    if train.is_empty() {
        return Err(LexicalError::Empty("training"));
    }
    if dev.is_empty() {
        return Err(LexicalError::Empty("development"));
    }
    let first = train[0].label;
    if train.iter().all(|t| t.label == first) {
        return Err(LexicalError::SingleClass(first));
    }
    let xs: Vec<[f64; 4]> = train.iter().map(tuple_features).collect();
    if xs.iter().all(|x| x == &xs[0]) {
        return Err(LexicalError::Degenerate("all training feature vectors are identical".into()));
    }
    let ys: Vec<f64> = train.iter().map(|t| if t.label == 1 { 1.0 } else { -1.0 }).collect();
    let (weights, bias) = fit_svm(&xs, &ys, cfg);
    if weights.iter().all(|&w| w == 0.0) {
        return Err(LexicalError::Degenerate("separator has zero weights".into()));
    }

    let mut model = LinearModel { weights, bias, calibration: PlattCalibration { a: -1.0, b: 0.0 }, alpha: 0.5 };
    let dev_raw: Vec<f64> = dev.iter().map(|t| model.raw_score(&featurize(&t.question, &t.reference, t.short_answer.as_deref(), &t.candidate))).collect();
    let dev_labels: Vec<u8> = dev.iter().map(|t| t.label).collect();
    model.calibration = PlattCalibration::fit(&dev_raw, &dev_labels);
    let dev_scores: Vec<f64> = dev_raw.iter().map(|&r| model.calibration.apply(r)).collect();
    model.alpha = select_alpha(&dev_scores, &dev_labels);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("George W. Bush"), vec!["george", "w", "bush"]);
        assert_eq!(tokenize("39 million people!"), vec!["39", "million", "people"]);
    }

    #[test]
    fn sim_text_examples() {
        assert_eq!(sim_text("the cat sat", "the cat sat"), 1.0);
        assert_eq!(sim_text("alpha beta", "gamma delta"), 0.0);
        // {a,b,c} ∩ {b,c,d} = {b,c}: 2*2/(3+3)
        assert!((sim_text("a b c", "b c d") - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(sim_text("", ""), 0.0);
        assert_eq!(sim_text("a a", "a"), 1.0);
    }

    #[test]
    fn sim_token_examples() {
        assert_eq!(sim_token(Some("39 million"), "With slightly more than 39 million people"), 1);
        assert_eq!(sim_token(None, "anything"), 0);
        assert_eq!(sim_token(Some("george h w bush"), "president george w bush said"), 0);
        assert_eq!(sim_token(Some("39   Million"), "about 39 million\tpeople"), 1);
    }

    #[test]
    fn featurize_extremes() {
        let f = featurize("same words", "same words", Some("same words"), "same words");
        assert_eq!(f.as_array(), [1.0, 1.0, 1.0, 1.0]);
        let f = featurize("alpha", "beta", None, "gamma");
        assert_eq!(f.as_array(), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn calibration_is_monotone_and_recovers_direction() {
        let scores = [-2.0, -1.0, -0.5, 0.2, 0.8, 1.5, 2.5, -0.1];
        let labels = [0, 0, 0, 1, 1, 1, 1, 0];
        let cal = PlattCalibration::fit(&scores, &labels);
        assert!(cal.a < 0.0);
        assert!(cal.apply(2.0) > 0.5 && cal.apply(-2.0) < 0.5);

        // Anti-correlated scores collapse to a constant map.
        let flipped = PlattCalibration::fit(&scores, &[1, 1, 1, 0, 0, 0, 0, 1]);
        assert_eq!(flipped.a, 0.0);
    }

    #[test]
    fn score_equal_to_alpha_is_rejected() {
        let model = LinearModel { weights: [0.0, 1.0, 0.0, 0.0], bias: 0.0, calibration: PlattCalibration { a: -1.0, b: 0.0 }, alpha: 0.5 };
        // Disjoint r and t: raw 0 → calibrated exactly 0.5.
        let (p, d) = model.predict("q", "alpha", None, "beta");
        assert_eq!(p, 0.5);
        assert_eq!(d, 0);
    }

    #[test]
    fn model_text_round_trip() {
        let model = LinearModel { weights: [0.1, 2.5, -0.3, 1e-9], bias: -0.75, calibration: PlattCalibration { a: -3.25, b: 0.125 }, alpha: 0.41 };
        let parsed: LinearModel = model.to_string().parse().unwrap();
        assert_eq!(parsed, model);
        assert!("w = 1 2 3\nbias = 0".parse::<LinearModel>().is_err());
    }

    fn tuple(q: &str, r: &str, t: &str, label: u8) -> EvalTuple {
        EvalTuple { qid: "q".into(), question: q.into(), reference: r.into(), short_answer: None, candidate: t.into(), label }
    }

    #[test]
    fn training_rejects_single_class_and_degenerate_data() {
        let pos = vec![tuple("a", "b c", "b c", 1), tuple("d", "e f", "e f", 1)];
        assert!(matches!(train_linear(&pos, &pos), Err(LexicalError::SingleClass(1))));
        let same = vec![tuple("a", "b", "c", 1), tuple("a", "b", "c", 0)];
        assert!(matches!(train_linear(&same, &same), Err(LexicalError::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn sim_text_symmetric_and_bounded(a in "[a-d ]{0,12}", b in "[a-d ]{0,12}") {
            let s = sim_text(&a, &b);
            prop_assert_eq!(s, sim_text(&b, &a));
            prop_assert!((0.0..=1.0).contains(&s));
            let equal_sets = token_set(&a) == token_set(&b) && !token_set(&a).is_empty();
            prop_assert_eq!(s == 1.0, equal_sets);
        }

        #[test]
        fn calibration_monotone(a in -10.0f64..0.0, b in -5.0f64..5.0, x in -20.0f64..20.0, dx in 0.0f64..10.0) {
            let cal = PlattCalibration { a, b };
            prop_assert!(cal.apply(x) <= cal.apply(x + dx));
        }

        #[test]
        fn raising_alpha_never_creates_acceptances(score in 0.0f64..1.0, lo in 0.0f64..1.0, delta in 0.0f64..1.0) {
            let hi = lo + delta;
            prop_assert!(u8::from(score > hi) <= u8::from(score > lo));
        }
    }
}
