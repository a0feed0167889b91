//! Supervised rating baselines at fine (15-level) and coarse (5-band)
//! granularity, plus accuracy / macro-F1 / confusion evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_csv_with, write_json};
use crate::matrix::Matrix;
use crate::neural::{AdamState, DenseNet};
use crate::rng::{derive_indexed, derive_seed, Rng};
use crate::tabular::{BerLevel, CoarseLevel, BER_LEVELS, COARSE_LEVELS, N_COARSE, N_FINE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Fine,
    Coarse,
}

impl Granularity {
    pub fn n_classes(self) -> usize {
        match self {
            Granularity::Fine => N_FINE,
            Granularity::Coarse => N_COARSE,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Granularity::Fine => &BER_LEVELS,
            Granularity::Coarse => &COARSE_LEVELS,
        }
    }

    pub fn class_of(self, level: BerLevel) -> usize {
        match self {
            Granularity::Fine => level.ordinal(),
            Granularity::Coarse => coarsen(level).ordinal(),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fine" | "fine15" | "15" => Ok(Granularity::Fine),
            "coarse" | "coarse5" | "5" => Ok(Granularity::Coarse),
            _ => Err(Error::Config(format!("unknown granularity {s:?}"))),
        }
    }
}

/// Drop the numeric suffix; E1, E2, F and G collapse into EFG.
pub fn coarsen(level: BerLevel) -> CoarseLevel {
    level.coarse()
}

pub fn coarsen_labels(levels: &[BerLevel]) -> Vec<CoarseLevel> {
    levels.iter().map(|&l| coarsen(l)).collect()
}

/// Maps fine class indices onto coarse class indices.
pub fn coarsen_classes(fine: &[usize]) -> Vec<usize> {
    fine.iter()
        .map(|&c| coarsen(BerLevel::from_ordinal(c).expect("fine class index")).ordinal())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub granularity: Granularity,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_dims: vec![64, 64, 32],
            epochs: 15,
            batch_size: 16,
            learning_rate: 0.001,
            granularity: Granularity::Fine,
            seed: 0,
        }
    }
}

/// Mean softmax cross-entropy over rows and its gradient on the logits.
pub fn softmax_cross_entropy(logits: &Matrix, y: &[usize]) -> Result<(f64, Matrix)> {
    if logits.n_rows() != y.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.n_rows(), y.len())));
    }
    let n = y.len() as f64;
    let mut grad = Matrix::zeros(logits.n_rows(), logits.n_cols());
    let mut loss = 0.0;
    for (r, &cls) in y.iter().enumerate() {
        let z = logits.row(r);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[cls];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = ((z[c] - lse).exp() - f64::from(u8::from(c == cls))) / n;
        }
    }
    Ok((loss / n, grad))
}

pub fn train_classifier(config: &ClassifierConfig, x: &Matrix, y: &[usize]) -> Result<DenseNet> {
    let n_classes = config.granularity.n_classes();
    if x.n_rows() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.n_rows(), y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!(
            "label {bad} outside the {n_classes}-class range"
        )));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    let mut dims = vec![x.n_cols()];
    dims.extend(&config.hidden_dims);
    dims.push(n_classes);
    let mut net = DenseNet::mlp(&dims, &mut Rng::new(derive_seed(config.seed, "classifier/init")))?;
    let mut adam = AdamState::new(&net, config.learning_rate);
    let epoch_master = derive_seed(config.seed, "classifier/epoch");
    for epoch in 0..config.epochs {
        let mut rng = Rng::new(derive_indexed(epoch_master, epoch as u64));
        let mut order: Vec<usize> = (0..x.n_rows()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let pass = net.forward(&xb)?;
            let (loss, g) = softmax_cross_entropy(&pass.output, &yb)?;
            let (grads, _) = net.backward(&pass, &g)?;
            adam.step(&mut net, &grads)?;
            total += loss;
            count += 1;
        }
        log::info!("classifier epoch {}/{}: loss {:.5}", epoch + 1, config.epochs, total / count as f64);
    }
    Ok(net)
}

/// Arg-max class per row; ties go to the lower index.
pub fn predict_classes(net: &DenseNet, x: &Matrix) -> Result<Vec<usize>> {
    let out = net.predict(x)?;
    Ok(out
        .rows()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Rows are truth, columns prediction.
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub n_eval: usize,
}

/// Accuracy, per-class F1 (0 when undefined) and the unweighted mean over
/// all classes.
pub fn evaluate(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<EvalResult> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} truths for {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("class {bad} outside 0..{n_classes}")));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class_f1: Vec<f64> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let fp = (0..n_classes).map(|r| confusion[r][c]).sum::<usize>() as f64 - tp;
            let fn_ = confusion[c].iter().sum::<usize>() as f64 - tp;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 || tp == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / n_classes as f64;
    let class_names = match n_classes {
        N_FINE => Granularity::Fine.class_names().iter().map(|s| s.to_string()).collect(),
        N_COARSE => Granularity::Coarse.class_names().iter().map(|s| s.to_string()).collect(),
        _ => (0..n_classes).map(|c| c.to_string()).collect(),
    };
    Ok(EvalResult {
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1,
        per_class_f1,
        confusion,
        class_names,
        n_eval: truth.len(),
    })
}

impl EvalResult {
    /// Share of off-diagonal mass whose truth/prediction ordinals differ by at most `max_gap`.
    pub fn off_diagonal_within(&self, max_gap: usize) -> f64 {
        let mut off = 0usize;
        let mut near = 0usize;
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                if t != p {
                    off += c;
                    if t.abs_diff(p) <= max_gap {
                        near += c;
                    }
                }
            }
        }
        if off == 0 {
            1.0
        } else {
            near as f64 / off as f64
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Heatmap-ready confusion matrix: `truth,<pred classes...>`.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        write_csv_with(path, |w| {
            let mut header = vec!["truth".to_string()];
            header.extend(self.class_names.iter().cloned());
            w.write_record(&header)?;
            for (name, row) in self.class_names.iter().zip(&self.confusion) {
                let mut rec = vec![name.clone()];
                rec.extend(row.iter().map(|c| c.to_string()));
                w.write_record(&rec)?;
            }
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::max_relative_error;
    use crate::neural::{flat_params, set_flat_param};
    use crate::tabular::parse_ber;

    #[test]
    fn coarsen_examples() {
        assert_eq!(coarsen(parse_ber("B3").unwrap()), CoarseLevel::B);
        assert_eq!(coarsen(parse_ber("F").unwrap()), CoarseLevel::Efg);
        let mut seen: Vec<CoarseLevel> = BerLevel::all().map(coarsen).collect();
        seen.dedup();
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn perfect_predictions() {
        let e = evaluate(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.macro_f1, 1.0);
    }

    #[test]
    fn hand_computed_f1() {
        let e = evaluate(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert!((e.accuracy - 2.0 / 3.0).abs() < 1e-12);
        // class 0: P=1, R=1/2; class 1: P=1/2, R=1
        assert!((e.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((e.per_class_f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((e.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.confusion, vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let e = evaluate(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(e.per_class_f1, vec![1.0, 1.0, 0.0]);
        assert!((e.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_rows_sum_to_truth_counts() {
        let truth = [0, 2, 2, 1, 0, 2];
        let pred = [1, 2, 0, 1, 0, 2];
        let e = evaluate(&truth, &pred, 3).unwrap();
        for c in 0..3 {
            let n = truth.iter().filter(|&&t| t == c).count();
            assert_eq!(e.confusion[c].iter().sum::<usize>(), n);
        }
        assert!(evaluate(&[], &[], 2).is_err());
    }

    #[test]
    fn coarsened_predictions_never_lose_accuracy() {
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let truth: Vec<usize> = (0..40).map(|_| rng.below(15)).collect();
            let pred: Vec<usize> = truth
                .iter()
                .map(|&t| if rng.uniform() < 0.5 { t } else { (t + rng.below(3)).min(14) })
                .collect();
            let fine = evaluate(&truth, &pred, 15).unwrap();
            let coarse = evaluate(&coarsen_classes(&truth), &coarsen_classes(&pred), 5).unwrap();
            assert!(coarse.accuracy >= fine.accuracy);
        }
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let mut rng = Rng::new(14);
        let mut net = DenseNet::mlp(&[4, 6, 5, 3], &mut rng).unwrap();
        for l in net.layers_mut() {
            l.b.iter_mut().for_each(|b| *b = rng.uniform_range(-0.1, 0.1));
        }
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let y = [0, 2, 1, 1, 0];
        let pass = net.forward(&x).unwrap();
        let (_, g) = softmax_cross_entropy(&pass.output, &y).unwrap();
        let (grads, _) = net.backward(&pass, &g).unwrap();
        let base = flat_params(&net);
        let h = 1e-5;
        let numeric: Vec<f64> = (0..base.len())
            .map(|k| {
                let eval = |v: f64| {
                    let mut c = net.clone();
                    set_flat_param(&mut c, k, v);
                    softmax_cross_entropy(&c.predict(&x).unwrap(), &y).unwrap().0
                };
                (eval(base[k] + h) - eval(base[k] - h)) / (2.0 * h)
            })
            .collect();
        assert!(max_relative_error(&grads.flat(), &numeric) < 1e-4);
    }

    /// Least-squares one-vs-rest linear classifier used as a separability oracle.
    fn linear_oracle_accuracy(x: &Matrix, y: &[usize], k: usize) -> f64 {
        use nalgebra::{DMatrix, DVector};
        let n = x.n_rows();
        let d = x.n_cols() + 1;
        let a = DMatrix::from_fn(n, d, |r, c| if c == 0 { 1.0 } else { x.get(r, c - 1) });
        let ws: Vec<DVector<f64>> = (0..k)
            .map(|cls| {
                let t = DVector::from_fn(n, |r, _| if y[r] == cls { 1.0 } else { -1.0 });
                (a.transpose() * &a).lu().solve(&(a.transpose() * t)).unwrap()
            })
            .collect();
        let correct = (0..n)
            .filter(|&r| {
                let row = a.row(r).transpose();
                let scores: Vec<f64> = ws.iter().map(|w| w.dot(&row)).collect();
                let best = (0..k).max_by(|&i, &j| scores[i].total_cmp(&scores[j])).unwrap();
                best == y[r]
            })
            .count();
        correct as f64 / n as f64
    }

    fn blobs() -> (Matrix, Vec<usize>) {
        let mut rng = Rng::new(8);
        let centers = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            rows.push(vec![
                centers[c][0] + rng.uniform_range(-1.0, 1.0),
                centers[c][1] + rng.uniform_range(-1.0, 1.0),
            ]);
            y.push(c);
        }
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let (x, y) = blobs();
        assert_eq!(linear_oracle_accuracy(&x, &y, 3), 1.0);
        let config = ClassifierConfig {
            hidden_dims: vec![16],
            epochs: 20,
            granularity: Granularity::Coarse,
            seed: 2,
            ..ClassifierConfig::default()
        };
        let net = train_classifier(&config, &x, &y).unwrap();
        let e = evaluate(&y, &predict_classes(&net, &x).unwrap(), 5).unwrap();
        assert!(e.accuracy >= 0.99, "{}", e.accuracy);
        let again = train_classifier(&config, &x, &y).unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let (x, mut y) = blobs();
        y[0] = 5;
        let config = ClassifierConfig {
            granularity: Granularity::Coarse,
            ..ClassifierConfig::default()
        };
        assert!(train_classifier(&config, &x, &y).is_err());
    }

    #[test]
    fn off_diagonal_share() {
        let e = evaluate(&[0, 0, 5, 3], &[1, 5, 5, 3], 6).unwrap();
        assert_eq!(e.off_diagonal_within(2), 0.5);
    }
}
