//! Multinomial logistic regression over document vectors: softmax(Wx + b)
//! trained by mini-batch gradient descent with L2 regularization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{ParamStore, Tape, Tensor};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum MnlrError {
    #[error("no training examples")]
    Empty,
    #[error("feature/label count mismatch: {x} vectors vs {y} labels")]
    CountMismatch { x: usize, y: usize },
    #[error("vector {index} has dimension {got}, expected {want}")]
    DimMismatch {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MnlrConfig {
    pub l2: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop when the relative full-batch loss improvement stays below this
    /// for two consecutive epochs; non-positive disables early stopping.
    pub plateau_tol: f64,
    pub seed: u64,
}

impl Default for MnlrConfig {
    fn default() -> Self {
        MnlrConfig {
            l2: 1e-4,
            lr_start: 0.5,
            lr_end: 0.01,
            epochs: 120,
            batch_size: 64,
            plateau_tol: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MnlrModel {
    /// K×d weight matrix.
    pub w: Tensor,
    /// K biases.
    pub b: Tensor,
    pub classes: usize,
    pub dim: usize,
    /// Full-batch loss recorded once per epoch.
    pub loss_curve: Vec<f64>,
}

fn full_batch_loss(
    store: &ParamStore,
    ids: (crate::nncore::ParamId, crate::nncore::ParamId),
    x: &Tensor,
    y: &[usize],
    l2: f64,
) -> f64 {
    let mut tape = Tape::new();
    let w = store.leaf(&mut tape, ids.0);
    let b = store.leaf(&mut tape, ids.1);
    let xs = tape.input(x.clone());
    let logits = tape.matmul_t(xs, false, w, true);
    let logits = tape.add(logits, b);
    let ce = tape.cross_entropy(logits, y);
    let reg = tape.sum_squares(w);
    let reg = tape.scale(reg, l2);
    let total = tape.add(ce, reg);
    tape.value(total).item()
}

/// Trains on row vectors `x` with labels `y` in [0, classes).
pub fn train_mnlr(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    cfg: &MnlrConfig,
) -> Result<MnlrModel, MnlrError> {
    if x.is_empty() {
        return Err(MnlrError::Empty);
    }
    if x.len() != y.len() {
        return Err(MnlrError::CountMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    let dim = x[0].len();
    for (index, row) in x.iter().enumerate() {
        if row.len() != dim {
            return Err(MnlrError::DimMismatch {
                index,
                got: row.len(),
                want: dim,
            });
        }
    }
    if let Some(&label) = y.iter().find(|&&l| l >= classes) {
        return Err(MnlrError::LabelOutOfRange { label, classes });
    }

    let mut store = ParamStore::new();
    let w_id = store.register("mnlr.w", Tensor::zeros(&[classes, dim]));
    let b_id = store.register("mnlr.b", Tensor::zeros(&[classes]));

    let features = Tensor::from_rows(x);
    let n = x.len();
    let mut loss_curve: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut plateau_streak = 0;

    for epoch in 0..cfg.epochs {
        let lr =
            cfg.lr_start - (cfg.lr_start - cfg.lr_end) * (epoch as f64 / cfg.epochs.max(1) as f64);
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derived(cfg.seed, "mnlr.epoch", epoch as u64).shuffle(&mut order);
        // Once the rate has decayed, finish with full-batch steps: on the
        // convex objective these strictly descend, so the recorded loss
        // curve settles monotonically.
        let batch_size = if epoch >= cfg.epochs * 3 / 4 {
            n
        } else {
            cfg.batch_size
        };
        for batch in order.chunks(batch_size) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| x[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let w = store.leaf(&mut tape, w_id);
            let b = store.leaf(&mut tape, b_id);
            let xs = tape.input(Tensor::from_rows(&rows));
            let logits = tape.matmul_t(xs, false, w, true);
            let logits = tape.add(logits, b);
            let ce = tape.cross_entropy(logits, &labels);
            let reg = tape.sum_squares(w);
            let reg = tape.scale(reg, cfg.l2);
            let total = tape.add(ce, reg);
            if !tape.value(total).item().is_finite() {
                return Err(MnlrError::NonFiniteLoss { epoch });
            }
            let grads = tape.backward(total);
            store.zero_grads();
            store.accumulate(grads, 1.0);
            store
                .step(&crate::nncore::Optimizer::Sgd { lr })
                .expect("finite loss implies finite gradients");
        }
        let loss = full_batch_loss(&store, (w_id, b_id), &features, y, cfg.l2);
        if !loss.is_finite() {
            return Err(MnlrError::NonFiniteLoss { epoch });
        }
        if cfg.plateau_tol > 0.0 {
            if let Some(&prev) = loss_curve.last() {
                let improvement: f64 = (prev - loss) / prev.abs().max(1e-12);
                plateau_streak = if improvement < cfg.plateau_tol {
                    plateau_streak + 1
                } else {
                    0
                };
            }
        }
        loss_curve.push(loss);
        if plateau_streak >= 2 {
            break;
        }
    }

    Ok(MnlrModel {
        w: store.value(w_id).clone(),
        b: store.value(b_id).clone(),
        classes,
        dim,
        loss_curve,
    })
}

impl MnlrModel {
    /// softmax(Wx + b); ties in the argmax break toward the lowest index.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(
            x.len(),
            self.dim,
            "input dimension {} does not match model dimension {}",
            x.len(),
            self.dim
        );
        let mut logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                self.b.data()[c]
                    + self
                        .w
                        .row(c)
                        .iter()
                        .zip(x)
                        .map(|(&wv, &xv)| wv * xv)
                        .sum::<f64>()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in &mut logits {
            *l /= sum;
        }
        logits
    }

    pub fn predict_label(&self, x: &[f64]) -> usize {
        argmax(&self.predict(x))
    }
}

/// Index of the largest value; the first one wins on exact ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: (f64, f64), n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| vec![center.0 + rng.normal() * 0.3, center.1 + rng.normal() * 0.3])
            .collect()
    }

    #[test]
    fn separable_blobs_reach_high_training_accuracy() {
        let mut rng = Rng::new(1);
        let mut x = blob((-2.0, 0.0), 100, &mut rng);
        x.extend(blob((2.0, 0.0), 100, &mut rng));
        let y: Vec<usize> = (0..200).map(|i| usize::from(i >= 100)).collect();
        let model = train_mnlr(&x, &y, 2, &MnlrConfig::default()).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| model.predict_label(xi) == yi)
            .count();
        let acc = correct as f64 / 200.0;
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    /// Binary logistic regression trained by plain full-batch gradient
    /// descent; the independent oracle for the K=2 reduction.
    fn binary_lr(x: &[Vec<f64>], y: &[usize], epochs: usize, lr: f64) -> (Vec<f64>, f64) {
        let d = x[0].len();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (xi, &yi) in x.iter().zip(y) {
                let z: f64 = w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - yi as f64;
                for (g, &xv) in gw.iter_mut().zip(xi) {
                    *g += err * xv;
                }
                gb += err;
            }
            let n = x.len() as f64;
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= lr * g / n;
            }
            b -= lr * gb / n;
        }
        (w, b)
    }

    #[test]
    fn two_class_predictions_match_binary_logistic_regression() {
        let mut rng = Rng::new(5);
        let mut x = blob((-1.0, -0.5), 150, &mut rng);
        x.extend(blob((1.0, 0.8), 150, &mut rng));
        let y: Vec<usize> = (0..300).map(|i| usize::from(i >= 150)).collect();
        let cfg = MnlrConfig {
            l2: 0.0,
            ..MnlrConfig::default()
        };
        let model = train_mnlr(&x, &y, 2, &cfg).unwrap();
        let (w, b) = binary_lr(&x, &y, 2000, 0.5);
        let agree = x
            .iter()
            .filter(|xi| {
                let z: f64 = w.iter().zip(xi.iter()).map(|(a, c)| a * c).sum::<f64>() + b;
                let oracle = usize::from(z > 0.0);
                oracle == model.predict_label(xi)
            })
            .count();
        let rate = agree as f64 / x.len() as f64;
        assert!(rate >= 0.99, "agreement {rate}");
    }

    #[test]
    fn zero_inputs_learn_the_class_prior() {
        let x: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; 100];
        let y: Vec<usize> = (0..100).map(|i| usize::from(i >= 75)).collect();
        let model = train_mnlr(&x, &y, 2, &MnlrConfig::default()).unwrap();
        let p = model.predict(&[0.0, 0.0]);
        assert!((p[0] - 0.75).abs() < 0.02, "prior {p:?}");
        assert!((p[1] - 0.25).abs() < 0.02, "prior {p:?}");
    }

    #[test]
    fn fresh_model_predicts_uniform() {
        let model = MnlrModel {
            w: Tensor::zeros(&[4, 3]),
            b: Tensor::zeros(&[4]),
            classes: 4,
            dim: 3,
            loss_curve: Vec::new(),
        };
        let p = model.predict(&[0.3, -1.0, 2.0]);
        for v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = Rng::new(3);
        let model = MnlrModel {
            w: Tensor::randn(&[5, 4], 1.0, &mut rng),
            b: Tensor::randn(&[5], 1.0, &mut rng),
            classes: 5,
            dim: 4,
            loss_curve: Vec::new(),
        };
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal() * 3.0).collect();
            let p = model.predict(&x);
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn positive_scaling_never_changes_argmax_without_bias() {
        let mut rng = Rng::new(8);
        let model = MnlrModel {
            w: Tensor::randn(&[4, 3], 1.0, &mut rng),
            b: Tensor::zeros(&[4]),
            classes: 4,
            dim: 3,
            loss_curve: Vec::new(),
        };
        for _ in 0..30 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let base = model.predict_label(&x);
            for scale in [0.1, 2.0, 17.0] {
                let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
                assert_eq!(model.predict_label(&scaled), base);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let x = vec![vec![0.0, 1.0], vec![1.0]];
        let y = vec![0, 1];
        assert!(matches!(
            train_mnlr(&x, &y, 2, &MnlrConfig::default()),
            Err(MnlrError::DimMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn loss_curve_is_monotone_once_lr_is_small() {
        let mut rng = Rng::new(12);
        let mut x = blob((-1.5, 1.0), 120, &mut rng);
        x.extend(blob((1.5, -1.0), 120, &mut rng));
        x.extend(blob((0.0, 2.5), 120, &mut rng));
        let y: Vec<usize> = (0..360).map(|i| i / 120).collect();
        let model = train_mnlr(&x, &y, 3, &MnlrConfig::default()).unwrap();
        // Tail of the schedule: lr has decayed well below lr_start.
        let tail_start = model.loss_curve.len() * 3 / 4;
        let tail = &model.loss_curve[tail_start..];
        for pair in tail.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "loss increased in the decayed-lr regime: {pair:?}"
            );
        }
    }
}
