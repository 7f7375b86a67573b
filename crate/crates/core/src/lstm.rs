//! Embedding → dropout → LSTM → softmax sentence classifier.
//!
//! PAD positions are skipped rather than processed: the recurrence only
//! runs over the first `true_length` ids, which makes logits independent of
//! padding by construction. Batches fan out one tape per example and reduce
//! gradients in example order, so training is reproducible bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{AdamConfig, NodeId, Optimizer, ParamId, ParamStore, Tape, Tensor};
use crate::par::par_map;
use crate::rng::{derive_seed, Rng};
use crate::vocab::EncodedSequence;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl LstmConfig {
    /// Dimensions from the source system: 100-wide embeddings over a
    /// ~6.9k-word vocabulary, 250-token inputs, and a hidden width chosen
    /// so the parameter count lands at ≈5.1M.
    pub fn paper_profile(vocab_size: usize, classes: usize, seed: u64) -> Self {
        LstmConfig {
            vocab_size,
            embed_dim: 100,
            hidden_dim: 1000,
            classes,
            dropout: 0.5,
            max_len: 250,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed,
        }
    }

    /// Minutes-scale profile for tests and experiments.
    pub fn desk_profile(vocab_size: usize, classes: usize, seed: u64) -> Self {
        LstmConfig {
            vocab_size,
            embed_dim: 100,
            hidden_dim: 64,
            classes,
            dropout: 0.5,
            max_len: 32,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed,
        }
    }
}

/// Closed-form parameter count:
/// V·d + 4·(d·h + h·h + h) + h·K + K.
pub fn param_count(cfg: &LstmConfig) -> usize {
    let (v, d, h, k) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.classes);
    v * d + 4 * (d * h + h * h + h) + h * k + k
}

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Optim(#[from] crate::nncore::OptimError),
}

/// Per-epoch train/valid loss and accuracy, the four learning curves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurves {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub valid_acc: Vec<f64>,
}

impl LearningCurves {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,valid_loss,valid_acc\n");
        for e in 0..self.epochs() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                e + 1,
                self.train_loss[e],
                self.train_acc[e],
                self.valid_loss[e],
                self.valid_acc[e]
            ));
        }
        out
    }
}

pub struct LstmClassifier {
    pub config: LstmConfig,
    store: ParamStore,
    embedding: ParamId,
    w: [ParamId; 4],
    u: [ParamId; 4],
    b: [ParamId; 4],
    head_w: ParamId,
    head_b: ParamId,
}

const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

impl LstmClassifier {
    pub fn new(config: LstmConfig) -> Self {
        let mut rng = Rng::derived(config.seed, "lstm.init", 0);
        let (v, d, h, k) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.classes,
        );
        let mut store = ParamStore::new();
        let embedding = store.register("embedding", Tensor::randn(&[v, d], 0.1, &mut rng));
        let bound = 1.0 / (h as f64).sqrt();
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for name in GATE_NAMES {
            w.push(store.register(
                &format!("w_{name}"),
                Tensor::rand_uniform(&[d, h], bound, &mut rng),
            ));
            u.push(store.register(
                &format!("u_{name}"),
                Tensor::rand_uniform(&[h, h], bound, &mut rng),
            ));
            // Forget gate bias starts at 1 so early training retains memory.
            let init = if name == "f" { 1.0 } else { 0.0 };
            let mut bias = Tensor::zeros(&[h]);
            bias.fill(init);
            b.push(store.register(&format!("b_{name}"), bias));
        }
        let head_bound = (6.0 / (h + k) as f64).sqrt();
        let head_w = store.register(
            "head_w",
            Tensor::rand_uniform(&[h, k], head_bound, &mut rng),
        );
        let head_b = store.register("head_b", Tensor::zeros(&[k]));
        LstmClassifier {
            config,
            store,
            embedding,
            w: [w[0], w[1], w[2], w[3]],
            u: [u[0], u[1], u[2], u[3]],
            b: [b[0], b[1], b[2], b[3]],
            head_w,
            head_b,
        }
    }

    /// Total trainable scalars; equals `param_count(&self.config)`.
    pub fn actual_param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Builds the forward graph for one sequence and returns the logits
    /// node. An empty sentence classifies from the initial (zero) state.
    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        seq: &EncodedSequence,
        train: bool,
        dropout_rng: &mut Rng,
    ) -> NodeId {
        let cfg = &self.config;
        assert_eq!(
            seq.ids.len(),
            cfg.max_len,
            "sequence length {} does not match configured max_len {}",
            seq.ids.len(),
            cfg.max_len
        );
        let content = &seq.ids[..seq.true_length];
        for &id in content {
            assert!(
                id < cfg.vocab_size,
                "token id {id} out of range for vocab size {}",
                cfg.vocab_size
            );
        }
        let head_w = self.store.leaf(tape, self.head_w);
        let head_b = self.store.leaf(tape, self.head_b);

        let mut h = tape.input(Tensor::zeros(&[1, cfg.hidden_dim]));
        if !content.is_empty() {
            let table = self.store.leaf(tape, self.embedding);
            let w: Vec<NodeId> = self.w.iter().map(|&p| self.store.leaf(tape, p)).collect();
            let u: Vec<NodeId> = self.u.iter().map(|&p| self.store.leaf(tape, p)).collect();
            let b: Vec<NodeId> = self.b.iter().map(|&p| self.store.leaf(tape, p)).collect();
            let embedded = tape.embedding_lookup(table, content);
            let embedded = tape.dropout(embedded, cfg.dropout, train, dropout_rng);
            let mut c = tape.input(Tensor::zeros(&[1, cfg.hidden_dim]));
            for t in 0..content.len() {
                let x = tape.slice_rows(embedded, t, t + 1);
                let (h2, c2) = cell_step(tape, x, h, c, &w, &u, &b);
                h = h2;
                c = c2;
            }
        }
        let logits = tape.matmul(h, head_w);
        tape.add(logits, head_b)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict(&self, seq: &EncodedSequence) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let logits = self.logits_on_tape(&mut tape, seq, false, &mut rng);
        let probs = tape.softmax(logits, 1);
        tape.value(probs).data().to_vec()
    }

    /// Batch prediction, parallel when the `parallel` feature is on.
    pub fn predict_batch(&self, seqs: &[EncodedSequence]) -> Vec<Vec<f64>> {
        par_map(seqs, |s| self.predict(s))
    }

    /// Always-sequential batch prediction (benchmark reference).
    pub fn predict_batch_seq(&self, seqs: &[EncodedSequence]) -> Vec<Vec<f64>> {
        crate::par::seq_map(seqs, |s| self.predict(s))
    }

    /// Mean loss and accuracy over a labeled split, evaluation mode.
    pub fn evaluate_split(&self, data: &[(EncodedSequence, usize)]) -> (f64, f64) {
        let results = par_map(data, |(seq, label)| {
            let mut tape = Tape::new();
            let mut rng = Rng::new(0);
            let logits = self.logits_on_tape(&mut tape, seq, false, &mut rng);
            let loss = tape.cross_entropy(logits, &[*label]);
            let loss_v = tape.value(loss).item();
            let pred = crate::mnlr::argmax(tape.value(logits).data());
            (loss_v, pred == *label)
        });
        let n = data.len().max(1) as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
        let acc = results.iter().filter(|(_, ok)| *ok).count() as f64 / n;
        (loss, acc)
    }

    /// Trains for `config.epochs` epochs, recording the four learning
    /// curves per epoch, and finishes on the best-validation-accuracy
    /// snapshot (earliest epoch wins ties).
    pub fn train(
        &mut self,
        train: &[(EncodedSequence, usize)],
        valid: &[(EncodedSequence, usize)],
    ) -> Result<LearningCurves, LstmError> {
        if train.is_empty() {
            return Err(LstmError::EmptySplit("train"));
        }
        if valid.is_empty() {
            return Err(LstmError::EmptySplit("valid"));
        }
        let cfg = self.config.clone();
        let opt = Optimizer::Adam(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        let mut curves = LearningCurves::default();
        let mut best: Option<(f64, Vec<Tensor>)> = None;

        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            Rng::derived(cfg.seed, "lstm.shuffle", epoch as u64).shuffle(&mut order);
            let drop_seed = derive_seed(cfg.seed, "lstm.dropout", epoch as u64);

            for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
                let per_example = par_map(batch, |&i| {
                    let (seq, label) = &train[i];
                    let mut tape = Tape::new();
                    let mut rng = Rng::new(derive_seed(drop_seed, "ex", i as u64));
                    let logits = self.logits_on_tape(&mut tape, seq, true, &mut rng);
                    let loss = tape.cross_entropy(logits, &[*label]);
                    let value = tape.value(loss).item();
                    (value, tape.backward(loss))
                });
                self.store.zero_grads();
                let scale = 1.0 / batch.len() as f64;
                for (value, grads) in per_example {
                    if !value.is_finite() {
                        return Err(LstmError::NonFiniteLoss {
                            epoch,
                            batch: batch_idx,
                        });
                    }
                    self.store.accumulate(grads, scale);
                }
                self.store.step(&opt)?;
            }

            let (tl, ta) = self.evaluate_split(train);
            let (vl, va) = self.evaluate_split(valid);
            curves.train_loss.push(tl);
            curves.train_acc.push(ta);
            curves.valid_loss.push(vl);
            curves.valid_acc.push(va);
            if best.as_ref().is_none_or(|(acc, _)| va > *acc) {
                best = Some((va, self.store.snapshot()));
            }
        }

        if let Some((_, snapshot)) = best {
            self.store.restore(&snapshot);
        }
        Ok(curves)
    }
}

/// One gated update:
/// i = σ(xWᵢ + hUᵢ + bᵢ), f = σ(…), g = tanh(…), o = σ(…),
/// c' = f⊙c + i⊙g, h' = o⊙tanh(c').
pub fn cell_step(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    w: &[NodeId],
    u: &[NodeId],
    b: &[NodeId],
) -> (NodeId, NodeId) {
    let pre = |tape: &mut Tape, gate: usize| {
        let xs = tape.matmul(x, w[gate]);
        let hs = tape.matmul(h, u[gate]);
        let s = tape.add(xs, hs);
        tape.add(s, b[gate])
    };
    let pi = pre(tape, 0);
    let pf = pre(tape, 1);
    let pg = pre(tape, 2);
    let po = pre(tape, 3);
    let i = tape.sigmoid(pi);
    let f = tape.sigmoid(pf);
    let g = tape.tanh(pg);
    let o = tape.sigmoid(po);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c2 = tape.add(fc, ig);
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc);
    (h2, c2)
}

/// Finite-difference check through a chain of `steps` cell updates;
/// returns the worst relative error.
pub fn gradient_check_cell_chain(steps: usize, seed: u64) -> f64 {
    use crate::nncore::{grad_check, GradCheckOptions};
    let (d, h) = (3usize, 4usize);
    let mut rng = Rng::new(seed);
    let mut params = Vec::new();
    for _ in 0..4 {
        params.push(Tensor::randn(&[d, h], 0.4, &mut rng)); // W
    }
    for _ in 0..4 {
        params.push(Tensor::randn(&[h, h], 0.4, &mut rng)); // U
    }
    for _ in 0..4 {
        params.push(Tensor::randn(&[h], 0.2, &mut rng)); // b
    }
    params.push(Tensor::randn(&[steps, d], 0.8, &mut rng)); // inputs
    let result = grad_check(
        move |tape, leaves| {
            let w = &leaves[0..4];
            let u = &leaves[4..8];
            let b = &leaves[8..12];
            let xs = leaves[12];
            let mut hstate = tape.input(Tensor::zeros(&[1, h]));
            let mut cstate = tape.input(Tensor::zeros(&[1, h]));
            for t in 0..steps {
                let x = tape.slice_rows(xs, t, t + 1);
                let (h2, c2) = cell_step(tape, x, hstate, cstate, w, u, b);
                hstate = h2;
                cstate = c2;
            }
            tape.sum_squares(hstate)
        },
        &params,
        &GradCheckOptions {
            max_coords: 120,
            seed,
            ..GradCheckOptions::default()
        },
    );
    result.max_rel_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::PAD;

    fn tiny_config() -> LstmConfig {
        LstmConfig {
            vocab_size: 12,
            embed_dim: 5,
            hidden_dim: 7,
            classes: 3,
            dropout: 0.5,
            max_len: 6,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            seed: 5,
        }
    }

    fn seq(ids: &[usize], max_len: usize) -> EncodedSequence {
        let mut v = ids.to_vec();
        let true_length = v.len();
        v.resize(max_len, PAD);
        EncodedSequence {
            ids: v,
            true_length,
        }
    }

    #[test]
    fn closed_form_param_count_paper_profile() {
        let cfg = LstmConfig {
            vocab_size: 6873,
            embed_dim: 100,
            hidden_dim: 1000,
            classes: 10,
            ..tiny_config()
        };
        assert_eq!(param_count(&cfg), 5_101_310);
    }

    #[test]
    fn closed_form_param_count_hand_example() {
        let cfg = LstmConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            classes: 2,
            ..tiny_config()
        };
        assert_eq!(param_count(&cfg), 17);
    }

    #[test]
    fn doubling_hidden_roughly_quadruples_recurrent_term() {
        let base = tiny_config();
        let mut doubled = base.clone();
        doubled.hidden_dim *= 2;
        let recurrent = |c: &LstmConfig| 4 * c.hidden_dim * c.hidden_dim;
        assert_eq!(recurrent(&doubled), 4 * recurrent(&base));
    }

    #[test]
    fn built_model_matches_closed_form() {
        let cfg = tiny_config();
        let model = LstmClassifier::new(cfg.clone());
        assert_eq!(model.actual_param_count(), param_count(&cfg));
    }

    #[test]
    fn zero_weights_and_state_give_zero_outputs() {
        let mut tape = Tape::new();
        let (d, h) = (3, 4);
        let zeros2 = |tape: &mut Tape, r, c| tape.input(Tensor::zeros(&[r, c]));
        let x = zeros2(&mut tape, 1, d);
        let hs = zeros2(&mut tape, 1, h);
        let cs = zeros2(&mut tape, 1, h);
        let w: Vec<NodeId> = (0..4).map(|_| zeros2(&mut tape, d, h)).collect();
        let u: Vec<NodeId> = (0..4).map(|_| zeros2(&mut tape, h, h)).collect();
        let b: Vec<NodeId> = (0..4).map(|_| tape.input(Tensor::zeros(&[h]))).collect();
        let (h2, c2) = cell_step(&mut tape, x, hs, cs, &w, &u, &b);
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_saturation_bounds_hold() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let (d, h) = (4, 6);
        let x = tape.input(Tensor::randn(&[1, d], 3.0, &mut rng));
        let hs = tape.input(Tensor::randn(&[1, h], 3.0, &mut rng));
        let c0 = Tensor::randn(&[1, h], 3.0, &mut rng);
        let cs = tape.input(c0.clone());
        let w: Vec<NodeId> = (0..4)
            .map(|_| {
                let t = Tensor::randn(&[d, h], 2.0, &mut rng);
                tape.input(t)
            })
            .collect();
        let u: Vec<NodeId> = (0..4)
            .map(|_| {
                let t = Tensor::randn(&[h, h], 2.0, &mut rng);
                tape.input(t)
            })
            .collect();
        let b: Vec<NodeId> = (0..4)
            .map(|_| {
                let t = Tensor::randn(&[h], 2.0, &mut rng);
                tape.input(t)
            })
            .collect();
        let (h2, c2) = cell_step(&mut tape, x, hs, cs, &w, &u, &b);
        for &v in tape.value(h2).data() {
            assert!(v.abs() <= 1.0, "|h'| = {v}");
        }
        for (i, &v) in tape.value(c2).data().iter().enumerate() {
            let bound = c0.data()[i].abs() + 1.0;
            assert!(v.abs() < bound, "c' {v} outside ±{bound}");
        }
    }

    #[test]
    fn chained_cell_gradient_passes_finite_differences() {
        let err = gradient_check_cell_chain(5, 31);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn positions_beyond_true_length_never_affect_logits() {
        let model = LstmClassifier::new(tiny_config());
        let a = seq(&[5, 7, 9], 6);
        let mut b = a.clone();
        // Same content and true_length, arbitrary ids in the padded tail.
        b.ids[3] = 11;
        b.ids[4] = 2;
        b.ids[5] = 10;
        assert_eq!(model.predict(&a), model.predict(&b));
    }

    #[test]
    fn empty_sentence_is_classified_from_initial_state() {
        let model = LstmClassifier::new(tiny_config());
        let e = seq(&[], 6);
        let p = model.predict(&e);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|v| v.is_finite()));
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = LstmClassifier::new(tiny_config());
        let s = seq(&[1, 2, 3, 4], 6);
        assert_eq!(model.predict(&s), model.predict(&s));
    }

    #[test]
    fn curves_have_one_entry_per_epoch_and_training_is_reproducible() {
        let cfg = tiny_config();
        let data: Vec<(EncodedSequence, usize)> = (0..12)
            .map(|i| (seq(&[5 + (i % 3), 8], 6), i % 3))
            .collect();
        let mut m1 = LstmClassifier::new(cfg.clone());
        let c1 = m1.train(&data, &data).unwrap();
        assert_eq!(c1.epochs(), cfg.epochs);
        assert_eq!(c1.valid_acc.len(), cfg.epochs);
        let mut m2 = LstmClassifier::new(cfg.clone());
        let c2 = m2.train(&data, &data).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1.store().snapshot(), m2.store().snapshot());
    }

    #[test]
    fn small_subset_overfits_to_perfect_accuracy() {
        use crate::synthgen::{generate_corpus, GeneratorConfig, TemplateSet};
        use crate::vocab::Vocabulary;
        let mut gen = GeneratorConfig::default_profile(3);
        gen.total_size = 50;
        let mut ds = generate_corpus(&gen, &TemplateSet::bundled()).unwrap();
        ds.normalize();
        let vocab = Vocabulary::build(&ds, 1);
        let mut cfg = tiny_config();
        cfg.vocab_size = vocab.size();
        cfg.embed_dim = 16;
        cfg.hidden_dim = 24;
        cfg.classes = ds.class_count;
        cfg.max_len = 16;
        cfg.epochs = 50;
        cfg.dropout = 0.2;
        let data: Vec<(EncodedSequence, usize)> = ds
            .records
            .iter()
            .map(|r| (vocab.encode(&r.tokens, 16, false).unwrap(), r.label))
            .collect();
        let mut model = LstmClassifier::new(cfg);
        model.train(&data, &data).unwrap();
        let (_, acc) = model.evaluate_split(&data);
        assert!((acc - 1.0).abs() < 1e-12, "train accuracy {acc}");
    }

    #[test]
    fn curves_csv_schema() {
        let curves = LearningCurves {
            train_loss: vec![1.0, 0.5],
            train_acc: vec![0.4, 0.8],
            valid_loss: vec![1.1, 0.7],
            valid_acc: vec![0.3, 0.7],
        };
        let csv = curves.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,train_acc,valid_loss,valid_acc"
        );
        assert_eq!(csv.lines().count(), 3);
    }
}
