//! Small transformer encoder with masked-language-model pretraining and
//! classification fine-tuning.
//!
//! Post-layer-norm residual blocks, learned positional embeddings, GELU
//! feed-forward, CLS pooling for classification. Sequences are processed
//! over their true length only, so positions past `true_length` can never
//! influence the outputs; the attention mask argument exists for callers
//! that want explicit column masking instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{AdamConfig, NodeId, Optimizer, ParamId, ParamStore, Tape, Tensor};
use crate::par::par_map;
use crate::rng::{derive_seed, Rng};
use crate::vocab::{EncodedSequence, CLS, PAD, SEP, SPECIALS};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub classes: usize,
    pub dropout: f64,
    pub mask_rate: f64,
    /// Runtime sequence length; at most `max_positions`.
    pub max_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Learning-rate multiplier for the classifier head during fine-tuning.
    pub head_lr_mult: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale encoder: 4 layers, 4 heads, width 128, feed-forward 512,
    /// 64 positions, dropout 0.1, mask rate 0.15.
    pub fn desk_profile(vocab_size: usize, classes: usize, seed: u64) -> Self {
        EncoderConfig {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ff_dim: 512,
            max_positions: 64,
            vocab_size,
            classes,
            dropout: 0.1,
            mask_rate: 0.15,
            max_len: 32,
            pretrain_epochs: 10,
            pretrain_lr: 1e-3,
            finetune_epochs: 3,
            finetune_lr: 1e-3,
            head_lr_mult: 10.0,
            batch_size: 32,
            seed,
        }
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("model_dim {dim} not divisible by {heads} heads")]
    BadHeads { dim: usize, heads: usize },
    #[error("no maskable positions in sequence")]
    NoMaskablePositions,
    #[error("empty {0} corpus")]
    Empty(&'static str),
    #[error("checkpoint is not pretrained")]
    NotPretrained,
    #[error("checkpoint is not fine-tuned")]
    NotFineTuned,
    #[error("class count mismatch: model {model}, data {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Optim(#[from] crate::nncore::OptimError),
}

/// Where a checkpoint came from, mirrored into serialized checkpoints.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Provenance {
    pub pretrained: bool,
    pub finetuned: bool,
}

struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

pub struct Encoder {
    pub config: EncoderConfig,
    pub provenance: Provenance,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerParams>,
    mlm_w: ParamId,
    mlm_b: ParamId,
    cls_w: Option<ParamId>,
    cls_b: Option<ParamId>,
}

const LN_EPS: f64 = 1e-5;

/// Linear warmup over the first tenth of the schedule, then linear decay
/// to a tenth of the peak rate.
fn scheduled_lr(peak: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1) as f64;
    let warmup = (total / 10.0).max(1.0);
    let s = step as f64;
    if s < warmup {
        peak * (s + 1.0) / warmup
    } else {
        let progress = (s - warmup) / (total - warmup).max(1.0);
        peak * (1.0 - 0.9 * progress)
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self, TransformerError> {
        if !config.model_dim.is_multiple_of(config.heads) {
            return Err(TransformerError::BadHeads {
                dim: config.model_dim,
                heads: config.heads,
            });
        }
        assert!(
            config.max_len <= config.max_positions,
            "max_len {} exceeds max_positions {}",
            config.max_len,
            config.max_positions
        );
        let mut rng = Rng::derived(config.seed, "encoder.init", 0);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let std = 0.02;
        let mat = |store: &mut ParamStore, name: String, shape: &[usize], rng: &mut Rng| {
            store.register(&name, Tensor::randn(shape, std, rng))
        };
        let zeros = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.register(&name, Tensor::zeros(shape))
        };
        let ones = |store: &mut ParamStore, name: String, n: usize| {
            let mut t = Tensor::zeros(&[n]);
            t.fill(1.0);
            store.register(&name, t)
        };

        let tok_emb = mat(
            &mut store,
            "tok_emb".into(),
            &[config.vocab_size, d],
            &mut rng,
        );
        let pos_emb = mat(
            &mut store,
            "pos_emb".into(),
            &[config.max_positions, d],
            &mut rng,
        );
        let emb_ln_g = ones(&mut store, "emb_ln_g".into(), d);
        let emb_ln_b = zeros(&mut store, "emb_ln_b".into(), &[d]);

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                wq: mat(&mut store, p("wq"), &[d, d], &mut rng),
                bq: zeros(&mut store, p("bq"), &[d]),
                wk: mat(&mut store, p("wk"), &[d, d], &mut rng),
                bk: zeros(&mut store, p("bk"), &[d]),
                wv: mat(&mut store, p("wv"), &[d, d], &mut rng),
                bv: zeros(&mut store, p("bv"), &[d]),
                wo: mat(&mut store, p("wo"), &[d, d], &mut rng),
                bo: zeros(&mut store, p("bo"), &[d]),
                ln1_g: ones(&mut store, p("ln1_g"), d),
                ln1_b: zeros(&mut store, p("ln1_b"), &[d]),
                ff1_w: mat(&mut store, p("ff1_w"), &[d, config.ff_dim], &mut rng),
                ff1_b: zeros(&mut store, p("ff1_b"), &[config.ff_dim]),
                ff2_w: mat(&mut store, p("ff2_w"), &[config.ff_dim, d], &mut rng),
                ff2_b: zeros(&mut store, p("ff2_b"), &[d]),
                ln2_g: ones(&mut store, p("ln2_g"), d),
                ln2_b: zeros(&mut store, p("ln2_b"), &[d]),
            });
        }
        let mlm_w = mat(
            &mut store,
            "mlm_w".into(),
            &[d, config.vocab_size],
            &mut rng,
        );
        let mlm_b = zeros(&mut store, "mlm_b".into(), &[config.vocab_size]);

        Ok(Encoder {
            config,
            provenance: Provenance::default(),
            store,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            mlm_w,
            mlm_b,
            cls_w: None,
            cls_b: None,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_classifier_head(&self) -> bool {
        self.cls_w.is_some()
    }

    /// Registers the classification head if absent (seeded).
    pub fn ensure_classifier_head(&mut self) {
        if self.cls_w.is_none() {
            let mut rng = Rng::derived(self.config.seed, "encoder.cls_head", 0);
            let d = self.config.model_dim;
            let k = self.config.classes;
            self.cls_w = Some(
                self.store
                    .register("cls_w", Tensor::randn(&[d, k], 0.02, &mut rng)),
            );
            self.cls_b = Some(self.store.register("cls_b", Tensor::zeros(&[k])));
        }
    }

    /// Encoder stack over the first `true_length` ids; returns [T, d_m].
    fn encode_on_tape(&self, tape: &mut Tape, ids: &[usize], train: bool, rng: &mut Rng) -> NodeId {
        let cfg = &self.config;
        assert!(!ids.is_empty(), "cannot encode an empty sequence");
        assert!(
            ids.len() <= cfg.max_positions,
            "sequence of {} tokens exceeds {} positions",
            ids.len(),
            cfg.max_positions
        );
        let t = ids.len();
        let tok = self.store.leaf(tape, self.tok_emb);
        let pos = self.store.leaf(tape, self.pos_emb);
        let tok_rows = tape.embedding_lookup(tok, ids);
        let pos_rows = tape.gather_rows(pos, (0..t).collect());
        let summed = tape.add(tok_rows, pos_rows);
        let g = self.store.leaf(tape, self.emb_ln_g);
        let b = self.store.leaf(tape, self.emb_ln_b);
        let normed = tape.layer_norm(summed, g, b, LN_EPS);
        let mut x = tape.dropout(normed, cfg.dropout, train, rng);

        for layer in &self.layers {
            x = self.layer_on_tape(tape, x, layer, train, rng, None);
        }
        x
    }

    /// One encoder block: multi-head self-attention with optional column
    /// mask, residual + layer norm, GELU feed-forward, residual + layer
    /// norm. `mask[j] = true` hides position j from every query.
    fn layer_on_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        layer: &LayerParams,
        train: bool,
        rng: &mut Rng,
        mask: Option<&[bool]>,
    ) -> NodeId {
        let cfg = &self.config;
        let dk = cfg.head_dim();
        let leaf = |tape: &mut Tape, id: ParamId| self.store.leaf(tape, id);

        let proj = |tape: &mut Tape, x: NodeId, w: ParamId, b: ParamId| {
            let wn = self.store.leaf(tape, w);
            let bn = self.store.leaf(tape, b);
            let m = tape.matmul(x, wn);
            tape.add(m, bn)
        };
        let q = proj(tape, x, layer.wq, layer.bq);
        let k = proj(tape, x, layer.wk, layer.bk);
        let v = proj(tape, x, layer.wv, layer.bv);

        let mask_node = mask.map(|m| {
            let row: Vec<f64> = m.iter().map(|&h| if h { -1e30 } else { 0.0 }).collect();
            tape.input(Tensor::new(vec![row.len()], row))
        });

        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (from, to) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            let scores = tape.matmul_t(qh, false, kh, true);
            let mut scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
            if let Some(mn) = mask_node {
                scaled = tape.add(scaled, mn);
            }
            let probs = tape.softmax(scaled, 1);
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat(&heads, 1);
        let projected = proj(tape, ctx, layer.wo, layer.bo);
        let dropped = tape.dropout(projected, cfg.dropout, train, rng);
        let res1 = tape.add(x, dropped);
        let g1 = leaf(tape, layer.ln1_g);
        let b1 = leaf(tape, layer.ln1_b);
        let normed1 = tape.layer_norm(res1, g1, b1, LN_EPS);

        let ff_in = proj(tape, normed1, layer.ff1_w, layer.ff1_b);
        let act = tape.gelu(ff_in);
        let ff_out = proj(tape, act, layer.ff2_w, layer.ff2_b);
        let ff_drop = tape.dropout(ff_out, cfg.dropout, train, rng);
        let res2 = tape.add(normed1, ff_drop);
        let g2 = leaf(tape, layer.ln2_g);
        let b2 = leaf(tape, layer.ln2_b);
        tape.layer_norm(res2, g2, b2, LN_EPS)
    }

    /// MLM logits for the listed target positions of one corrupted
    /// sequence: [targets, V].
    fn mlm_logits_on_tape(
        &self,
        tape: &mut Tape,
        corrupted: &[usize],
        positions: &[usize],
        train: bool,
        rng: &mut Rng,
    ) -> NodeId {
        let hidden = self.encode_on_tape(tape, corrupted, train, rng);
        let picked = tape.gather_rows(hidden, positions.to_vec());
        let w = self.store.leaf(tape, self.mlm_w);
        let b = self.store.leaf(tape, self.mlm_b);
        let logits = tape.matmul(picked, w);
        tape.add(logits, b)
    }

    fn classifier_logits_on_tape(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        train: bool,
        rng: &mut Rng,
    ) -> NodeId {
        let hidden = self.encode_on_tape(tape, ids, train, rng);
        let cls = tape.slice_rows(hidden, 0, 1);
        let w = self
            .store
            .leaf(tape, self.cls_w.expect("classifier head registered"));
        let b = self
            .store
            .leaf(tape, self.cls_b.expect("classifier head registered"));
        let logits = tape.matmul(cls, w);
        tape.add(logits, b)
    }

    /// Masked-LM pretraining over unlabeled encoded sequences. Returns the
    /// per-epoch mean loss curve and tags the checkpoint as pretrained.
    pub fn pretrain_mlm(
        &mut self,
        corpus: &[EncodedSequence],
    ) -> Result<Vec<f64>, TransformerError> {
        if corpus.is_empty() {
            return Err(TransformerError::Empty("pretraining"));
        }
        let cfg = self.config.clone();
        self.store.reset_optimizer_state();
        let total_steps = cfg.pretrain_epochs * corpus.len().div_ceil(cfg.batch_size);
        let mut step = 0usize;
        let mut curve = Vec::with_capacity(cfg.pretrain_epochs);
        for epoch in 0..cfg.pretrain_epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            Rng::derived(cfg.seed, "mlm.shuffle", epoch as u64).shuffle(&mut order);
            let epoch_seed = derive_seed(cfg.seed, "mlm.epoch", epoch as u64);
            let mut total = 0.0;
            let mut seen = 0usize;
            for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
                let opt = Optimizer::Adam(AdamConfig {
                    lr: scheduled_lr(cfg.pretrain_lr, step, total_steps),
                    ..AdamConfig::default()
                });
                step += 1;
                let per_example = par_map(batch, |&i| {
                    let seq = &corpus[i];
                    let mask_seed = derive_seed(epoch_seed, "mask", i as u64);
                    let masked = mlm_mask(seq, cfg.mask_rate, cfg.vocab_size, mask_seed).ok()?;
                    if masked.positions.is_empty() {
                        return None;
                    }
                    let mut tape = Tape::new();
                    let mut rng = Rng::new(derive_seed(epoch_seed, "dropout", i as u64));
                    let trimmed = &masked.corrupted[..seq.true_length];
                    let logits = self.mlm_logits_on_tape(
                        &mut tape,
                        trimmed,
                        &masked.positions,
                        true,
                        &mut rng,
                    );
                    let loss = tape.cross_entropy(logits, &masked.targets);
                    let value = tape.value(loss).item();
                    Some((value, tape.backward(loss)))
                });
                self.store.zero_grads();
                let useful: Vec<_> = per_example.into_iter().flatten().collect();
                if useful.is_empty() {
                    continue;
                }
                let scale = 1.0 / useful.len() as f64;
                for (value, grads) in useful {
                    if !value.is_finite() {
                        return Err(TransformerError::NonFiniteLoss {
                            epoch,
                            batch: batch_idx,
                        });
                    }
                    total += value;
                    seen += 1;
                    self.store.accumulate(grads, scale);
                }
                self.store.step(&opt)?;
            }
            curve.push(total / seen.max(1) as f64);
        }
        self.provenance.pretrained = true;
        Ok(curve)
    }

    /// Fine-tunes a pretrained encoder for classification. Requires a
    /// pretrained checkpoint; `train_classifier` is the unchecked variant
    /// used for from-scratch ablations.
    pub fn finetune(
        &mut self,
        train: &[(EncodedSequence, usize)],
        valid: &[(EncodedSequence, usize)],
        freeze_encoder: bool,
    ) -> Result<crate::lstm::LearningCurves, TransformerError> {
        if !self.provenance.pretrained {
            return Err(TransformerError::NotPretrained);
        }
        self.train_classifier(train, valid, freeze_encoder)
    }

    /// Classification training loop (used by `finetune` and by from-scratch
    /// baselines). Records the four learning curves and restores the
    /// best-validation-accuracy snapshot.
    pub fn train_classifier(
        &mut self,
        train: &[(EncodedSequence, usize)],
        valid: &[(EncodedSequence, usize)],
        freeze_encoder: bool,
    ) -> Result<crate::lstm::LearningCurves, TransformerError> {
        if train.is_empty() {
            return Err(TransformerError::Empty("train"));
        }
        if valid.is_empty() {
            return Err(TransformerError::Empty("valid"));
        }
        if let Some((_, &label)) = train
            .iter()
            .chain(valid)
            .map(|(s, l)| (s, l))
            .find(|(_, &l)| l >= self.config.classes)
        {
            return Err(TransformerError::ClassMismatch {
                model: self.config.classes,
                data: label + 1,
            });
        }
        self.ensure_classifier_head();
        self.store.reset_optimizer_state();
        let cfg = self.config.clone();
        let head_ids = [self.cls_w.unwrap(), self.cls_b.unwrap()];
        for id in head_ids {
            self.store.set_lr_mult(id, cfg.head_lr_mult);
        }
        let total_steps = cfg.finetune_epochs * train.len().div_ceil(cfg.batch_size);
        let mut step = 0usize;
        let mut curves = crate::lstm::LearningCurves::default();
        let mut best: Option<(f64, Vec<Tensor>)> = None;

        for epoch in 0..cfg.finetune_epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            Rng::derived(cfg.seed, "finetune.shuffle", epoch as u64).shuffle(&mut order);
            let epoch_seed = derive_seed(cfg.seed, "finetune.epoch", epoch as u64);
            for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
                let opt = Optimizer::Adam(AdamConfig {
                    lr: scheduled_lr(cfg.finetune_lr, step, total_steps),
                    ..AdamConfig::default()
                });
                step += 1;
                let per_example = par_map(batch, |&i| {
                    let (seq, label) = &train[i];
                    let mut tape = Tape::new();
                    let mut rng = Rng::new(derive_seed(epoch_seed, "dropout", i as u64));
                    let trimmed = &seq.ids[..seq.true_length];
                    let logits = self.classifier_logits_on_tape(&mut tape, trimmed, true, &mut rng);
                    let loss = tape.cross_entropy(logits, &[*label]);
                    let value = tape.value(loss).item();
                    (value, tape.backward(loss))
                });
                self.store.zero_grads();
                let scale = 1.0 / batch.len() as f64;
                for (value, mut grads) in per_example {
                    if !value.is_finite() {
                        return Err(TransformerError::NonFiniteLoss {
                            epoch,
                            batch: batch_idx,
                        });
                    }
                    if freeze_encoder {
                        grads.retain(|(pid, _)| head_ids.contains(pid));
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
        self.provenance.finetuned = true;
        Ok(curves)
    }

    /// Class probabilities from the CLS representation, evaluation mode.
    pub fn predict(&self, seq: &EncodedSequence) -> Result<Vec<f64>, TransformerError> {
        if !self.provenance.finetuned || self.cls_w.is_none() {
            return Err(TransformerError::NotFineTuned);
        }
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let trimmed = &seq.ids[..seq.true_length];
        let logits = self.classifier_logits_on_tape(&mut tape, trimmed, false, &mut rng);
        let probs = tape.softmax(logits, 1);
        Ok(tape.value(probs).data().to_vec())
    }

    pub fn predict_batch(
        &self,
        seqs: &[EncodedSequence],
    ) -> Result<Vec<Vec<f64>>, TransformerError> {
        if !self.provenance.finetuned || self.cls_w.is_none() {
            return Err(TransformerError::NotFineTuned);
        }
        Ok(par_map(seqs, |s| {
            self.predict(s).expect("head checked above")
        }))
    }

    pub fn predict_batch_seq(
        &self,
        seqs: &[EncodedSequence],
    ) -> Result<Vec<Vec<f64>>, TransformerError> {
        if !self.provenance.finetuned || self.cls_w.is_none() {
            return Err(TransformerError::NotFineTuned);
        }
        Ok(crate::par::seq_map(seqs, |s| {
            self.predict(s).expect("head checked above")
        }))
    }

    /// Mean MLM loss over a corpus without updating weights (evaluation
    /// mode, seeded masking).
    pub fn evaluate_mlm(&self, corpus: &[EncodedSequence], seed: u64) -> f64 {
        let cfg = &self.config;
        let indexed: Vec<(usize, &EncodedSequence)> = corpus.iter().enumerate().collect();
        let results = par_map(&indexed, |&(i, seq)| {
            let masked = mlm_mask(
                seq,
                cfg.mask_rate,
                cfg.vocab_size,
                derive_seed(seed, "mlm.eval", i as u64),
            )
            .ok()?;
            if masked.positions.is_empty() {
                return None;
            }
            let mut tape = Tape::new();
            let mut rng = Rng::new(0);
            let trimmed = &masked.corrupted[..seq.true_length];
            let logits =
                self.mlm_logits_on_tape(&mut tape, trimmed, &masked.positions, false, &mut rng);
            let loss = tape.cross_entropy(logits, &masked.targets);
            Some(tape.value(loss).item())
        });
        let useful: Vec<f64> = results.into_iter().flatten().collect();
        useful.iter().sum::<f64>() / useful.len().max(1) as f64
    }

    /// Per-head attention probability matrices of one layer in evaluation
    /// mode; diagnostic surface for the row-stochasticity and masking
    /// checks. `mask[j] = true` hides position j as a key.
    pub fn attention_probabilities(
        &self,
        ids: &[usize],
        layer_index: usize,
        mask: Option<&[bool]>,
    ) -> Vec<Tensor> {
        assert!(
            layer_index < self.layers.len(),
            "layer {layer_index} out of range"
        );
        let cfg = &self.config;
        let dk = cfg.head_dim();
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut x = {
            let t = ids.len();
            let tok = self.store.leaf(&mut tape, self.tok_emb);
            let pos = self.store.leaf(&mut tape, self.pos_emb);
            let tok_rows = tape.embedding_lookup(tok, ids);
            let pos_rows = tape.gather_rows(pos, (0..t).collect());
            let summed = tape.add(tok_rows, pos_rows);
            let g = self.store.leaf(&mut tape, self.emb_ln_g);
            let b = self.store.leaf(&mut tape, self.emb_ln_b);
            tape.layer_norm(summed, g, b, LN_EPS)
        };
        for layer in &self.layers[..layer_index] {
            x = self.layer_on_tape(&mut tape, x, layer, false, &mut rng, mask);
        }
        let layer = &self.layers[layer_index];
        let proj = |tape: &mut Tape, x: NodeId, w: ParamId, b: ParamId| {
            let wn = self.store.leaf(tape, w);
            let bn = self.store.leaf(tape, b);
            let m = tape.matmul(x, wn);
            tape.add(m, bn)
        };
        let q = proj(&mut tape, x, layer.wq, layer.bq);
        let k = proj(&mut tape, x, layer.wk, layer.bk);
        let mask_node = mask.map(|m| {
            let row: Vec<f64> = m.iter().map(|&h| if h { -1e30 } else { 0.0 }).collect();
            tape.input(Tensor::new(vec![row.len()], row))
        });
        (0..cfg.heads)
            .map(|h| {
                let (from, to) = (h * dk, (h + 1) * dk);
                let qh = tape.slice_cols(q, from, to);
                let kh = tape.slice_cols(k, from, to);
                let scores = tape.matmul_t(qh, false, kh, true);
                let mut scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
                if let Some(mn) = mask_node {
                    scaled = tape.add(scaled, mn);
                }
                let probs = tape.softmax(scaled, 1);
                tape.value(probs).clone()
            })
            .collect()
    }

    /// Mean loss and accuracy with the classifier head, evaluation mode.
    pub fn evaluate_split(&self, data: &[(EncodedSequence, usize)]) -> (f64, f64) {
        let results = par_map(data, |(seq, label)| {
            let mut tape = Tape::new();
            let mut rng = Rng::new(0);
            let trimmed = &seq.ids[..seq.true_length];
            let logits = self.classifier_logits_on_tape(&mut tape, trimmed, false, &mut rng);
            let loss = tape.cross_entropy(logits, &[*label]);
            let value = tape.value(loss).item();
            let pred = crate::mnlr::argmax(tape.value(logits).data());
            (value, pred == *label)
        });
        let n = data.len().max(1) as f64;
        (
            results.iter().map(|(l, _)| l).sum::<f64>() / n,
            results.iter().filter(|(_, ok)| *ok).count() as f64 / n,
        )
    }
}

/// Result of masking one sequence for the MLM objective.
#[derive(Clone, Debug)]
pub struct MlmMasked {
    pub corrupted: Vec<usize>,
    /// Positions whose original ids become prediction targets.
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects round(rate × content length) maskable positions (never CLS, SEP,
/// or PAD). Of the selected: 80% become MASK, 10% a random word id drawn
/// from [SPECIALS, vocab_size), 10% stay unchanged. Errors when nothing is
/// maskable.
pub fn mlm_mask(
    seq: &EncodedSequence,
    rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<MlmMasked, TransformerError> {
    assert!(
        vocab_size > SPECIALS,
        "vocabulary of size {vocab_size} has no word ids"
    );
    let maskable: Vec<usize> = (0..seq.true_length)
        .filter(|&p| !matches!(seq.ids[p], PAD | CLS | SEP))
        .collect();
    if maskable.is_empty() {
        return Err(TransformerError::NoMaskablePositions);
    }
    let n = ((rate * maskable.len() as f64).round() as usize).min(maskable.len());
    let mut rng = Rng::derived(seed, "mlm.mask", 0);
    let mut picked: Vec<usize> = rng
        .choose_indices(maskable.len(), n)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    picked.sort_unstable();

    let mut corrupted = seq.ids.clone();
    let mut targets = Vec::with_capacity(n);
    for &p in &picked {
        targets.push(seq.ids[p]);
        let roll = rng.uniform();
        if roll < 0.8 {
            corrupted[p] = crate::vocab::MASK;
        } else if roll < 0.9 {
            corrupted[p] = SPECIALS + rng.below(vocab_size - SPECIALS);
        }
    }
    Ok(MlmMasked {
        corrupted,
        positions: picked,
        targets,
    })
}

/// Finite-difference check through one full encoder layer (dropout off);
/// returns the worst relative error.
pub fn gradient_check_encoder_layer(seed: u64) -> f64 {
    use crate::nncore::{grad_check, GradCheckOptions};
    let (t, d, heads, ff) = (4usize, 8usize, 2usize, 16usize);
    let dk = d / heads;
    let mut rng = Rng::new(seed);
    let mut params = vec![Tensor::randn(&[t, d], 0.8, &mut rng)]; // x
    for _ in 0..4 {
        params.push(Tensor::randn(&[d, d], 0.3, &mut rng)); // wq wk wv wo
    }
    for _ in 0..4 {
        params.push(Tensor::randn(&[d], 0.1, &mut rng)); // bq bk bv bo
    }
    params.push(Tensor::randn(&[d], 0.2, &mut rng).map(|x| x + 1.0)); // ln1 g
    params.push(Tensor::randn(&[d], 0.1, &mut rng)); // ln1 b
    params.push(Tensor::randn(&[d, ff], 0.3, &mut rng)); // ff1 w
    params.push(Tensor::randn(&[ff], 0.1, &mut rng)); // ff1 b
    params.push(Tensor::randn(&[ff, d], 0.3, &mut rng)); // ff2 w
    params.push(Tensor::randn(&[d], 0.1, &mut rng)); // ff2 b
    params.push(Tensor::randn(&[d], 0.2, &mut rng).map(|x| x + 1.0)); // ln2 g
    params.push(Tensor::randn(&[d], 0.1, &mut rng)); // ln2 b

    let result = grad_check(
        move |tape, p| {
            let x = p[0];
            let (wq, wk, wv, wo) = (p[1], p[2], p[3], p[4]);
            let (bq, bk, bv, bo) = (p[5], p[6], p[7], p[8]);
            let (ln1_g, ln1_b) = (p[9], p[10]);
            let (ff1_w, ff1_b) = (p[11], p[12]);
            let (ff2_w, ff2_b) = (p[13], p[14]);
            let (ln2_g, ln2_b) = (p[15], p[16]);
            let proj = |tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId| {
                let m = tape.matmul(x, w);
                tape.add(m, b)
            };
            let q = proj(tape, x, wq, bq);
            let k = proj(tape, x, wk, bk);
            let v = proj(tape, x, wv, bv);
            let mut heads_out = Vec::new();
            for h in 0..heads {
                let (from, to) = (h * dk, (h + 1) * dk);
                let qh = tape.slice_cols(q, from, to);
                let kh = tape.slice_cols(k, from, to);
                let vh = tape.slice_cols(v, from, to);
                let scores = tape.matmul_t(qh, false, kh, true);
                let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
                let probs = tape.softmax(scaled, 1);
                heads_out.push(tape.matmul(probs, vh));
            }
            let ctx = tape.concat(&heads_out, 1);
            let projected = proj(tape, ctx, wo, bo);
            let res1 = tape.add(x, projected);
            let n1 = tape.layer_norm(res1, ln1_g, ln1_b, LN_EPS);
            let f1 = proj(tape, n1, ff1_w, ff1_b);
            let act = tape.gelu(f1);
            let f2 = proj(tape, act, ff2_w, ff2_b);
            let res2 = tape.add(n1, f2);
            let out = tape.layer_norm(res2, ln2_g, ln2_b, LN_EPS);
            tape.sum_squares(out)
        },
        &params,
        &GradCheckOptions {
            max_coords: 150,
            seed,
            ..GradCheckOptions::default()
        },
    );
    result.max_rel_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{EncodedSequence, MASK, UNK};

    fn tiny_config(vocab_size: usize, classes: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            max_positions: 16,
            vocab_size,
            classes,
            dropout: 0.1,
            mask_rate: 0.15,
            max_len: 12,
            pretrain_epochs: 3,
            pretrain_lr: 1e-3,
            finetune_epochs: 3,
            finetune_lr: 1e-3,
            head_lr_mult: 10.0,
            batch_size: 8,
            seed,
        }
    }

    fn framed(ids: &[usize], max_len: usize) -> EncodedSequence {
        let mut v = vec![CLS];
        v.extend_from_slice(ids);
        v.push(SEP);
        let true_length = v.len();
        v.resize(max_len, PAD);
        EncodedSequence {
            ids: v,
            true_length,
        }
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let mut cfg = tiny_config(30, 3, 1);
        cfg.heads = 3;
        assert!(matches!(
            Encoder::new(cfg),
            Err(TransformerError::BadHeads { dim: 16, heads: 3 })
        ));
    }

    #[test]
    fn single_position_attention_weight_is_exactly_one() {
        let enc = Encoder::new(tiny_config(30, 3, 2)).unwrap();
        for probs in enc.attention_probabilities(&[CLS], 0, None) {
            assert_eq!(probs.shape(), &[1, 1]);
            assert_eq!(probs.item(), 1.0);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked_positions() {
        let enc = Encoder::new(tiny_config(30, 3, 3)).unwrap();
        let ids = [CLS, 7, 9, 11, SEP];
        for layer in 0..2 {
            for probs in enc.attention_probabilities(&ids, layer, None) {
                for r in 0..probs.rows() {
                    let s: f64 = probs.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9, "layer {layer} row {r}: {s}");
                    assert!(probs.row(r).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn masked_columns_get_no_attention_mass() {
        let enc = Encoder::new(tiny_config(30, 3, 4)).unwrap();
        let ids = [CLS, 7, 9, 11, SEP, PAD, PAD];
        let mask = [false, false, false, false, false, true, true];
        for probs in enc.attention_probabilities(&ids, 0, Some(&mask)) {
            for r in 0..probs.rows() {
                let row = probs.row(r);
                assert!(row[5].abs() < 1e-12 && row[6].abs() < 1e-12);
                let s: f64 = row[..5].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row {r}: {s}");
            }
        }
    }

    #[test]
    fn mask_hides_pad_content_from_unmasked_outputs() {
        // Attention output at real positions must not depend on what sits in
        // masked PAD slots.
        let enc = Encoder::new(tiny_config(30, 3, 5)).unwrap();
        let a = [CLS, 7, 9, SEP, 11, 12];
        let b = [CLS, 7, 9, SEP, 25, 26];
        let mask = [false, false, false, false, true, true];
        let pa = enc.attention_probabilities(&a, 0, Some(&mask));
        let pb = enc.attention_probabilities(&b, 0, Some(&mask));
        for (ha, hb) in pa.iter().zip(&pb) {
            for r in 0..4 {
                for c in 0..4 {
                    assert!(
                        (ha.row(r)[c] - hb.row(r)[c]).abs() < 1e-12,
                        "row {r} col {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn mlm_mask_selects_rounded_count() {
        let seq = framed(&(5..25).collect::<Vec<_>>(), 24); // 20 content tokens
        let m = mlm_mask(&seq, 0.15, 40, 7).unwrap();
        assert_eq!(m.positions.len(), 3);
        assert_eq!(m.targets.len(), 3);
    }

    #[test]
    fn mlm_mask_never_targets_specials() {
        let seq = framed(&[5, 6, 7, 8, 9], 12);
        for seed in 0..500 {
            let m = mlm_mask(&seq, 0.5, 40, seed).unwrap();
            for &p in &m.positions {
                assert!((1..=5).contains(&p), "position {p} is CLS/SEP/PAD");
                assert!(!matches!(seq.ids[p], PAD | CLS | SEP));
            }
        }
    }

    #[test]
    fn mlm_mask_errors_without_maskable_positions() {
        let seq = EncodedSequence {
            ids: vec![CLS, SEP, PAD, PAD],
            true_length: 2,
        };
        assert!(matches!(
            mlm_mask(&seq, 0.15, 40, 1),
            Err(TransformerError::NoMaskablePositions)
        ));
    }

    #[test]
    fn mlm_corruption_follows_eighty_ten_ten() {
        let vocab_size = 1000;
        let content: Vec<usize> = (5..55).collect(); // 50 tokens
        let seq = framed(&content, 60);
        let (mut masked, mut unchanged, mut random, mut total) = (0u64, 0u64, 0u64, 0u64);
        for seed in 0..2500 {
            let m = mlm_mask(&seq, 0.4, vocab_size, seed).unwrap();
            for (&p, &orig) in m.positions.iter().zip(&m.targets) {
                total += 1;
                let now = m.corrupted[p];
                if now == MASK {
                    masked += 1;
                } else if now == orig {
                    unchanged += 1;
                } else {
                    random += 1;
                }
            }
        }
        assert!(total >= 50_000, "only {total} selections");
        let f = |x: u64| x as f64 / total as f64;
        assert!((f(masked) - 0.8).abs() < 0.02, "mask share {}", f(masked));
        assert!(
            (f(unchanged) - 0.1).abs() < 0.02,
            "unchanged share {}",
            f(unchanged)
        );
        assert!((f(random) - 0.1).abs() < 0.02, "random share {}", f(random));
    }

    #[test]
    fn initial_mlm_loss_is_near_log_vocab() {
        let vocab_size = 200;
        let cfg = tiny_config(vocab_size, 3, 11);
        let enc = Encoder::new(cfg).unwrap();
        let corpus: Vec<EncodedSequence> = (0..40)
            .map(|i| framed(&[5 + i % 30, 6 + i % 20, 7 + i % 10, 8, 9, 10], 12))
            .collect();
        let loss = enc.evaluate_mlm(&corpus, 3);
        let expected = (vocab_size as f64).ln();
        assert!(
            (loss - expected).abs() < 0.05 * expected,
            "loss {loss} vs ln(V) {expected}"
        );
    }

    fn toy_corpus(seed: u64, n: usize) -> Vec<(EncodedSequence, usize)> {
        // Two trivially separable pseudo-classes.
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let label = rng.below(2);
                let base = if label == 0 { 5 } else { 15 };
                let len = 3 + rng.below(4);
                let ids: Vec<usize> = (0..len).map(|_| base + rng.below(5)).collect();
                (framed(&ids, 12), label)
            })
            .collect()
    }

    #[test]
    fn pretraining_reduces_mlm_loss() {
        let mut cfg = tiny_config(40, 2, 21);
        cfg.pretrain_epochs = 10;
        let mut enc = Encoder::new(cfg).unwrap();
        let corpus: Vec<EncodedSequence> = toy_corpus(3, 160).into_iter().map(|(s, _)| s).collect();
        let curve = enc.pretrain_mlm(&corpus).unwrap();
        assert_eq!(curve.len(), 10);
        assert!(
            curve.last().unwrap() < &(0.8 * curve[0]),
            "no loss drop: {curve:?}"
        );
        assert!(enc.provenance.pretrained);
    }

    #[test]
    fn pretraining_ignores_labels_and_is_reproducible() {
        let data = toy_corpus(5, 60);
        let seqs: Vec<EncodedSequence> = data.iter().map(|(s, _)| s.clone()).collect();
        // Same sequences with permuted labels are the same pretraining input.
        let mut a = Encoder::new(tiny_config(40, 2, 8)).unwrap();
        let mut b = Encoder::new(tiny_config(40, 2, 8)).unwrap();
        a.pretrain_mlm(&seqs).unwrap();
        b.pretrain_mlm(&seqs).unwrap();
        assert_eq!(a.store().snapshot(), b.store().snapshot());
        // ... and the whole pretrain → finetune chain reproduces bitwise.
        let ca = a.finetune(&data, &data, false).unwrap();
        let cb = b.finetune(&data, &data, false).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.store().snapshot(), b.store().snapshot());
    }

    #[test]
    fn finetune_requires_pretraining_and_predict_requires_finetune() {
        let mut enc = Encoder::new(tiny_config(40, 2, 9)).unwrap();
        let data = toy_corpus(7, 24);
        assert!(matches!(
            enc.finetune(&data, &data, false),
            Err(TransformerError::NotPretrained)
        ));
        let seq = framed(&[5, 6], 12);
        assert!(matches!(
            enc.predict(&seq),
            Err(TransformerError::NotFineTuned)
        ));
    }

    #[test]
    fn finetuned_model_predicts_probabilities() {
        let mut enc = Encoder::new(tiny_config(40, 2, 13)).unwrap();
        let data = toy_corpus(9, 40);
        let seqs: Vec<EncodedSequence> = data.iter().map(|(s, _)| s.clone()).collect();
        enc.pretrain_mlm(&seqs).unwrap();
        let curves = enc.finetune(&data, &data, false).unwrap();
        assert_eq!(curves.epochs(), 3);
        let p = enc.predict(&data[0].0).unwrap();
        assert_eq!(p.len(), 2);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        // batch prediction equals per-example prediction, bitwise
        let batch = enc.predict_batch(&seqs[..8]).unwrap();
        for (one, seq) in batch.iter().zip(&seqs[..8]) {
            assert_eq!(one, &enc.predict(seq).unwrap());
        }
    }

    #[test]
    fn tail_ids_beyond_true_length_never_change_cls_logits() {
        let mut enc = Encoder::new(tiny_config(40, 2, 14)).unwrap();
        enc.ensure_classifier_head();
        enc.provenance.pretrained = true;
        enc.provenance.finetuned = true;
        let a = framed(&[5, 6, 7], 12);
        let mut b = a.clone();
        for slot in b.ids[b.true_length..].iter_mut() {
            *slot = 33;
        }
        assert_eq!(enc.predict(&a).unwrap(), enc.predict(&b).unwrap());
    }

    #[test]
    fn frozen_encoder_only_updates_the_head() {
        let mut enc = Encoder::new(tiny_config(40, 2, 15)).unwrap();
        let data = toy_corpus(11, 24);
        let seqs: Vec<EncodedSequence> = data.iter().map(|(s, _)| s.clone()).collect();
        enc.pretrain_mlm(&seqs).unwrap();
        let before = enc.store().snapshot();
        enc.finetune(&data, &data, true).unwrap();
        let after = enc.store().snapshot();
        // Every pre-existing parameter (encoder + MLM head) is untouched;
        // only the two classifier-head tensors appended at the end moved.
        assert_eq!(after.len(), before.len() + 2);
        for (b, a) in before.iter().zip(after.iter().take(before.len())) {
            assert_eq!(b, a);
        }
    }

    #[test]
    fn linear_probe_on_pretrained_encoder_beats_chance() {
        use crate::corpus::{stratified_split, SplitSpec};
        use crate::synthgen::{generate_corpus, GeneratorConfig, TemplateSet};
        use crate::vocab::Vocabulary;
        let mut gen = GeneratorConfig::default_profile(61);
        gen.total_size = 500;
        let mut ds = generate_corpus(&gen, &TemplateSet::bundled()).unwrap();
        ds.normalize();
        let (train, test) = stratified_split(
            &ds,
            &SplitSpec {
                test_fraction: 0.3,
                seed: 2,
                stratified: true,
            },
        )
        .unwrap();
        let vocab = Vocabulary::build(&train, 1);
        let mut cfg = tiny_config(vocab.size(), ds.class_count, 62);
        cfg.model_dim = 32;
        cfg.ff_dim = 64;
        cfg.max_positions = 32;
        cfg.max_len = 16;
        cfg.pretrain_epochs = 8;
        let encode = |d: &crate::corpus::Dataset| -> Vec<(EncodedSequence, usize)> {
            d.records
                .iter()
                .map(|r| (vocab.encode(&r.tokens, 16, true).unwrap(), r.label))
                .collect()
        };
        let train_data = encode(&train);
        let test_data = encode(&test);
        let seqs: Vec<EncodedSequence> = train_data.iter().map(|(s, _)| s.clone()).collect();
        let mut enc = Encoder::new(cfg).unwrap();
        enc.pretrain_mlm(&seqs).unwrap();
        // Head-only training on frozen pretrained features.
        enc.finetune(&train_data, &test_data, true).unwrap();
        let (_, acc) = enc.evaluate_split(&test_data);
        assert!(acc > 0.15, "linear probe accuracy {acc} at chance (0.1)");
    }

    #[test]
    fn class_count_mismatch_is_reported() {
        let mut enc = Encoder::new(tiny_config(40, 2, 16)).unwrap();
        let mut data = toy_corpus(13, 12);
        data[0].1 = 5;
        let seqs: Vec<EncodedSequence> = data.iter().map(|(s, _)| s.clone()).collect();
        enc.pretrain_mlm(&seqs).unwrap();
        assert!(matches!(
            enc.finetune(&data, &data, false),
            Err(TransformerError::ClassMismatch { model: 2, .. })
        ));
    }

    #[test]
    fn encoder_layer_gradient_passes_finite_differences() {
        let err = gradient_check_encoder_layer(29);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn unk_tokens_are_maskable() {
        let seq = framed(&[UNK, 5, UNK], 8);
        let mut saw_unk_target = false;
        for seed in 0..50 {
            let m = mlm_mask(&seq, 0.9, 40, seed).unwrap();
            if m.targets.contains(&UNK) {
                saw_unk_target = true;
            }
        }
        assert!(saw_unk_target);
    }
}
