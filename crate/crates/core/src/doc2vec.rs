//! Paragraph-vector document embeddings (PV-DBOW and PV-DM) trained with
//! negative sampling against a unigram^0.75 noise distribution.
//!
//! Training learns one vector per document jointly with word output vectors;
//! unseen documents get a vector by running the same objective for a fixed
//! number of gradient steps against frozen word vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::nncore::Tensor;
use crate::rng::{derive_seed, Rng};
use crate::vocab::{Vocabulary, SPECIALS};

#[derive(Debug, Error)]
pub enum Doc2VecError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vector dimension must be positive")]
    ZeroDim,
    #[error("vocabulary is empty after min_count filtering")]
    EmptyVocabulary,
    #[error("no anchors for inference: every token is out of vocabulary")]
    NoAnchors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Doc2VecMode {
    /// Predict document words from the document vector alone.
    PvDbow,
    /// Average the document vector with a context window around the target.
    PvDm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Doc2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub negative: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub min_count: u64,
    pub mode: Doc2VecMode,
    pub infer_steps: usize,
    pub seed: u64,
}

impl Default for Doc2VecConfig {
    fn default() -> Self {
        Doc2VecConfig {
            dim: 100,
            window: 5,
            negative: 5,
            epochs: 100,
            lr_start: 0.025,
            lr_end: 1e-4,
            min_count: 2,
            mode: Doc2VecMode::PvDbow,
            infer_steps: 50,
            seed: 0,
        }
    }
}

pub struct Doc2VecModel {
    pub config: Doc2VecConfig,
    pub vocab: Vocabulary,
    /// One row per retained training document.
    pub doc_vectors: Tensor,
    /// Input word vectors (context side, PV-DM).
    pub word_in: Tensor,
    /// Output word vectors (negative-sampling side).
    pub word_out: Tensor,
    /// Record ids aligned with `doc_vectors` rows.
    pub doc_ids: Vec<usize>,
    /// Record ids dropped because no token survived preprocessing.
    pub skipped_docs: Vec<usize>,
    noise_cdf: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unigram^0.75 probabilities over word ids (specials excluded).
fn noise_distribution(vocab: &Vocabulary) -> Vec<f64> {
    let mut probs: Vec<f64> = (SPECIALS..vocab.size())
        .map(|id| (vocab.count_of(id) as f64).powf(0.75))
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

struct NegSampler<'a> {
    cdf: &'a [f64],
}

impl NegSampler<'_> {
    /// Draws a word id ≠ `target`, bounded retries keep it deterministic.
    fn draw(&self, rng: &mut Rng, target: usize) -> Option<usize> {
        for _ in 0..8 {
            let id = SPECIALS + rng.sample_cdf(self.cdf);
            if id != target {
                return Some(id);
            }
        }
        None
    }
}

/// Output-vector side of a negative-sampling step: mutable during training,
/// read-only during inference.
enum WordSide<'a> {
    Train(&'a mut Tensor),
    Frozen(&'a Tensor),
}

impl WordSide<'_> {
    fn row(&self, i: usize) -> &[f64] {
        match self {
            WordSide::Train(t) => t.row(i),
            WordSide::Frozen(t) => t.row(i),
        }
    }

    fn apply(&mut self, i: usize, g: f64, h: &[f64]) {
        if let WordSide::Train(t) = self {
            for (uv, &hv) in t.row_mut(i).iter_mut().zip(h) {
                *uv -= g * hv;
            }
        }
    }
}

/// One negative-sampling update of `h` against target word `target`:
/// maximizes log σ(h·u_target) + Σ log σ(−h·u_noise). Returns the gradient
/// to apply to `h`; word output vectors update in place unless frozen.
fn neg_sampling_step(
    h: &[f64],
    target: usize,
    words: &mut WordSide,
    sampler: &NegSampler,
    negative: usize,
    lr: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let dim = h.len();
    let mut h_grad = vec![0.0; dim];
    let mut pairs = Vec::with_capacity(negative + 1);
    pairs.push((target, 1.0));
    for _ in 0..negative {
        if let Some(n) = sampler.draw(rng, target) {
            pairs.push((n, 0.0));
        }
    }
    for (word, label) in pairs {
        let u = words.row(word);
        let g = (sigmoid(dot(h, u)) - label) * lr;
        for (hg, &uv) in h_grad.iter_mut().zip(u) {
            *hg -= g * uv;
        }
        words.apply(word, g, h);
    }
    h_grad
}

/// Trains paragraph vectors on a normalized (and, for this pipeline,
/// stopword-filtered) corpus. Documents left without tokens are excluded
/// and recorded on the model.
pub fn train_doc2vec(corpus: &Dataset, cfg: Doc2VecConfig) -> Result<Doc2VecModel, Doc2VecError> {
    if corpus.is_empty() {
        return Err(Doc2VecError::EmptyCorpus);
    }
    if cfg.dim == 0 {
        return Err(Doc2VecError::ZeroDim);
    }
    let vocab = Vocabulary::build(corpus, cfg.min_count);
    if vocab.word_count() == 0 {
        return Err(Doc2VecError::EmptyVocabulary);
    }

    // Encode documents to in-vocabulary word ids; drop emptied ones.
    let mut docs: Vec<Vec<usize>> = Vec::new();
    let mut doc_ids = Vec::new();
    let mut skipped_docs = Vec::new();
    for r in &corpus.records {
        let ids: Vec<usize> = r.tokens.iter().filter_map(|t| vocab.id_of(t)).collect();
        if ids.is_empty() {
            skipped_docs.push(r.id);
        } else {
            docs.push(ids);
            doc_ids.push(r.id);
        }
    }
    if docs.is_empty() {
        return Err(Doc2VecError::EmptyCorpus);
    }

    let probs = noise_distribution(&vocab);
    let noise_cdf: Vec<f64> = probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let dim = cfg.dim;
    let bound = 0.5 / dim as f64;
    let mut init_rng = Rng::derived(cfg.seed, "doc2vec.init", 0);
    let mut doc_vectors = Tensor::rand_uniform(&[docs.len(), dim], bound, &mut init_rng);
    let mut word_in = Tensor::rand_uniform(&[vocab.size(), dim], bound, &mut init_rng);
    let mut word_out = Tensor::zeros(&[vocab.size(), dim]);

    let total_positions: usize = docs.iter().map(Vec::len).sum();
    let total_updates = (cfg.epochs * total_positions).max(1) as f64;
    let mut seen = 0usize;

    let sampler_cdf = noise_cdf.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        let mut epoch_rng = Rng::derived(cfg.seed, "doc2vec.epoch", epoch as u64);
        epoch_rng.shuffle(&mut order);
        for &d in &order {
            let ids = &docs[d];
            let mut rng = Rng::new(derive_seed(
                derive_seed(cfg.seed, "doc2vec.doc", d as u64),
                "epoch",
                epoch as u64,
            ));
            for (pos, &target) in ids.iter().enumerate() {
                let lr = cfg.lr_start - (cfg.lr_start - cfg.lr_end) * (seen as f64 / total_updates);
                seen += 1;
                let sampler = NegSampler { cdf: &sampler_cdf };
                let mut words = WordSide::Train(&mut word_out);
                match cfg.mode {
                    Doc2VecMode::PvDbow => {
                        let h = doc_vectors.row(d).to_vec();
                        let g = neg_sampling_step(
                            &h,
                            target,
                            &mut words,
                            &sampler,
                            cfg.negative,
                            lr,
                            &mut rng,
                        );
                        for (v, gv) in doc_vectors.row_mut(d).iter_mut().zip(&g) {
                            *v += gv;
                        }
                    }
                    Doc2VecMode::PvDm => {
                        let lo = pos.saturating_sub(cfg.window);
                        let hi = (pos + cfg.window + 1).min(ids.len());
                        let context: Vec<usize> =
                            (lo..hi).filter(|&j| j != pos).map(|j| ids[j]).collect();
                        let m = (context.len() + 1) as f64;
                        let mut h = doc_vectors.row(d).to_vec();
                        for &c in &context {
                            for (hv, &wv) in h.iter_mut().zip(word_in.row(c)) {
                                *hv += wv;
                            }
                        }
                        for hv in &mut h {
                            *hv /= m;
                        }
                        let g = neg_sampling_step(
                            &h,
                            target,
                            &mut words,
                            &sampler,
                            cfg.negative,
                            lr,
                            &mut rng,
                        );
                        // The averaged input distributes the gradient evenly.
                        let share: Vec<f64> = g.iter().map(|x| x / m).collect();
                        for (v, s) in doc_vectors.row_mut(d).iter_mut().zip(&share) {
                            *v += s;
                        }
                        for &c in &context {
                            for (v, s) in word_in.row_mut(c).iter_mut().zip(&share) {
                                *v += s;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(Doc2VecModel {
        config: cfg,
        vocab,
        doc_vectors,
        word_in,
        word_out,
        doc_ids,
        skipped_docs,
        noise_cdf,
    })
}

impl Doc2VecModel {
    /// Rebuilds a model from checkpointed parts; the noise distribution is
    /// derived from the vocabulary counts.
    pub fn from_parts(
        config: Doc2VecConfig,
        vocab: Vocabulary,
        doc_vectors: Tensor,
        word_in: Tensor,
        word_out: Tensor,
        doc_ids: Vec<usize>,
        skipped_docs: Vec<usize>,
    ) -> Self {
        let probs = noise_distribution(&vocab);
        let noise_cdf = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Doc2VecModel {
            config,
            vocab,
            doc_vectors,
            word_in,
            word_out,
            doc_ids,
            skipped_docs,
            noise_cdf,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn doc_vector(&self, row: usize) -> &[f64] {
        self.doc_vectors.row(row)
    }

    /// Noise probabilities over word ids, aligned with `SPECIALS..size`.
    pub fn noise_distribution(&self) -> Vec<f64> {
        noise_distribution(&self.vocab)
    }

    /// Optimizes a fresh document vector for `steps` passes over the tokens
    /// against frozen word vectors. `steps = 0` returns the seeded random
    /// initialization. Errors when every token is out of vocabulary.
    pub fn infer_vector(
        &self,
        tokens: &[String],
        steps: usize,
        seed: u64,
    ) -> Result<Vec<f64>, Doc2VecError> {
        let ids: Vec<usize> = tokens.iter().filter_map(|t| self.vocab.id_of(t)).collect();
        if ids.is_empty() {
            return Err(Doc2VecError::NoAnchors);
        }
        let cfg = &self.config;
        let dim = cfg.dim;
        let bound = 0.5 / dim as f64;
        let mut rng = Rng::derived(seed, "doc2vec.infer", 0);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-bound, bound)).collect();
        let sampler = NegSampler {
            cdf: &self.noise_cdf,
        };
        let total = (steps * ids.len()).max(1) as f64;
        let mut seen = 0usize;
        for _ in 0..steps {
            for (pos, &target) in ids.iter().enumerate() {
                let lr = cfg.lr_start - (cfg.lr_start - cfg.lr_end) * (seen as f64 / total);
                seen += 1;
                let h = match cfg.mode {
                    Doc2VecMode::PvDbow => v.clone(),
                    Doc2VecMode::PvDm => {
                        let lo = pos.saturating_sub(cfg.window);
                        let hi = (pos + cfg.window + 1).min(ids.len());
                        let context: Vec<usize> =
                            (lo..hi).filter(|&j| j != pos).map(|j| ids[j]).collect();
                        let m = (context.len() + 1) as f64;
                        let mut h = v.clone();
                        for &c in &context {
                            for (hv, &wv) in h.iter_mut().zip(self.word_in.row(c)) {
                                *hv += wv;
                            }
                        }
                        for hv in &mut h {
                            *hv /= m;
                        }
                        h
                    }
                };
                let mut words = WordSide::Frozen(&self.word_out);
                let g =
                    neg_sampling_step(&h, target, &mut words, &sampler, cfg.negative, lr, &mut rng);
                match cfg.mode {
                    Doc2VecMode::PvDbow => {
                        for (vv, gv) in v.iter_mut().zip(&g) {
                            *vv += gv;
                        }
                    }
                    Doc2VecMode::PvDm => {
                        let lo = pos.saturating_sub(cfg.window);
                        let hi = (pos + cfg.window + 1).min(ids.len());
                        let m = ((lo..hi).filter(|&j| j != pos).count() + 1) as f64;
                        for (vv, gv) in v.iter_mut().zip(&g) {
                            *vv += gv / m;
                        }
                    }
                }
            }
        }
        Ok(v)
    }
}

/// Cosine similarity; zero vectors compare as 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
