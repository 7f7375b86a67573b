//! The three auto-tagging pipelines behind one train/predict surface.
//!
//! Each pipeline owns its preprocessing policy: the paragraph-vector route
//! removes stopwords before embedding, the sequence models only normalize.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize, remove_stopwords, Dataset};
use crate::doc2vec::{train_doc2vec, Doc2VecConfig, Doc2VecError, Doc2VecModel};
use crate::lstm::{LearningCurves, LstmClassifier, LstmConfig, LstmError};
use crate::mnlr::{argmax, train_mnlr, MnlrConfig, MnlrError, MnlrModel};
use crate::par::par_map;
use crate::rng::derive_seed;
use crate::transformer::{Encoder, EncoderConfig, TransformerError};
use crate::vocab::{EncodedSequence, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineKind {
    Doc2VecMnlr,
    Lstm,
    Bert,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 3] = [
        PipelineKind::Doc2VecMnlr,
        PipelineKind::Lstm,
        PipelineKind::Bert,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::Doc2VecMnlr => "doc2vec_mnlr",
            PipelineKind::Lstm => "lstm",
            PipelineKind::Bert => "bert",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "doc2vec_mnlr" | "doc2vec" => Ok(PipelineKind::Doc2VecMnlr),
            "lstm" => Ok(PipelineKind::Lstm),
            "bert" => Ok(PipelineKind::Bert),
            other => Err(format!(
                "unknown pipeline {other:?} (expected doc2vec_mnlr, lstm, or bert)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Doc2Vec(#[from] Doc2VecError),
    #[error(transparent)]
    Mnlr(#[from] MnlrError),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error("training dataset is empty")]
    EmptyTrain,
}

/// One tagging decision: label, max softmax probability, full distribution.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
    pub probs: Vec<f64>,
    /// True when stopword removal emptied the input and the zero vector
    /// stood in (paragraph-vector route only).
    pub emptied: bool,
}

fn to_prediction(probs: Vec<f64>, emptied: bool) -> Prediction {
    let label = argmax(&probs);
    Prediction {
        label,
        confidence: probs[label],
        probs,
        emptied,
    }
}

pub struct Doc2VecMnlrPipeline {
    pub d2v: Doc2VecModel,
    pub mnlr: MnlrModel,
    pub stoplist: Vec<String>,
    pub seed: u64,
}

impl Doc2VecMnlrPipeline {
    /// Trains paragraph vectors on the stopword-filtered training split,
    /// then the softmax classifier on the stored document vectors.
    pub fn train(
        train: &Dataset,
        d2v_cfg: Doc2VecConfig,
        mnlr_cfg: &MnlrConfig,
        stoplist: Vec<String>,
    ) -> Result<Self, PipelineError> {
        if train.is_empty() {
            return Err(PipelineError::EmptyTrain);
        }
        let stopset: HashSet<String> = stoplist.iter().cloned().collect();
        let mut filtered = train.clone();
        filtered.remove_stopwords(&stopset);
        let seed = d2v_cfg.seed;
        let d2v = train_doc2vec(&filtered, d2v_cfg)?;
        let x: Vec<Vec<f64>> = (0..d2v.doc_ids.len())
            .map(|row| d2v.doc_vector(row).to_vec())
            .collect();
        let by_id: std::collections::HashMap<usize, usize> =
            train.records.iter().map(|r| (r.id, r.label)).collect();
        let y: Vec<usize> = d2v.doc_ids.iter().map(|id| by_id[id]).collect();
        let mnlr = train_mnlr(&x, &y, train.class_count, mnlr_cfg)?;
        Ok(Doc2VecMnlrPipeline {
            d2v,
            mnlr,
            stoplist,
            seed,
        })
    }

    /// Infers a vector for normalized tokens and classifies it. Inputs
    /// emptied by stopword removal (or fully out of vocabulary) get the
    /// zero vector and are flagged.
    pub fn predict_tokens(&self, tokens: &[String], seed: u64) -> Prediction {
        let stopset: HashSet<String> = self.stoplist.iter().cloned().collect();
        let kept = remove_stopwords(tokens.to_vec(), &stopset);
        let vector = if kept.is_empty() {
            None
        } else {
            self.d2v
                .infer_vector(&kept, self.d2v.config.infer_steps, seed)
                .ok()
        };
        match vector {
            Some(v) => to_prediction(self.mnlr.predict(&v), false),
            None => to_prediction(self.mnlr.predict(&vec![0.0; self.d2v.dim()]), true),
        }
    }
}

pub struct LstmPipeline {
    pub vocab: Vocabulary,
    pub model: LstmClassifier,
}

impl LstmPipeline {
    pub fn train(
        train: &Dataset,
        valid: &Dataset,
        vocab: Vocabulary,
        config: LstmConfig,
    ) -> Result<(Self, LearningCurves), PipelineError> {
        let encode = |ds: &Dataset| -> Result<Vec<(EncodedSequence, usize)>, PipelineError> {
            ds.records
                .iter()
                .map(|r| Ok((vocab.encode(&r.tokens, config.max_len, false)?, r.label)))
                .collect()
        };
        let train_data = encode(train)?;
        let valid_data = encode(valid)?;
        let mut model = LstmClassifier::new(config);
        let curves = model.train(&train_data, &valid_data)?;
        Ok((LstmPipeline { vocab, model }, curves))
    }

    pub fn predict_tokens(&self, tokens: &[String]) -> Prediction {
        let seq = self
            .vocab
            .encode(tokens, self.model.config.max_len, false)
            .expect("plain encoding cannot fail");
        to_prediction(self.model.predict(&seq), false)
    }
}

pub struct BertPipeline {
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub mlm_curve: Vec<f64>,
}

impl BertPipeline {
    /// Masked-LM pretraining on the training split's sentences (plus any
    /// extra unlabeled datasets — labels are never read) followed by
    /// classification fine-tuning.
    pub fn train(
        train: &Dataset,
        valid: &Dataset,
        extra_unlabeled: &[&Dataset],
        vocab: Vocabulary,
        config: EncoderConfig,
    ) -> Result<(Self, LearningCurves), PipelineError> {
        let encode = |ds: &Dataset| -> Result<Vec<(EncodedSequence, usize)>, PipelineError> {
            ds.records
                .iter()
                .map(|r| Ok((vocab.encode(&r.tokens, config.max_len, true)?, r.label)))
                .collect()
        };
        let train_data = encode(train)?;
        let valid_data = encode(valid)?;
        let mut pretrain_corpus: Vec<EncodedSequence> =
            train_data.iter().map(|(s, _)| s.clone()).collect();
        for extra in extra_unlabeled {
            for r in &extra.records {
                pretrain_corpus.push(vocab.encode(&r.tokens, config.max_len, true)?);
            }
        }
        let mut encoder = Encoder::new(config)?;
        let mlm_curve = encoder.pretrain_mlm(&pretrain_corpus)?;
        let curves = encoder.finetune(&train_data, &valid_data, false)?;
        Ok((
            BertPipeline {
                vocab,
                encoder,
                mlm_curve,
            },
            curves,
        ))
    }

    pub fn predict_tokens(&self, tokens: &[String]) -> Prediction {
        let seq = self
            .vocab
            .encode(tokens, self.encoder.config.max_len, true)
            .expect("framed encoding checked at train time");
        to_prediction(
            self.encoder.predict(&seq).expect("pipeline is fine-tuned"),
            false,
        )
    }
}

/// A trained pipeline of any kind, with a unified prediction surface.
pub enum TrainedPipeline {
    Doc2VecMnlr(Doc2VecMnlrPipeline),
    Lstm(LstmPipeline),
    Bert(BertPipeline),
}

impl TrainedPipeline {
    pub fn kind(&self) -> PipelineKind {
        match self {
            TrainedPipeline::Doc2VecMnlr(_) => PipelineKind::Doc2VecMnlr,
            TrainedPipeline::Lstm(_) => PipelineKind::Lstm,
            TrainedPipeline::Bert(_) => PipelineKind::Bert,
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        match self {
            TrainedPipeline::Doc2VecMnlr(p) => &p.d2v.vocab,
            TrainedPipeline::Lstm(p) => &p.vocab,
            TrainedPipeline::Bert(p) => &p.vocab,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            TrainedPipeline::Doc2VecMnlr(p) => p.mnlr.classes,
            TrainedPipeline::Lstm(p) => p.model.config.classes,
            TrainedPipeline::Bert(p) => p.encoder.config.classes,
        }
    }

    /// Tags one raw sentence. `seed` only affects the paragraph-vector
    /// route (vector inference); the other pipelines are deterministic.
    pub fn predict_text(&self, text: &str, seed: u64) -> Prediction {
        let tokens = normalize(text);
        match self {
            TrainedPipeline::Doc2VecMnlr(p) => p.predict_tokens(&tokens, seed),
            TrainedPipeline::Lstm(p) => p.predict_tokens(&tokens),
            TrainedPipeline::Bert(p) => p.predict_tokens(&tokens),
        }
    }

    /// Predicts every record of a normalized dataset, in order. Inference
    /// seeds derive from record ids, so results are reproducible and
    /// independent of batching.
    pub fn predict_dataset(&self, ds: &Dataset, seed: u64) -> Vec<Prediction> {
        match self {
            TrainedPipeline::Doc2VecMnlr(p) => par_map(&ds.records, |r| {
                p.predict_tokens(&r.tokens, derive_seed(seed, "tag.infer", r.id as u64))
            }),
            TrainedPipeline::Lstm(p) => par_map(&ds.records, |r| p.predict_tokens(&r.tokens)),
            TrainedPipeline::Bert(p) => par_map(&ds.records, |r| p.predict_tokens(&r.tokens)),
        }
    }
}
