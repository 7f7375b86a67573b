//! Versioned checkpoint files: JSON tensor dumps with a kind tag, the full
//! model configuration, and the vocabulary content hash.
//!
//! Layout (version 1):
//! ```json
//! {
//!   "version": 1,
//!   "kind": "lstm",
//!   "vocab_hash": "…sha256…",
//!   "config": { … kind-specific … },
//!   "tensors": [ { "name": "…", "shape": [2,3], "dtype": "f64", "data": [ … ] } ]
//! }
//! ```
//! Tensor data is written as JSON numbers, which round-trip `f64` exactly.
//! The vocabulary itself lives in a sibling `vocab.json`; the hash here
//! guards against mixing a checkpoint with the wrong vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doc2vec::{Doc2VecConfig, Doc2VecModel};
use crate::lstm::{LstmClassifier, LstmConfig};
use crate::mnlr::MnlrModel;
use crate::nncore::Tensor;
use crate::pipelines::{BertPipeline, Doc2VecMnlrPipeline, LstmPipeline, TrainedPipeline};
use crate::transformer::{Encoder, EncoderConfig, Provenance};
use crate::vocab::Vocabulary;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("unknown checkpoint kind {0:?}")]
    UnknownKind(String),
    #[error(
        "vocabulary hash mismatch: checkpoint was built with {expected}, supplied vocabulary hashes to {got}"
    )]
    VocabHashMismatch { expected: String, got: String },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    kind: String,
    vocab_hash: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Doc2VecMnlrConfigBlock {
    d2v: Doc2VecConfig,
    mnlr_classes: usize,
    mnlr_dim: usize,
    stoplist: Vec<String>,
    doc_ids: Vec<usize>,
    skipped_docs: Vec<usize>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct BertConfigBlock {
    encoder: EncoderConfig,
    provenance: Provenance,
}

fn entry(name: &str, t: &Tensor) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f64".to_string(),
        data: t.data().to_vec(),
    }
}

fn tensor_map(entries: Vec<TensorEntry>) -> Result<HashMap<String, Tensor>, CheckpointError> {
    entries
        .into_iter()
        .map(|e| {
            if e.dtype != "f64" {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {} has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let expected: usize = e.shape.iter().product();
            if expected != e.data.len() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {}: shape {:?} wants {expected} values, got {}",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            Ok((e.name, Tensor::new(e.shape, e.data)))
        })
        .collect()
}

fn take(map: &mut HashMap<String, Tensor>, name: &str) -> Result<Tensor, CheckpointError> {
    map.remove(name)
        .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
}

/// Kind tag recorded in a pipeline's checkpoint.
pub fn kind_tag(p: &TrainedPipeline) -> &'static str {
    match p {
        TrainedPipeline::Doc2VecMnlr(_) => "doc2vec_mnlr",
        TrainedPipeline::Lstm(_) => "lstm",
        TrainedPipeline::Bert(b) => {
            if b.encoder.provenance.finetuned {
                "bert_finetuned"
            } else {
                "bert_pretrained"
            }
        }
    }
}

/// Serializes a trained pipeline to `path`.
pub fn save(p: &TrainedPipeline, path: &Path) -> Result<(), CheckpointError> {
    let (config, tensors) = match p {
        TrainedPipeline::Doc2VecMnlr(p) => {
            let block = Doc2VecMnlrConfigBlock {
                d2v: p.d2v.config.clone(),
                mnlr_classes: p.mnlr.classes,
                mnlr_dim: p.mnlr.dim,
                stoplist: p.stoplist.clone(),
                doc_ids: p.d2v.doc_ids.clone(),
                skipped_docs: p.d2v.skipped_docs.clone(),
                seed: p.seed,
            };
            let tensors = vec![
                entry("doc_vectors", &p.d2v.doc_vectors),
                entry("word_in", &p.d2v.word_in),
                entry("word_out", &p.d2v.word_out),
                entry("mnlr_w", &p.mnlr.w),
                entry("mnlr_b", &p.mnlr.b),
            ];
            (serde_json::to_value(block).unwrap(), tensors)
        }
        TrainedPipeline::Lstm(p) => {
            let tensors = p
                .model
                .store()
                .named_tensors()
                .iter()
                .map(|(n, t)| entry(n, t))
                .collect();
            (serde_json::to_value(&p.model.config).unwrap(), tensors)
        }
        TrainedPipeline::Bert(p) => {
            let block = BertConfigBlock {
                encoder: p.encoder.config.clone(),
                provenance: p.encoder.provenance,
            };
            let tensors = p
                .encoder
                .store()
                .named_tensors()
                .iter()
                .map(|(n, t)| entry(n, t))
                .collect();
            (serde_json::to_value(block).unwrap(), tensors)
        }
    };
    let file = CheckpointFile {
        version: FORMAT_VERSION,
        kind: kind_tag(p).to_string(),
        vocab_hash: p.vocabulary().content_hash(),
        config,
        tensors,
    };
    let json = serde_json::to_string(&file).expect("checkpoint serialization cannot fail");
    fs::write(path, json).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads only the vocabulary hash from a checkpoint.
pub fn peek_vocab_hash(path: &Path) -> Result<String, CheckpointError> {
    let raw = fs::read_to_string(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&raw).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(file.vocab_hash)
}

/// Loads a checkpoint and reunites it with its vocabulary, verifying the
/// recorded content hash.
pub fn load(path: &Path, vocab: Vocabulary) -> Result<TrainedPipeline, CheckpointError> {
    let raw = fs::read_to_string(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&raw).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if file.version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(file.version));
    }
    let got = vocab.content_hash();
    if got != file.vocab_hash {
        return Err(CheckpointError::VocabHashMismatch {
            expected: file.vocab_hash,
            got,
        });
    }
    let mut tensors = tensor_map(file.tensors)?;
    match file.kind.as_str() {
        "doc2vec_mnlr" => {
            let block: Doc2VecMnlrConfigBlock = serde_json::from_value(file.config)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let d2v = Doc2VecModel::from_parts(
                block.d2v,
                vocab,
                take(&mut tensors, "doc_vectors")?,
                take(&mut tensors, "word_in")?,
                take(&mut tensors, "word_out")?,
                block.doc_ids,
                block.skipped_docs,
            );
            let mnlr = MnlrModel {
                w: take(&mut tensors, "mnlr_w")?,
                b: take(&mut tensors, "mnlr_b")?,
                classes: block.mnlr_classes,
                dim: block.mnlr_dim,
                loss_curve: Vec::new(),
            };
            Ok(TrainedPipeline::Doc2VecMnlr(Doc2VecMnlrPipeline {
                d2v,
                mnlr,
                stoplist: block.stoplist,
                seed: block.seed,
            }))
        }
        "lstm" => {
            let config: LstmConfig = serde_json::from_value(file.config)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let mut model = LstmClassifier::new(config);
            for (name, tensor) in tensors {
                if !model.store_mut().set_by_name(&name, tensor) {
                    return Err(CheckpointError::Malformed(format!(
                        "unexpected tensor {name:?} for an lstm checkpoint"
                    )));
                }
            }
            Ok(TrainedPipeline::Lstm(LstmPipeline { vocab, model }))
        }
        "bert_pretrained" | "bert_finetuned" => {
            let block: BertConfigBlock = serde_json::from_value(file.config)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let mut encoder = Encoder::new(block.encoder)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            if block.provenance.finetuned {
                encoder.ensure_classifier_head();
            }
            encoder.provenance = block.provenance;
            for (name, tensor) in tensors {
                if !encoder.store_mut().set_by_name(&name, tensor) {
                    return Err(CheckpointError::Malformed(format!(
                        "unexpected tensor {name:?} for a transformer checkpoint"
                    )));
                }
            }
            Ok(TrainedPipeline::Bert(BertPipeline {
                vocab,
                encoder,
                mlm_curve: Vec::new(),
            }))
        }
        other => Err(CheckpointError::UnknownKind(other.to_string())),
    }
}
