//! Short conversational sentence auto-tagging, three ways: paragraph-vector
//! document embeddings with a softmax classifier, an embedding+LSTM
//! classifier, and a small transformer encoder pretrained with masked
//! language modeling and fine-tuned for classification. A shared autodiff
//! core, a synthetic corpus generator, and an evaluation harness tie the
//! pipelines together so they can be trained and compared end to end.

pub mod checkpoint;
pub mod corpus;
pub mod doc2vec;
pub mod eval;
pub mod lstm;
pub mod mnlr;
pub mod nncore;
pub mod par;
pub mod pipelines;
pub mod rng;
pub mod synthgen;
pub mod transformer;
pub mod vocab;
