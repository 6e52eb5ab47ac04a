//! Desk-scale retrieval-augmented masked language modeling.
//!
//! A dense retriever and a masked-language-model reader are trained jointly:
//! the retriever scores corpus chunks against a masked query, the reader
//! predicts the masked tokens conditioned on each retrieved chunk, and the
//! marginal likelihood over candidates backpropagates into both components.
//! Everything runs in plain `f64` on one core, with bitwise-reproducible runs
//! given a config and a seed.

pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod harness;
pub mod ict;
pub mod index;
pub mod masking;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod training;
