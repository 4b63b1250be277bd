//! Deterministic simulator for federated multi-target domain adaptation.
//!
//! One labeled source dataset lives on a server; `N` unlabeled target
//! datasets live on clients. The main protocol adapts a shared feature
//! extractor without moving raw data: clients self-train lightweight local
//! classifiers and upload only classifier parameters plus a Gaussian-mixture
//! summary of their feature distribution; the server adapts the extractor on
//! a mixup proxy of source examples, re-weighted by each client's mixture.
//!
//! The crate is organized as:
//!
//! * [`tensor`] — dense `f64` tensors and reverse-mode gradients
//! * [`nn`] — small dense feature extractors and classifier heads
//! * [`losses`] — cross-entropy, L1 classifier discrepancy, the composed
//!   client/server objectives
//! * [`density`] — PCA + EM-fitted Gaussian mixtures and confidence weights
//! * [`proxy`] — mixup proxy batches built on the server
//! * [`data`] — synthetic multi-domain benchmarks and CSV shard I/O
//! * [`costs`] — FLOP / parameter accounting and per-round cost ledgers
//! * [`federation`] — the protocol loops: main method, baselines, evaluation
//! * [`cli`] — the experiment harness behind the `dualadapt` binary
//!
//! Everything is seeded and single-threaded in its numeric core: identical
//! (config, seed, data) triples reproduce byte-identical reports.

pub mod cli;
pub mod costs;
pub mod data;
pub mod density;
pub mod error;
pub mod federation;
pub mod losses;
pub mod nn;
pub mod presets;
pub mod proxy;
pub mod seed;
pub mod tensor;

pub use error::Error;
