//! Bilevel meta-learning testbed at desk scale.
//!
//! A tiny autoregressive sequence model generates per-task synthetic training
//! examples, a scorer weights them, low-rank adapters take a few weighted
//! gradient steps on that data, and meta-gradients backpropagated through the
//! inner updates train the scorer and reward the generator. Everything runs in
//! double precision on the CPU so every gradient can be checked against finite
//! differences and closed forms.

pub mod adapt;
pub mod config;
pub mod diffcore;
pub mod metagrad;
pub mod orchestrator;
pub mod par;
pub mod policy;
pub mod scorer;
pub mod seqmodel;
pub mod store;
pub mod taskgen;
