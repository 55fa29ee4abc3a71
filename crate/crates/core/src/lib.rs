//! Entity/action heuristic supervision for video question answering.
//!
//! A frozen dual-encoder prompter scores instantiated verb and noun prompts
//! against cropped video clips; the resulting distributions supervise a
//! question-answering reasoner through auxiliary losses whose balance is set
//! by a question-conditioned gate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod encoders;
pub mod error;
pub mod prompter;
pub mod reasoner;
pub mod rng;
pub mod substrate;
pub mod textproc;
pub mod training;
pub mod verify;
pub mod videoproc;

pub use error::{Error, Result};
