//! Sequence-model stack for combinatorial optimization.
//!
//! Problems are cast as construction MDPs ([`problems`]), expert solutions
//! are traced into episodes ([`experts`]), serialized into token sequences
//! with a static instance prefix ([`tokenizer`], [`dataset`]), and learned by
//! a prefix-bidirectional decoder ([`model`], [`training`]) that solves new
//! instances with feasibility-masked decoding ([`solver`]).

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experts;
pub mod model;
pub mod problems;
pub mod solver;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
