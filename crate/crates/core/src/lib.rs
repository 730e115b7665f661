//! Recurrent neural decoding of convolutional codes, with a Viterbi
//! maximum-likelihood baseline and the Monte-Carlo tooling to compare them.

pub mod cli;
pub mod conv_code;
pub mod decoder;
pub mod metrics;
pub mod modem;
pub mod nn;
pub mod rng;
pub mod training;
pub mod viterbi;
