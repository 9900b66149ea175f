//! EEG intent recognition: EDF input, an LSTM classifier trained with
//! hand-written BPTT and Adam, orthogonal-array tuning, evaluation and
//! command actuation.

pub mod actuation;
pub mod dataset;
pub mod edf;
pub mod eval;
pub mod model;
pub mod nn;
pub mod oa;
