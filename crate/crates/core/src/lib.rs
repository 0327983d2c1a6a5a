//! Retrieve-and-memorize task-oriented dialogue: a context-aware retrieval
//! module that fetches candidate system actions from the training set, and a
//! memory-augmented multi-decoder network that jointly generates belief
//! state, system action and response while attending over the candidates.

pub mod carm;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod training;
