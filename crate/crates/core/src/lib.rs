//! Emotion-conditioned melody harmonization with an LSTM-based hierarchical
//! variational auto-encoder.
//!
//! The crate is organized around the pipeline: [`leadsheet`] holds the data
//! model and corpus I/O, [`emolabel`] derives emotion labels from chords,
//! [`diffmath`] is the reverse-mode autodiff engine, [`model`] is the
//! hierarchical VAE itself, [`trainer`] runs optimization, and [`evalsuite`]
//! scores generated harmonies.

pub mod diffmath;
pub mod emolabel;
pub mod leadsheet;
pub mod model;
pub mod trainer;
