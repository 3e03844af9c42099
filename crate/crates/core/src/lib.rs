//! Hierarchical Transformer adversarial autoencoder for multi-track symbolic
//! music.
//!
//! * [`midi_token`] reads and writes Standard MIDI Files, quantizes them onto
//!   a 96-step measure grid and converts measures to and from token ids.
//! * [`numerics`] is the tensor/autodiff/optimizer substrate.
//! * [`model`] is the encoder/compressor/decompressor/decoder network and the
//!   latent discriminator.
//! * [`training`] runs the reconstruction and adversarial regularization phases.
//! * [`eval`] holds reconstruction accuracies and generation metrics.

pub mod eval;
pub mod midi_token;
pub mod model;
pub mod numerics;
pub mod training;
