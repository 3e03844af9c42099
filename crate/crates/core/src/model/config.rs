use crate::midi_token::{N_TRACKS, VOCAB_SIZE};

use super::ModelError;

/// Network dimensions. The track count (4) and vocabulary (323) are fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Latent width.
    pub n_z: usize,
    /// Measures per song; fixed per model.
    pub n_measures: usize,
    /// Token sequence length per measure and track, `3·max_notes + 2`.
    pub seq_len: usize,
    /// Memory slots produced per measure and track for source attention.
    pub l_mem: usize,
    pub disc_hidden: usize,
}

impl ModelConfig {
    pub const N_TRACKS: usize = N_TRACKS;
    pub const VOCAB: usize = VOCAB_SIZE;

    /// Full-size network.
    pub fn full(n_measures: usize) -> Self {
        ModelConfig {
            d_model: 256,
            n_layers: 6,
            n_heads: 4,
            d_ff: 512,
            n_z: 256,
            n_measures,
            seq_len: 74,
            l_mem: 8,
            disc_hidden: 512,
        }
    }

    /// Reduced network used for fast experiments (12 notes per measure).
    pub fn tiny(n_measures: usize) -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            n_z: 32,
            n_measures,
            seq_len: 38,
            l_mem: 8,
            disc_hidden: 512,
        }
    }

    pub fn max_notes(&self) -> usize {
        (self.seq_len - 2) / 3
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.n_z,
            self.n_measures,
            self.l_mem,
            self.disc_hidden,
        ]
        .contains(&0)
        {
            return fail("all dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if !self.n_z.is_multiple_of(N_TRACKS) {
            return fail(format!(
                "n_z {} not divisible by {N_TRACKS} tracks",
                self.n_z
            ));
        }
        if self.seq_len < 2 || !(self.seq_len - 2).is_multiple_of(3) {
            return fail(format!("seq_len {} is not 3·k + 2", self.seq_len));
        }
        Ok(())
    }

    pub(crate) fn to_words(self) -> Vec<u64> {
        [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.n_z,
            self.n_measures,
            self.seq_len,
            self.l_mem,
            self.disc_hidden,
        ]
        .iter()
        .map(|&v| v as u64)
        .collect()
    }

    pub(crate) fn from_words(w: &[u64]) -> Result<Self, ModelError> {
        if w.len() != 9 {
            return Err(ModelError::Config(format!("{} config words", w.len())));
        }
        let c = ModelConfig {
            d_model: w[0] as usize,
            n_layers: w[1] as usize,
            n_heads: w[2] as usize,
            d_ff: w[3] as usize,
            n_z: w[4] as usize,
            n_measures: w[5] as usize,
            seq_len: w[6] as usize,
            l_mem: w[7] as usize,
            disc_hidden: w[8] as usize,
        };
        c.validate()?;
        Ok(c)
    }
}
