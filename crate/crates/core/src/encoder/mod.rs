//! Token + visit embeddings feeding a post-norm transformer encoder.

mod input;
mod model;
mod vocab;


pub use input::{build_input, build_trajectory_input, flatten_recent, InputSequence};
pub use model::{
    embed_input, encode_eval, BoundEncoder, Encoder, EncoderConfig, Mode, TOKEN_EMBEDDING,
    VISIT_EMBEDDING,
};
pub use vocab::{Vocabulary, MASK, NUM_RESERVED, PAD, UNK};

use crate::error::Result;
use crate::numkit::{ParamStore, Rng, Tensor};

/// An encoder layout together with the store that holds its values.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub encoder: Encoder,
    pub store: ParamStore,
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::register(config, &mut store, rng)?;
        Ok(EncoderParams { encoder, store })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn token_embedding(&self) -> &Tensor {
        self.encoder.token_embedding(&self.store)
    }

    pub fn encode(&self, seq: &InputSequence) -> Result<Tensor> {
        encode_eval(&self.encoder, &self.store, seq)
    }
}
