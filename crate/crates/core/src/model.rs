//! The assembled transducer: encoder, halting layer, and decoder sharing one parameter store.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, FrameSequence};
use crate::error::{contract, Result};
use crate::halting::{self, HaltingConfig, HaltingLayer, HaltingTrace};
use crate::numerics::{Graph, NodeId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub halting: HaltingConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn online(input_dim: usize, vocab_size: usize) -> Self {
        Self {
            input_dim,
            vocab_size,
            encoder: EncoderConfig::online(32),
            halting: HaltingConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn offline(input_dim: usize, vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::offline(16),
            ..Self::online(input_dim, vocab_size)
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub halting: HaltingLayer,
    pub decoder: Decoder,
}

impl AcsModel {
    /// Builds the model with zero parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::register(&mut params, config.encoder.clone(), config.input_dim)?;
        let state_dim = encoder.output_dim();
        let halting = HaltingLayer::register(&mut params, config.halting.clone(), state_dim)?;
        let decoder = Decoder::register(
            &mut params,
            config.decoder.clone(),
            config.vocab_size,
            state_dim,
        )?;
        Ok(Self {
            config,
            params,
            encoder,
            halting,
            decoder,
        })
    }

    /// Builds the model and draws every parameter uniformly from `[-0.1, 0.1]`.
    pub fn initialized(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.init_uniform(-0.1, 0.1, seed)?;
        Ok(m)
    }

    /// Replaces parameters with those of a checkpoint; names and shapes must match.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        self.params.load_from(store)
    }

    pub fn is_bidirectional(&self) -> bool {
        self.config.encoder.bidirectional
    }

    pub fn encode(&self, g: &mut Graph<'_>, frames: &FrameSequence) -> Result<Vec<NodeId>> {
        self.encoder.forward(g, frames)
    }

    /// Halting activations for every state, unscaled.
    pub fn activations(&self, g: &mut Graph<'_>, states: &[NodeId]) -> Result<Vec<NodeId>> {
        self.halting.activations(g, states)
    }

    /// Inference alignment: segmentation with end-of-stream flush and pooled contexts.
    pub fn align(
        &self,
        g: &mut Graph<'_>,
        states: &[NodeId],
    ) -> Result<(HaltingTrace, Vec<NodeId>, Vec<usize>)> {
        contract!(!states.is_empty(), "no encoder states to align");
        halting::align(g, &self.halting, states)
    }
}
