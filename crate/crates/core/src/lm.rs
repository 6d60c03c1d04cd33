//! Recurrent language model over output symbols, fused at decode time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::SOS;
use crate::encoder::GruCell;
use crate::error::{contract, Error, Result};
use crate::numerics::{clip_global_norm, AdamConfig, AdamState, Graph, Grads, NodeId, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub units: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            units: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmState {
    pub hidden: NodeId,
    pub last: usize,
}

/// Log-linear fusion score for one symbol.
pub fn joint_score(logp_asr: f64, logp_lm: f64, gamma: f64) -> f64 {
    logp_asr + gamma * logp_lm
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    embedding: ParamId,
    cell: GruCell,
    out_w: ParamId,
    out_b: ParamId,
}

impl LanguageModel {
    /// Builds the model with zero parameters.
    pub fn new(config: LmConfig, vocab_size: usize) -> Result<Self> {
        if config.units == 0 || config.embed_dim == 0 || vocab_size == 0 {
            return Err(Error::InvalidConfig("language model sizes must be positive".into()));
        }
        let mut params = ParamStore::new();
        let embedding = params.add("lm.embedding", vec![vocab_size, config.embed_dim])?;
        let cell = GruCell::register(&mut params, "lm.gru", config.embed_dim, config.units)?;
        let out_w = params.add("lm.out_w", vec![vocab_size, config.units])?;
        let out_b = params.add("lm.out_b", vec![vocab_size])?;
        Ok(Self {
            config,
            vocab_size,
            params,
            embedding,
            cell,
            out_w,
            out_b,
        })
    }

    /// Builds the model and draws parameters uniformly from `[-0.1, 0.1]`.
    pub fn initialized(config: LmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut lm = Self::new(config, vocab_size)?;
        lm.params.init_uniform(-0.1, 0.1, seed)?;
        Ok(lm)
    }

    pub fn out_w(&self) -> ParamId {
        self.out_w
    }

    pub fn out_b(&self) -> ParamId {
        self.out_b
    }

    pub fn initial_state(&self, g: &mut Graph<'_>) -> LmState {
        LmState {
            hidden: g.zeros(self.config.units),
            last: SOS,
        }
    }

    /// Consumes `y_prev`; returns the new state and log-probabilities of the next symbol.
    pub fn step(&self, g: &mut Graph<'_>, state: LmState, y_prev: usize) -> Result<(LmState, NodeId)> {
        contract!(
            y_prev < self.vocab_size,
            "symbol id {y_prev} outside vocab of {}",
            self.vocab_size
        );
        let e = g.param(self.embedding);
        let x = g.row(e, y_prev);
        let h = self.cell.try_step(g, x, state.hidden)?;
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        let logits = g.matvec(w, h);
        let logits = g.add(logits, b);
        Ok((
            LmState {
                hidden: h,
                last: y_prev,
            },
            g.log_softmax(logits),
        ))
    }

    /// Mean next-symbol cross-entropy of `seq` (starting from `<SOS>`), recorded on `g`.
    pub fn sequence_loss(&self, g: &mut Graph<'_>, seq: &[usize]) -> Result<NodeId> {
        contract!(!seq.is_empty(), "empty label sequence");
        let mut state = self.initial_state(g);
        let mut y = SOS;
        let mut terms = Vec::with_capacity(seq.len());
        for &target in seq {
            contract!(target < self.vocab_size, "symbol id {target} outside vocab");
            let (s, logp) = self.step(g, state, y)?;
            terms.push(g.pick(logp, target));
            state = s;
            y = target;
        }
        let v = g.concat(&terms);
        let total = g.sum(v);
        Ok(g.affine(total, -1.0 / seq.len() as f64, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 3e-3,
            clip_norm: 2.0,
            seed: 7,
        }
    }
}

/// Trains on label text only; returns the mean loss of each epoch.
pub fn train_lm(lm: &mut LanguageModel, corpus: &[Vec<usize>], cfg: &LmTrainConfig) -> Result<Vec<f64>> {
    contract!(!corpus.is_empty(), "language model corpus is empty");
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be at least 1".into()));
    }
    let mut adam = AdamState::new(
        &lm.params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in &order {
            if corpus[i].is_empty() {
                continue;
            }
            let mut grads: Grads = {
                let mut g = Graph::new(&lm.params);
                let loss = lm.sequence_loss(&mut g, &corpus[i])?;
                total += g.scalar(loss);
                g.backward(loss)?
            };
            count += 1;
            clip_global_norm(&mut grads, cfg.clip_norm)?;
            adam.step(&mut lm.params, &grads)?;
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric("language model loss diverged".into()));
        }
        history.push(mean);
    }
    Ok(history)
}
