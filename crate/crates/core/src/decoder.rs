//! Recurrent decoder over windows of context vectors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::GruCell;
use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<PAD>", "<UNK>", "<SOS>", "<EOS>"];
/// First id available to ordinary symbols.
pub const FIRST_LABEL: usize = SPECIALS.len();

/// Symbol table: ids are dense from 0 and the four special tokens come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse(format!("vocab line {} must be {s}", i + 1)));
            }
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Parse(format!(
                    "vocab line {}: symbol `{s}` is empty or contains whitespace",
                    i + 1
                )));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Parse(format!("vocab symbol `{s}` appears twice")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Specials followed by `labels` generated names.
    pub fn with_labels(labels: usize) -> Self {
        let symbols = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain((0..labels).map(label_name))
            .collect();
        Self::from_symbols(symbols).expect("generated vocab is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.len() - FIRST_LABEL
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.id(symbol).unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn to_text(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_symbols(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("<UNK>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn label_name(i: usize) -> String {
    format!("s{i}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub units: usize,
    /// Neighbouring contexts on each side of the current one.
    pub window: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            units: 32,
            window: 1,
        }
    }
}

impl DecoderConfig {
    /// One layer of 256 units.
    pub fn large() -> Self {
        Self {
            embed_dim: 64,
            units: 256,
            window: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderState {
    pub hidden: NodeId,
    pub step: usize,
}

/// Probabilities over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDistribution {
    pub probabilities: Vec<f64>,
}

impl OutputDistribution {
    pub fn from_log_probs(logp: &[f64]) -> Self {
        Self {
            probabilities: logp.iter().map(|v| v.exp()).collect(),
        }
    }
}

/// Concatenation `[c_{i-slots}; ...; c_i; ...; c_{i+slots}]`. Positions outside
/// the sequence, or farther than `w` from `i`, are zero vectors, so the result
/// always has `(2 * slots + 1) * dim` entries.
pub fn window_contexts(
    g: &mut Graph<'_>,
    contexts: &[NodeId],
    i: usize,
    w: usize,
    slots: usize,
) -> Result<NodeId> {
    contract!(
        i < contexts.len(),
        "output index {i} out of range for {} contexts",
        contexts.len()
    );
    contract!(w <= slots, "window {w} exceeds the decoder's {slots} slots");
    let dim = g.dim(contexts[0]);
    let mut parts = Vec::with_capacity(2 * slots + 1);
    for off in -(slots as isize)..=(slots as isize) {
        let k = i as isize + off;
        if off.unsigned_abs() <= w && k >= 0 && (k as usize) < contexts.len() {
            parts.push(contexts[k as usize]);
        } else {
            parts.push(g.zeros(dim));
        }
    }
    Ok(g.concat(&parts))
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub context_dim: usize,
    embedding: ParamId,
    cell: GruCell,
    out_w: ParamId,
    out_b: ParamId,
}

impl Decoder {
    pub fn register(
        store: &mut ParamStore,
        config: DecoderConfig,
        vocab_size: usize,
        context_dim: usize,
    ) -> Result<Self> {
        if config.units == 0 || config.embed_dim == 0 {
            return Err(Error::InvalidConfig("decoder sizes must be positive".into()));
        }
        if vocab_size <= FIRST_LABEL {
            return Err(Error::InvalidConfig(format!(
                "vocab of {vocab_size} symbols has no labels"
            )));
        }
        let input = config.embed_dim + (2 * config.window + 1) * context_dim;
        Ok(Self {
            embedding: store.add("decoder.embedding", vec![vocab_size, config.embed_dim])?,
            cell: GruCell::register(store, "decoder.gru", input, config.units)?,
            out_w: store.add("decoder.out_w", vec![vocab_size, config.units])?,
            out_b: store.add("decoder.out_b", vec![vocab_size])?,
            config,
            vocab_size,
            context_dim,
        })
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    pub fn initial_state(&self, g: &mut Graph<'_>) -> DecoderState {
        DecoderState {
            hidden: g.zeros(self.config.units),
            step: 0,
        }
    }

    pub fn embed(&self, g: &mut Graph<'_>, y: usize) -> Result<NodeId> {
        contract!(
            y < self.vocab_size,
            "symbol id {y} outside vocab of {}",
            self.vocab_size
        );
        let e = g.param(self.embedding);
        Ok(g.row(e, y))
    }

    /// Window of contexts sized for this decoder.
    pub fn window(&self, g: &mut Graph<'_>, contexts: &[NodeId], i: usize, w: usize) -> Result<NodeId> {
        window_contexts(g, contexts, i, w, self.config.window)
    }

    /// Recurrent update on `[embed(y_prev); window]`, then log-softmax over the vocabulary.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        state: DecoderState,
        y_prev: usize,
        window: NodeId,
    ) -> Result<(DecoderState, NodeId)> {
        let expected = (2 * self.config.window + 1) * self.context_dim;
        contract!(
            g.dim(window) == expected,
            "context window has {} entries, expected {expected}",
            g.dim(window)
        );
        let e = self.embed(g, y_prev)?;
        let x = g.concat(&[e, window]);
        let h = self.cell.try_step(g, x, state.hidden)?;
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        let logits = g.matvec(w, h);
        let logits = g.add(logits, b);
        let logp = g.log_softmax(logits);
        Ok((
            DecoderState {
                hidden: h,
                step: state.step + 1,
            },
            logp,
        ))
    }
}
