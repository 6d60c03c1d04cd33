//! Greedy, beam, and streaming decoding over alignment-driven output steps.
//!
//! The halting layer lives on the encoder side, so every hypothesis in a beam
//! shares one segmentation and one sequence of contexts. Each output step
//! expands every hypothesis over the ordinary (non-special) symbols and
//! scores them by `log p(y|x) + gamma * log p_lm(y)`.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderState, FIRST_LABEL, SOS};
use crate::encoder::{EncoderStream, FrameSequence};
use crate::error::{contract, Error, Result};
use crate::halting::{HaltingStream, HaltingTrace};
use crate::lm::{joint_score, LanguageModel, LmState};
use crate::model::AcsModel;
use crate::numerics::{Graph, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub gamma: f64,
    /// Context window used at decode time; at most the decoder's trained window.
    pub window: usize,
    pub nbest: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 8,
            gamma: 0.0,
            window: 1,
            nbest: 1,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 {
            return Err(Error::InvalidConfig("beam width must be at least 1".into()));
        }
        if self.nbest < 1 || self.nbest > self.width {
            return Err(Error::InvalidConfig(format!(
                "n-best size {} must lie in 1..={}",
                self.nbest, self.width
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// A partial transcript together with its recurrent states.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub symbols: Vec<usize>,
    pub score: f64,
    pub decoder: DecoderState,
    pub lm: Option<LmState>,
}

impl Hypothesis {
    fn last(&self) -> usize {
        self.symbols.last().copied().unwrap_or(SOS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedHypothesis {
    pub symbols: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub id: String,
    /// Sorted by descending score.
    pub nbest: Vec<DecodedHypothesis>,
    pub trace: HaltingTrace,
    pub contexts: Vec<Vec<f64>>,
    pub emission_steps: Vec<usize>,
    pub halting_evaluations: usize,
}

impl DecodeOutput {
    pub fn best(&self) -> &DecodedHypothesis {
        &self.nbest[0]
    }
}

struct LmSide<'l> {
    lm: &'l LanguageModel,
    graph: Graph<'l>,
}

/// Synchronous beam over output steps.
struct Beam<'l> {
    width: usize,
    gamma: f64,
    lm: Option<LmSide<'l>>,
    hyps: Vec<Hypothesis>,
}

impl<'l> Beam<'l> {
    fn new(model: &AcsModel, g: &mut Graph<'_>, lm: Option<&'l LanguageModel>, cfg: &BeamConfig) -> Result<Self> {
        let lm = match lm {
            Some(lm) => {
                contract!(
                    lm.vocab_size == model.config.vocab_size,
                    "language model vocab {} does not match model vocab {}",
                    lm.vocab_size,
                    model.config.vocab_size
                );
                Some(LmSide {
                    lm,
                    graph: Graph::new(&lm.params),
                })
            }
            None => None,
        };
        let mut beam = Self {
            width: cfg.width,
            gamma: cfg.gamma,
            lm,
            hyps: Vec::new(),
        };
        let decoder = model.decoder.initial_state(g);
        let lm_state = beam.lm.as_mut().map(|s| s.lm.initial_state(&mut s.graph));
        beam.hyps.push(Hypothesis {
            symbols: Vec::new(),
            score: 0.0,
            decoder,
            lm: lm_state,
        });
        Ok(beam)
    }

    fn lm_log_probs(&mut self, state: Option<LmState>, y: usize) -> Result<Option<(LmState, Vec<f64>)>> {
        match (&mut self.lm, state) {
            (Some(side), Some(st)) => {
                let (next, logp) = side.lm.step(&mut side.graph, st, y)?;
                Ok(Some((next, side.graph.data(logp).to_vec())))
            }
            _ => Ok(None),
        }
    }

    fn advance(&mut self, model: &AcsModel, g: &mut Graph<'_>, window: NodeId) -> Result<()> {
        let vocab = model.config.vocab_size;
        let mut expanded = Vec::with_capacity(self.hyps.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(self.hyps.len() * vocab);
        let hyps = std::mem::take(&mut self.hyps);
        for (parent, h) in hyps.iter().enumerate() {
            let (dec, logp) = model.decoder.step(g, h.decoder, h.last(), window)?;
            let logp = g.data(logp).to_vec();
            let lm = self.lm_log_probs(h.lm, h.last())?;
            for s in FIRST_LABEL..vocab {
                let lm_term = lm.as_ref().map_or(0.0, |(_, l)| l[s]);
                cands.push((h.score + joint_score(logp[s], lm_term, self.gamma), s, parent));
            }
            expanded.push((dec, lm.map(|(st, _)| st)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(self.width);
        self.hyps = cands
            .into_iter()
            .map(|(score, s, parent)| {
                let mut symbols = hyps[parent].symbols.clone();
                symbols.push(s);
                Hypothesis {
                    symbols,
                    score,
                    decoder: expanded[parent].0,
                    lm: expanded[parent].1,
                }
            })
            .collect();
        if let Some(side) = &self.lm {
            side.graph.check_finite()?;
        }
        Ok(())
    }

    /// Length of the prefix shared by every live hypothesis.
    fn settled(&self) -> usize {
        let first = &self.hyps[0].symbols;
        self.hyps[1..].iter().fold(first.len(), |n, h| {
            first
                .iter()
                .zip(&h.symbols)
                .take(n)
                .take_while(|(a, b)| a == b)
                .count()
        })
    }

    fn finish(&self, nbest: usize) -> Vec<DecodedHypothesis> {
        self.hyps
            .iter()
            .take(nbest)
            .map(|h| DecodedHypothesis {
                symbols: h.symbols.clone(),
                score: h.score,
            })
            .collect()
    }
}

fn check_window(model: &AcsModel, window: usize) -> Result<()> {
    if window > model.config.decoder.window {
        return Err(Error::InvalidConfig(format!(
            "decode window {window} exceeds the model's trained window {}",
            model.config.decoder.window
        )));
    }
    Ok(())
}

/// Picks the best-scoring symbol at each step and feeds it back.
pub fn greedy_decode(
    model: &AcsModel,
    lm: Option<&LanguageModel>,
    frames: &FrameSequence,
    gamma: f64,
    window: usize,
) -> Result<DecodeOutput> {
    check_window(model, window)?;
    let mut g = Graph::new(&model.params);
    let states = model.encode(&mut g, frames)?;
    let (trace, contexts, emission_steps) = model.align(&mut g, &states)?;

    let mut lm_graph = lm.map(|l| Graph::new(&l.params));
    let mut lm_state = match (lm, lm_graph.as_mut()) {
        (Some(l), Some(lg)) => Some(l.initial_state(lg)),
        _ => None,
    };
    let mut state = model.decoder.initial_state(&mut g);
    let mut symbols = Vec::with_capacity(contexts.len());
    let mut score = 0.0;
    let mut prev = SOS;
    for i in 0..contexts.len() {
        let w = model.decoder.window(&mut g, &contexts, i, window)?;
        let (next, logp) = model.decoder.step(&mut g, state, prev, w)?;
        let lm_logp = match (lm, lm_graph.as_mut(), lm_state) {
            (Some(l), Some(lg), Some(st)) => {
                let (ns, lp) = l.step(lg, st, prev)?;
                lm_state = Some(ns);
                Some(lg.data(lp).to_vec())
            }
            _ => None,
        };
        let logp = g.data(logp);
        let mut best = (f64::NEG_INFINITY, FIRST_LABEL);
        for s in FIRST_LABEL..model.config.vocab_size {
            let v = score + joint_score(logp[s], lm_logp.as_ref().map_or(0.0, |l| l[s]), gamma);
            if v > best.0 {
                best = (v, s);
            }
        }
        score = best.0;
        prev = best.1;
        symbols.push(prev);
        state = next;
    }
    g.check_finite()?;
    Ok(DecodeOutput {
        id: frames.id.clone(),
        nbest: vec![DecodedHypothesis { symbols, score }],
        contexts: contexts.iter().map(|&c| g.data(c).to_vec()).collect(),
        halting_evaluations: trace.activations.len(),
        trace,
        emission_steps,
    })
}

/// Fixed-width beam search, optionally fused with a language model.
pub fn beam_decode(
    model: &AcsModel,
    lm: Option<&LanguageModel>,
    frames: &FrameSequence,
    cfg: &BeamConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    check_window(model, cfg.window)?;
    let mut g = Graph::new(&model.params);
    let states = model.encode(&mut g, frames)?;
    let (trace, contexts, emission_steps) = model.align(&mut g, &states)?;
    let mut beam = Beam::new(model, &mut g, lm, cfg)?;
    for i in 0..contexts.len() {
        let w = model.decoder.window(&mut g, &contexts, i, cfg.window)?;
        beam.advance(model, &mut g, w)?;
    }
    g.check_finite()?;
    Ok(DecodeOutput {
        id: frames.id.clone(),
        nbest: beam.finish(cfg.nbest),
        contexts: contexts.iter().map(|&c| g.data(c).to_vec()).collect(),
        halting_evaluations: trace.activations.len(),
        trace,
        emission_steps,
    })
}

/// One symbol committed by the streaming decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emission {
    pub index: usize,
    pub symbol: usize,
    /// Frames consumed when the symbol was committed.
    pub frames_consumed: usize,
    /// Committed only at end of stream.
    pub at_flush: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub output: DecodeOutput,
    pub emissions: Vec<Emission>,
}

/// Frame-by-frame decoding with a unidirectional encoder.
///
/// Output `i` is computed once context `i + window` exists. With a beam wider
/// than one, a symbol is committed once every live hypothesis agrees on it.
pub struct StreamingDecoder<'m, 'l> {
    model: &'m AcsModel,
    graph: Graph<'m>,
    encoder: EncoderStream,
    halting: HaltingStream,
    contexts: Vec<NodeId>,
    emission_steps: Vec<usize>,
    beam: Beam<'l>,
    cfg: BeamConfig,
    next_output: usize,
    emissions: Vec<Emission>,
    frames: usize,
    id: String,
}

impl<'m, 'l> StreamingDecoder<'m, 'l> {
    pub fn new(
        model: &'m AcsModel,
        lm: Option<&'l LanguageModel>,
        cfg: BeamConfig,
        id: impl Into<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_window(model, cfg.window)?;
        if model.is_bidirectional() {
            return Err(Error::InvalidConfig(
                "streaming decode needs a unidirectional encoder".into(),
            ));
        }
        let mut graph = Graph::new(&model.params);
        let encoder = model.encoder.stream(&mut graph)?;
        let halting = HaltingStream::new(&model.halting)?;
        let beam = Beam::new(model, &mut graph, lm, &cfg)?;
        Ok(Self {
            model,
            graph,
            encoder,
            halting,
            contexts: Vec::new(),
            emission_steps: Vec::new(),
            beam,
            cfg,
            next_output: 0,
            emissions: Vec::new(),
            frames: 0,
            id: id.into(),
        })
    }

    pub fn contexts_emitted(&self) -> usize {
        self.contexts.len()
    }

    pub fn halting_evaluations(&self) -> usize {
        self.halting.evaluations()
    }

    /// Feeds one frame and returns the symbols it commits.
    pub fn push_frame(&mut self, frame: &[f64]) -> Result<Vec<Emission>> {
        let model = self.model;
        let states = self.encoder.push(&mut self.graph, &model.encoder, frame)?;
        self.frames += 1;
        for s in states {
            for e in self.halting.push_state(&mut self.graph, &model.halting, s)? {
                self.contexts.push(e.context);
                self.emission_steps.push(e.emission_step);
            }
        }
        self.run_ready(false)
    }

    /// Flushes the encoder and halting layer and decodes the remaining outputs.
    pub fn finish(mut self) -> Result<StreamOutput> {
        let model = self.model;
        let states = self.encoder.finish(&mut self.graph, &model.encoder)?;
        if states.is_empty() && self.frames == 0 {
            return Err(Error::Contract("no frames were streamed".into()));
        }
        for s in states {
            for e in self.halting.push_state(&mut self.graph, &model.halting, s)? {
                self.contexts.push(e.context);
                self.emission_steps.push(e.emission_step);
            }
        }
        for e in self.halting.finish(&mut self.graph, &model.halting)? {
            self.contexts.push(e.context);
            self.emission_steps.push(e.emission_step);
        }
        self.run_ready(true)?;
        self.graph.check_finite()?;
        let graph = &self.graph;
        let evaluations = self.halting.evaluations();
        Ok(StreamOutput {
            output: DecodeOutput {
                id: self.id,
                nbest: self.beam.finish(self.cfg.nbest),
                contexts: self.contexts.iter().map(|&c| graph.data(c).to_vec()).collect(),
                emission_steps: self.emission_steps,
                halting_evaluations: evaluations,
                trace: self.halting.into_trace(),
            },
            emissions: self.emissions,
        })
    }

    fn run_ready(&mut self, flushing: bool) -> Result<Vec<Emission>> {
        let model = self.model;
        while self.next_output < self.contexts.len()
            && (flushing || self.next_output + self.cfg.window < self.contexts.len())
        {
            let w = model
                .decoder
                .window(&mut self.graph, &self.contexts, self.next_output, self.cfg.window)?;
            self.beam.advance(model, &mut self.graph, w)?;
            self.next_output += 1;
        }
        let upto = if flushing {
            self.beam.hyps[0].symbols.len()
        } else {
            self.beam.settled()
        };
        let start = self.emissions.len();
        for index in start..upto {
            self.emissions.push(Emission {
                index,
                symbol: self.beam.hyps[0].symbols[index],
                frames_consumed: self.frames,
                at_flush: flushing,
            });
        }
        Ok(self.emissions[start..].to_vec())
    }
}

/// Streams `frames` one at a time through a [`StreamingDecoder`].
pub fn streaming_decode(
    model: &AcsModel,
    lm: Option<&LanguageModel>,
    frames: &FrameSequence,
    cfg: &BeamConfig,
) -> Result<StreamOutput> {
    frames.validate(Some(model.config.input_dim))?;
    let mut dec = StreamingDecoder::new(model, lm, cfg.clone(), frames.id.clone())?;
    for f in &frames.frames {
        dec.push_frame(f)?;
    }
    dec.finish()
}
