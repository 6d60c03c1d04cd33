//! Halting layer and accumulate-and-halt segmentation.
//!
//! Each encoder state `h_j` gets an activation `a_j ∈ (0, 1)` from a centered
//! 1-D convolution, a rectifier, a scalar projection and a sigmoid. Scanning
//! left to right, a segment closes at the first step where the running sum of
//! its activations reaches `1 - epsilon`. The closing step's weight is the
//! remainder `1 - (sum of the segment's earlier activations)`, so every
//! segment's weights sum to one, and the segment's states are pooled with
//! those weights into one context vector.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltingConfig {
    pub epsilon: f64,
    /// Convolution width; odd so the window is centered.
    pub kernel_width: usize,
    pub channels: usize,
}

impl Default for HaltingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            kernel_width: 3,
            channels: 16,
        }
    }
}

impl HaltingConfig {
    /// 64 kernels of width 3.
    pub fn large() -> Self {
        Self {
            channels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel width must be odd, got {}",
                self.kernel_width
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("halting channels must be positive".into()));
        }
        Ok(())
    }

    /// Encoder steps of lookahead introduced by the centered window.
    pub fn lookahead(&self) -> usize {
        (self.kernel_width - 1) / 2
    }
}

/// Convolution + rectifier + scalar sigmoid unit.
#[derive(Debug, Clone)]
pub struct HaltingLayer {
    pub config: HaltingConfig,
    pub state_dim: usize,
    kernel: ParamId,
    kernel_bias: ParamId,
    proj: ParamId,
    proj_bias: ParamId,
}

impl HaltingLayer {
    pub fn register(store: &mut ParamStore, config: HaltingConfig, state_dim: usize) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(Self {
            kernel: store.add("halting.kernel", vec![c, config.kernel_width * state_dim])?,
            kernel_bias: store.add("halting.kernel_bias", vec![c])?,
            proj: store.add("halting.proj", vec![1, c])?,
            proj_bias: store.add("halting.proj_bias", vec![1])?,
            config,
            state_dim,
        })
    }

    pub fn proj_bias(&self) -> ParamId {
        self.proj_bias
    }

    /// Pre-sigmoid halting score for the step at the center of `window`;
    /// `None` slots are zero padding past either end of the sequence.
    pub fn score_at(&self, g: &mut Graph<'_>, window: &[Option<NodeId>]) -> NodeId {
        debug_assert_eq!(window.len(), self.config.kernel_width);
        let parts: Vec<NodeId> = window
            .iter()
            .map(|s| match s {
                Some(n) => *n,
                None => g.zeros(self.state_dim),
            })
            .collect();
        let x = g.concat(&parts);
        let (k, kb) = (g.param(self.kernel), g.param(self.kernel_bias));
        let e = g.matvec(k, x);
        let e = g.add(e, kb);
        let e = g.relu(e);
        let (p, pb) = (g.param(self.proj), g.param(self.proj_bias));
        let s = g.matvec(p, e);
        g.add(s, pb)
    }

    /// Maps a score to an activation strictly inside (0, 1).
    pub fn squash(g: &mut Graph<'_>, score: NodeId) -> NodeId {
        let a = g.sigmoid(score);
        // keep saturated sigmoids strictly inside (0, 1)
        g.clamp(a, f64::MIN_POSITIVE, MAX_ACTIVATION)
    }

    pub fn activation_at(&self, g: &mut Graph<'_>, window: &[Option<NodeId>]) -> NodeId {
        let s = self.score_at(g, window);
        Self::squash(g, s)
    }

    /// One activation per state, with zero padding at both edges.
    pub fn activations(&self, g: &mut Graph<'_>, states: &[NodeId]) -> Result<Vec<NodeId>> {
        let scores = self.scores(g, states)?;
        Ok(scores.into_iter().map(|s| Self::squash(g, s)).collect())
    }

    /// Pre-sigmoid scores for every state.
    pub fn scores(&self, g: &mut Graph<'_>, states: &[NodeId]) -> Result<Vec<NodeId>> {
        contract!(!states.is_empty(), "halting layer needs at least one state");
        for &s in states {
            contract!(
                g.dim(s) == self.state_dim,
                "state dimension {} does not match halting layer {}",
                g.dim(s),
                self.state_dim
            );
        }
        let half = self.config.lookahead() as isize;
        let n = states.len() as isize;
        Ok((0..n)
            .map(|j| {
                let window: Vec<Option<NodeId>> = (j - half..=j + half)
                    .map(|k| (0..n).contains(&k).then(|| states[k as usize]))
                    .collect();
                self.score_at(g, &window)
            })
            .collect())
    }
}

/// Largest `f64` below one.
pub const MAX_ACTIVATION: f64 = 1.0 - f64::EPSILON / 2.0;

/// Closed interval of encoder steps assigned to one output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    /// Weight of the closing step.
    pub remainder: f64,
    /// Closed by end-of-stream rather than by reaching the threshold.
    pub forced: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Activations, halting probabilities, and the resulting partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltingTrace {
    pub activations: Vec<f64>,
    /// `p_j`: the activation, or the remainder at a segment's closing step.
    /// Steps in the pending tail keep their activation.
    pub probabilities: Vec<f64>,
    pub segments: Vec<Segment>,
    /// Trailing steps whose activations never reached the threshold.
    pub tail: Option<(usize, usize)>,
}

impl HaltingTrace {
    /// Force-closes the pending tail into a final segment using the remainder rule.
    pub fn flushed(mut self) -> Self {
        if let Some((start, end)) = self.tail.take() {
            let prior: f64 = prefix_sum(&self.activations[start..end]);
            let remainder = 1.0 - prior;
            self.probabilities[end] = remainder;
            self.segments.push(Segment {
                start,
                end,
                remainder,
                forced: true,
            });
        }
        self
    }

    pub fn complete_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| !s.forced)
    }
}

// Left-to-right sum, the order used everywhere a remainder is formed.
fn prefix_sum(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in xs {
        s += x;
    }
    s
}

/// A segment emitted by [`Segmenter`], with its per-step weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedSegment {
    pub segment: Segment,
    pub probabilities: Vec<f64>,
}

/// Incremental accumulate-and-halt state machine.
#[derive(Debug, Clone)]
pub struct Segmenter {
    threshold: f64,
    start: usize,
    next: usize,
    running: f64,
    open: Vec<f64>,
}

impl Segmenter {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        Ok(Self {
            threshold: 1.0 - epsilon,
            start: 0,
            next: 0,
            running: 0.0,
            open: Vec::new(),
        })
    }

    /// Sum of the open segment's activations.
    pub fn running_sum(&self) -> f64 {
        self.running
    }

    pub fn steps_seen(&self) -> usize {
        self.next
    }

    pub fn push(&mut self, a: f64) -> Result<Option<ClosedSegment>> {
        contract!(
            a > 0.0 && a < 1.0,
            "activation {a} at step {} outside (0, 1)",
            self.next
        );
        let j = self.next;
        self.next += 1;
        let sum = self.running + a;
        if sum >= self.threshold {
            let remainder = 1.0 - self.running;
            let mut probabilities = std::mem::take(&mut self.open);
            probabilities.push(remainder);
            let closed = ClosedSegment {
                segment: Segment {
                    start: self.start,
                    end: j,
                    remainder,
                    forced: false,
                },
                probabilities,
            };
            self.start = j + 1;
            self.running = 0.0;
            Ok(Some(closed))
        } else {
            self.running = sum;
            self.open.push(a);
            Ok(None)
        }
    }

    /// Steps of the open segment, if any.
    pub fn pending(&self) -> Option<(usize, usize)> {
        (!self.open.is_empty()).then(|| (self.start, self.next - 1))
    }

    /// Closes the open segment by the remainder rule.
    pub fn flush(&mut self) -> Option<ClosedSegment> {
        if self.open.is_empty() {
            return None;
        }
        let mut probabilities = std::mem::take(&mut self.open);
        let last = probabilities.len() - 1;
        let remainder = 1.0 - prefix_sum(&probabilities[..last]);
        probabilities[last] = remainder;
        let closed = ClosedSegment {
            segment: Segment {
                start: self.start,
                end: self.next - 1,
                remainder,
                forced: true,
            },
            probabilities,
        };
        self.start = self.next;
        self.running = 0.0;
        Some(closed)
    }
}

/// Partitions `activations` by accumulate-and-halt. The pending tail is
/// reported separately; see [`HaltingTrace::flushed`].
pub fn segment(activations: &[f64], epsilon: f64) -> Result<HaltingTrace> {
    let mut seg = Segmenter::new(epsilon)?;
    let mut probabilities = activations.to_vec();
    let mut segments = Vec::new();
    for &a in activations {
        if let Some(c) = seg.push(a)? {
            probabilities[c.segment.end] = c.segment.remainder;
            segments.push(c.segment);
        }
    }
    Ok(HaltingTrace {
        activations: activations.to_vec(),
        probabilities,
        segments,
        tail: seg.pending(),
    })
}

/// Context vectors, one per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSequence {
    pub contexts: Vec<Vec<f64>>,
    /// Encoder index (0-based) of the last state needed to produce each context,
    /// including the convolution lookahead.
    pub emission_steps: Vec<usize>,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Emission step for a segment ending at `end` when `lookahead` future states
/// are needed and the utterance has `total` states.
pub fn emission_step(end: usize, lookahead: usize, total: usize) -> usize {
    (end + lookahead).min(total - 1)
}

/// `Σ p_j h_j` on the tape, accumulated left to right.
pub fn pool_segment(g: &mut Graph<'_>, states: &[NodeId], weights: &[NodeId]) -> NodeId {
    debug_assert_eq!(states.len(), weights.len());
    let mut acc = g.scale_by(states[0], weights[0]);
    for (&h, &p) in states.iter().zip(weights).skip(1) {
        let term = g.scale_by(h, p);
        acc = g.add(acc, term);
    }
    acc
}

/// Pools every segment of `trace` over plain state vectors. Only the segments
/// present in the trace are pooled; flush first to include the tail.
pub fn pool_contexts(states: &[Vec<f64>], trace: &HaltingTrace, lookahead: usize) -> Result<ContextSequence> {
    let mut contexts = Vec::with_capacity(trace.segments.len());
    let mut emission_steps = Vec::with_capacity(trace.segments.len());
    for s in &trace.segments {
        contract!(
            s.end < states.len() && s.end < trace.probabilities.len(),
            "segment {}..={} outside {} states",
            s.start,
            s.end,
            states.len()
        );
        let p = &trace.probabilities;
        let mut acc: Vec<f64> = states[s.start].iter().map(|x| x * p[s.start]).collect();
        for j in s.start + 1..=s.end {
            for (a, x) in acc.iter_mut().zip(&states[j]) {
                *a += x * p[j];
            }
        }
        contexts.push(acc);
        emission_steps.push(emission_step(s.end, lookahead, states.len()));
    }
    Ok(ContextSequence {
        contexts,
        emission_steps,
    })
}

/// A context produced by [`HaltingStream`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmittedContext {
    pub context: NodeId,
    pub segment: Segment,
    pub emission_step: usize,
}

/// Online halting: consumes encoder states one at a time and emits a context
/// as soon as a segment closes.
#[derive(Debug, Clone)]
pub struct HaltingStream {
    states: Vec<NodeId>,
    activation_nodes: Vec<NodeId>,
    segmenter: Segmenter,
    trace: HaltingTrace,
    evaluations: usize,
    finished: bool,
}

impl HaltingStream {
    pub fn new(layer: &HaltingLayer) -> Result<Self> {
        Ok(Self {
            states: Vec::new(),
            activation_nodes: Vec::new(),
            segmenter: Segmenter::new(layer.config.epsilon)?,
            trace: HaltingTrace {
                activations: Vec::new(),
                probabilities: Vec::new(),
                segments: Vec::new(),
                tail: None,
            },
            evaluations: 0,
            finished: false,
        })
    }

    /// Halting-unit evaluations performed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn running_sum(&self) -> f64 {
        self.segmenter.running_sum()
    }

    pub fn push_state(
        &mut self,
        g: &mut Graph<'_>,
        layer: &HaltingLayer,
        state: NodeId,
    ) -> Result<Vec<EmittedContext>> {
        if self.finished {
            return Err(Error::State("halting stream already flushed".into()));
        }
        contract!(
            g.dim(state) == layer.state_dim,
            "state dimension {} does not match halting layer {}",
            g.dim(state),
            layer.state_dim
        );
        self.states.push(state);
        let mut out = Vec::new();
        let la = layer.config.lookahead();
        while self.activation_nodes.len() + la < self.states.len() {
            if let Some(e) = self.evaluate_next(g, layer)? {
                out.push(e);
            }
        }
        Ok(out)
    }

    /// Evaluates the remaining activations with zero right padding and
    /// force-closes any pending segment.
    pub fn finish(&mut self, g: &mut Graph<'_>, layer: &HaltingLayer) -> Result<Vec<EmittedContext>> {
        if self.finished {
            return Err(Error::State("halting stream already flushed".into()));
        }
        let mut out = Vec::new();
        while self.activation_nodes.len() < self.states.len() {
            if let Some(e) = self.evaluate_next(g, layer)? {
                out.push(e);
            }
        }
        self.finished = true;
        if let Some(c) = self.segmenter.flush() {
            out.push(self.close(g, c));
        }
        self.trace.tail = None;
        Ok(out)
    }

    pub fn trace(&self) -> &HaltingTrace {
        &self.trace
    }

    pub fn into_trace(self) -> HaltingTrace {
        self.trace
    }

    fn evaluate_next(&mut self, g: &mut Graph<'_>, layer: &HaltingLayer) -> Result<Option<EmittedContext>> {
        let j = self.activation_nodes.len() as isize;
        let half = layer.config.lookahead() as isize;
        let n = self.states.len() as isize;
        let window: Vec<Option<NodeId>> = (j - half..=j + half)
            .map(|k| (0..n).contains(&k).then(|| self.states[k as usize]))
            .collect();
        let a = layer.activation_at(g, &window);
        self.evaluations += 1;
        self.activation_nodes.push(a);
        let value = g.scalar(a);
        self.trace.activations.push(value);
        self.trace.probabilities.push(value);
        let closed = self.segmenter.push(value)?;
        self.trace.tail = self.segmenter.pending();
        Ok(closed.map(|c| self.close(g, c)))
    }

    fn close(&mut self, g: &mut Graph<'_>, c: ClosedSegment) -> EmittedContext {
        let s = c.segment;
        self.trace.probabilities[s.end] = s.remainder;
        self.trace.segments.push(s);
        let weights: Vec<NodeId> = c
            .probabilities
            .iter()
            .map(|&p| g.constant_scalar(p))
            .collect();
        let context = pool_segment(g, &self.states[s.start..=s.end], &weights);
        EmittedContext {
            context,
            segment: s,
            emission_step: self.states.len() - 1,
        }
    }
}

/// Batch alignment on the tape: activations, segmentation with end-of-stream
/// flush, and pooled context nodes. Bit-identical to feeding the same states
/// through a [`HaltingStream`].
pub fn align(
    g: &mut Graph<'_>,
    layer: &HaltingLayer,
    states: &[NodeId],
) -> Result<(HaltingTrace, Vec<NodeId>, Vec<usize>)> {
    let nodes = layer.activations(g, states)?;
    let values: Vec<f64> = nodes.iter().map(|&n| g.scalar(n)).collect();
    let trace = segment(&values, layer.config.epsilon)?.flushed();
    let mut contexts = Vec::with_capacity(trace.segments.len());
    let mut steps = Vec::with_capacity(trace.segments.len());
    for s in &trace.segments {
        let weights: Vec<NodeId> = trace.probabilities[s.start..=s.end]
            .iter()
            .map(|&p| g.constant_scalar(p))
            .collect();
        contexts.push(pool_segment(g, &states[s.start..=s.end], &weights));
        steps.push(emission_step(s.end, layer.config.lookahead(), states.len()));
    }
    Ok((trace, contexts, steps))
}
