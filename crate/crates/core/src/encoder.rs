//! Pyramidal recurrent encoder.
//!
//! Layer 1 runs a GRU over the input frames. Every downsampling layer above it
//! consumes the concatenation of two adjacent lower-layer states, halving the
//! time resolution. An odd-length layer input is padded with one zero state
//! on the right before pairing.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore};

/// Input features for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Vec<f64>>,
}

impl FrameSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Vec<f64>>) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            frames,
        };
        seq.validate(None)?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        contract!(!self.frames.is_empty(), "utterance `{}` has no frames", self.id);
        let d = dim.unwrap_or(self.frames[0].len());
        for (t, f) in self.frames.iter().enumerate() {
            contract!(
                f.len() == d,
                "utterance `{}` frame {t} has dimension {}, expected {d}",
                self.id,
                f.len()
            );
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "utterance `{}` frame {t} is not finite",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Units per layer (per direction when bidirectional).
    pub units: usize,
    /// Which layers consume concatenated pairs of the layer below.
    pub downsample: Vec<bool>,
    pub bidirectional: bool,
}

impl EncoderConfig {
    /// Three layers, top two downsampling, unidirectional.
    pub fn online(units: usize) -> Self {
        Self {
            layers: 3,
            units,
            downsample: vec![false, true, true],
            bidirectional: false,
        }
    }

    pub fn offline(units: usize) -> Self {
        Self {
            bidirectional: true,
            ..Self::online(units)
        }
    }

    /// The large online preset: 3 layers of 512 units.
    pub fn online_large() -> Self {
        Self::online(512)
    }

    /// The large offline preset: 3 layers of 256 units per direction.
    pub fn offline_large() -> Self {
        Self::offline(256)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if self.units == 0 {
            return bad("encoder units must be positive".into());
        }
        if self.downsample.len() != self.layers {
            return bad(format!(
                "downsample mask has {} entries for {} layers",
                self.downsample.len(),
                self.layers
            ));
        }
        if self.downsample[0] {
            return bad("the first encoder layer cannot downsample".into());
        }
        Ok(())
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << self.downsample.iter().filter(|&&d| d).count()
    }

    pub fn output_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.units
        } else {
            self.units
        }
    }

    /// Encoder output length for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        self.downsample
            .iter()
            .fold(frames, |n, &d| if d { n.div_ceil(2) } else { n })
    }
}

/// Gated recurrent unit parameters.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `n = tanh(W_n x + b_n + U_n (r ⊙ h))`, `h' = n + z ⊙ (h − n)`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub units: usize,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_n: ParamId,
    u_n: ParamId,
    b_n: ParamId,
}

impl GruCell {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        units: usize,
    ) -> Result<Self> {
        let mut w = |name: &str, shape: Vec<usize>| store.add(format!("{prefix}.{name}"), shape);
        Ok(Self {
            input_dim,
            units,
            w_z: w("w_z", vec![units, input_dim])?,
            u_z: w("u_z", vec![units, units])?,
            b_z: w("b_z", vec![units])?,
            w_r: w("w_r", vec![units, input_dim])?,
            u_r: w("u_r", vec![units, units])?,
            b_r: w("b_r", vec![units])?,
            w_n: w("w_n", vec![units, input_dim])?,
            u_n: w("u_n", vec![units, units])?,
            b_n: w("b_n", vec![units])?,
        })
    }

    /// One recurrent update with dimension checks.
    pub fn try_step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId) -> Result<NodeId> {
        contract!(
            g.dim(x) == self.input_dim,
            "GRU input has dimension {}, expected {}",
            g.dim(x),
            self.input_dim
        );
        contract!(
            g.dim(h) == self.units,
            "GRU state has dimension {}, expected {}",
            g.dim(h),
            self.units
        );
        Ok(self.step(g, x, h))
    }

    pub(crate) fn step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId) -> NodeId {
        let gate = |g: &mut Graph<'_>, w, u, b| {
            let (w, u, b) = (g.param(w), g.param(u), g.param(b));
            let wx = g.matvec(w, x);
            let uh = g.matvec(u, h);
            let s = g.add(wx, uh);
            let s = g.add(s, b);
            g.sigmoid(s)
        };
        let z = gate(g, self.w_z, self.u_z, self.b_z);
        let r = gate(g, self.w_r, self.u_r, self.b_r);

        let (w_n, u_n, b_n) = (g.param(self.w_n), g.param(self.u_n), g.param(self.b_n));
        let wx = g.matvec(w_n, x);
        let wx = g.add(wx, b_n);
        let rh = g.mul(r, h);
        let urh = g.matvec(u_n, rh);
        let pre = g.add(wx, urh);
        let n = g.tanh(pre);

        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PadSide {
    Right,
    // Used by the backward direction, which walks the reversed sequence but
    // must pair the same frames as the forward direction.
    Left,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_dim: usize,
    forward: Vec<GruCell>,
    backward: Option<Vec<GruCell>>,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, config: EncoderConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        contract!(input_dim > 0, "input dimension must be positive");
        let stack = |store: &mut ParamStore, dir: &str| -> Result<Vec<GruCell>> {
            (0..config.layers)
                .map(|i| {
                    let in_dim = match (i, config.downsample[i]) {
                        (0, _) => input_dim,
                        (_, true) => 2 * config.units,
                        (_, false) => config.units,
                    };
                    GruCell::register(store, &format!("encoder.{dir}.l{i}"), in_dim, config.units)
                })
                .collect()
        };
        let forward = stack(store, "fwd")?;
        let backward = if config.bidirectional {
            Some(stack(store, "bwd")?)
        } else {
            None
        };
        Ok(Self {
            config,
            input_dim,
            forward,
            backward,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Dispatches to the unidirectional or bidirectional pass.
    pub fn forward(&self, g: &mut Graph<'_>, frames: &FrameSequence) -> Result<Vec<NodeId>> {
        if self.config.bidirectional {
            self.bidirectional_forward(g, frames)
        } else {
            self.pyramidal_forward(g, frames)
        }
    }

    /// Unidirectional pyramidal pass.
    pub fn pyramidal_forward(&self, g: &mut Graph<'_>, frames: &FrameSequence) -> Result<Vec<NodeId>> {
        if self.config.bidirectional {
            return Err(Error::InvalidConfig(
                "pyramidal_forward called on a bidirectional encoder".into(),
            ));
        }
        frames.validate(Some(self.input_dim))?;
        let inputs: Vec<NodeId> = frames
            .frames
            .iter()
            .map(|f| g.constant_vec(f.clone()))
            .collect();
        Ok(self.run_stack(g, &self.forward, inputs, PadSide::Right))
    }

    /// Forward and backward pyramidal passes over the same pairing; each
    /// output state is `[forward; backward]`.
    pub fn bidirectional_forward(
        &self,
        g: &mut Graph<'_>,
        frames: &FrameSequence,
    ) -> Result<Vec<NodeId>> {
        let Some(backward) = &self.backward else {
            return Err(Error::InvalidConfig(
                "bidirectional_forward called on a unidirectional encoder".into(),
            ));
        };
        frames.validate(Some(self.input_dim))?;
        let inputs: Vec<NodeId> = frames
            .frames
            .iter()
            .map(|f| g.constant_vec(f.clone()))
            .collect();
        let fwd = self.run_stack(g, &self.forward, inputs.clone(), PadSide::Right);
        let mut reversed = inputs;
        reversed.reverse();
        let mut bwd = self.run_stack(g, backward, reversed, PadSide::Left);
        bwd.reverse();
        debug_assert_eq!(fwd.len(), bwd.len());
        Ok(fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| g.concat(&[f, b]))
            .collect())
    }

    fn run_stack(
        &self,
        g: &mut Graph<'_>,
        cells: &[GruCell],
        mut seq: Vec<NodeId>,
        pad: PadSide,
    ) -> Vec<NodeId> {
        for (i, cell) in cells.iter().enumerate() {
            if self.config.downsample[i] {
                seq = pair_up(g, &seq, pad);
            }
            let mut h = g.zeros(cell.units);
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                h = cell.step(g, x, h);
                out.push(h);
            }
            seq = out;
        }
        seq
    }

    /// Starts a frame-by-frame pass. Unidirectional encoders only.
    pub fn stream(&self, g: &mut Graph<'_>) -> Result<EncoderStream> {
        if self.config.bidirectional {
            return Err(Error::InvalidConfig(
                "a bidirectional encoder cannot run online".into(),
            ));
        }
        let hidden = self.forward.iter().map(|c| g.zeros(c.units)).collect();
        Ok(EncoderStream {
            hidden,
            pending: vec![None; self.config.layers],
            frames_seen: 0,
            finished: false,
        })
    }
}

fn pair_up(g: &mut Graph<'_>, seq: &[NodeId], pad: PadSide) -> Vec<NodeId> {
    let mut items: Vec<NodeId> = seq.to_vec();
    if items.len() % 2 == 1 {
        let dim = g.dim(items[0]);
        let z = g.zeros(dim);
        match pad {
            PadSide::Right => items.push(z),
            PadSide::Left => items.insert(0, z),
        }
    }
    items.chunks_exact(2).map(|p| g.concat(p)).collect()
}

/// Incremental unidirectional encoder state.
///
/// Produces exactly the states of [`Encoder::pyramidal_forward`], each as soon
/// as the frames it depends on have arrived.
#[derive(Debug, Clone)]
pub struct EncoderStream {
    hidden: Vec<NodeId>,
    pending: Vec<Option<NodeId>>,
    frames_seen: usize,
    finished: bool,
}

impl EncoderStream {
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Feeds one frame; returns any top-layer states it completes (at most one).
    pub fn push(&mut self, g: &mut Graph<'_>, enc: &Encoder, frame: &[f64]) -> Result<Vec<NodeId>> {
        if self.finished {
            return Err(Error::State("encoder stream already finished".into()));
        }
        contract!(
            frame.len() == enc.input_dim,
            "frame has dimension {}, expected {}",
            frame.len(),
            enc.input_dim
        );
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "frame {} is not finite",
                self.frames_seen
            )));
        }
        self.frames_seen += 1;
        let x = g.constant_vec(frame.to_vec());
        Ok(self.feed(g, enc, 0, x).into_iter().collect())
    }

    /// Pads any half-filled pairs with zero states and returns the remaining top-layer states.
    pub fn finish(&mut self, g: &mut Graph<'_>, enc: &Encoder) -> Result<Vec<NodeId>> {
        if self.finished {
            return Err(Error::State("encoder stream already finished".into()));
        }
        self.finished = true;
        let mut out = Vec::new();
        for layer in 1..enc.config.layers {
            if let Some(p) = self.pending[layer].take() {
                let z = g.zeros(g.dim(p));
                let pair = g.concat(&[p, z]);
                out.extend(self.run_from(g, enc, layer, pair));
            }
        }
        Ok(out)
    }

    // Routes `x` into `layer`, pairing it first if the layer downsamples.
    fn feed(&mut self, g: &mut Graph<'_>, enc: &Encoder, layer: usize, x: NodeId) -> Option<NodeId> {
        if enc.config.downsample[layer] {
            match self.pending[layer].take() {
                None => {
                    self.pending[layer] = Some(x);
                    return None;
                }
                Some(first) => {
                    let pair = g.concat(&[first, x]);
                    return self.run_from(g, enc, layer, pair);
                }
            }
        }
        self.run_from(g, enc, layer, x)
    }

    // Steps `layer` on an already-paired input and propagates upward.
    fn run_from(&mut self, g: &mut Graph<'_>, enc: &Encoder, layer: usize, x: NodeId) -> Option<NodeId> {
        let h = enc.forward[layer].step(g, x, self.hidden[layer]);
        self.hidden[layer] = h;
        if layer + 1 == enc.config.layers {
            Some(h)
        } else {
            self.feed(g, enc, layer + 1, h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, GradCheck};
    use crate::numerics::DenseArray;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frames(t: usize, d: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameSequence::new(
            "u",
            (0..t)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn encoder(cfg: EncoderConfig, d: usize, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, cfg, d).unwrap();
        store.init_uniform(-0.5, 0.5, seed).unwrap();
        (store, enc)
    }

    #[test]
    fn gru_zero_params_zero_state_gives_zero() {
        let mut store = ParamStore::new();
        let cell = GruCell::register(&mut store, "c", 3, 4).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant_vec(vec![0.3, -2.0, 5.0]);
        let h = g.zeros(4);
        let out = cell.try_step(&mut g, x, h).unwrap();
        assert_eq!(g.data(out), &[0.0; 4]);
    }

    #[test]
    fn gru_output_bounded() {
        let mut store = ParamStore::new();
        let cell = GruCell::register(&mut store, "c", 5, 6).unwrap();
        store.init_uniform(-3.0, 3.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut g = Graph::new(&store);
            let x = g.constant_vec((0..5).map(|_| rng.random_range(-10.0..10.0)).collect());
            let h = g.constant_vec((0..6).map(|_| rng.random_range(-0.999..0.999)).collect());
            let out = cell.try_step(&mut g, x, h).unwrap();
            assert!(g.data(out).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn gru_dimension_mismatch_is_contract_error() {
        let mut store = ParamStore::new();
        let cell = GruCell::register(&mut store, "c", 3, 4).unwrap();
        let mut g = Graph::new(&store);
        let x = g.zeros(2);
        let h = g.zeros(4);
        assert!(matches!(cell.try_step(&mut g, x, h), Err(Error::Contract(_))));
        let x = g.zeros(3);
        let h = g.zeros(5);
        assert!(matches!(cell.try_step(&mut g, x, h), Err(Error::Contract(_))));
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let cell = GruCell::register(&mut store, "c", 3, 4).unwrap();
        let x = store.insert("x".into(), DenseArray::vector(vec![0.2, -0.7, 0.9])).unwrap();
        let h0 = store
            .insert("h0".into(), DenseArray::vector(vec![0.1, -0.3, 0.5, 0.0]))
            .unwrap();
        store.init_uniform(-0.8, 0.8, 5).unwrap();
        let r = check_gradients(&store, GradCheck::default(), |g| {
            let (xn, hn) = (g.param(x), g.param(h0));
            let h1 = cell.try_step(g, xn, hn)?;
            let h2 = cell.try_step(g, xn, h1)?;
            let sq = g.mul(h2, h2);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn halving_chain_lengths() {
        let cfg = EncoderConfig::online(4);
        assert_eq!(cfg.downsampling_factor(), 4);
        assert_eq!(cfg.output_len(16), 4);
        assert_eq!(cfg.output_len(1), 1);
        // 17 -> 9 pairs (one padded) -> 5
        assert_eq!(cfg.output_len(17), 5);
        let (store, enc) = encoder(cfg, 3, 1);
        for (t, expect) in [(16, 4), (1, 1), (17, 5)] {
            let mut g = Graph::new(&store);
            let out = enc.pyramidal_forward(&mut g, &frames(t, 3, t as u64)).unwrap();
            assert_eq!(out.len(), expect, "T={t}");
            assert!(out.iter().all(|&n| g.dim(n) == 4));
        }
    }

    #[test]
    fn empty_frames_rejected() {
        let (store, enc) = encoder(EncoderConfig::online(4), 3, 1);
        let mut g = Graph::new(&store);
        let empty = FrameSequence {
            id: "e".into(),
            frames: vec![],
        };
        assert!(matches!(
            enc.pyramidal_forward(&mut g, &empty),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = EncoderConfig::online(4);
        cfg.downsample = vec![true, false, false];
        assert!(cfg.validate().is_err());
        cfg.downsample = vec![false, true];
        assert!(cfg.validate().is_err());
        cfg.layers = 0;
        cfg.downsample = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bidirectional_dimension_and_length() {
        let (store, enc) = encoder(EncoderConfig::offline(3), 2, 4);
        let mut g = Graph::new(&store);
        let out = enc.bidirectional_forward(&mut g, &frames(16, 2, 3)).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|&n| g.dim(n) == 6));
        let mut g = Graph::new(&store);
        assert_eq!(enc.forward(&mut g, &frames(17, 2, 3)).unwrap().len(), 5);
    }

    #[test]
    fn bidirectional_reversal_symmetry() {
        // With tied directions, reversing the input reverses the output and
        // swaps the direction halves.
        let (mut store, enc) = encoder(EncoderConfig::offline(3), 2, 4);
        let names: Vec<String> = store
            .iter()
            .filter(|(n, _)| n.starts_with("encoder.fwd"))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let v = store.get(store.id(&n).unwrap()).clone();
            let b = store.id(&n.replace("fwd", "bwd")).unwrap();
            *store.get_mut(b) = v;
        }
        let x = frames(16, 2, 8);
        let mut xr = x.clone();
        xr.frames.reverse();
        let mut g = Graph::new(&store);
        let a = enc.bidirectional_forward(&mut g, &x).unwrap();
        let b = enc.bidirectional_forward(&mut g, &xr).unwrap();
        let n = a.len();
        for j in 0..n {
            let (va, vb) = (g.data(a[j]), g.data(b[n - 1 - j]));
            assert_eq!(&va[..3], &vb[3..]);
            assert_eq!(&va[3..], &vb[..3]);
        }
    }

    #[test]
    fn streaming_matches_batch_exactly() {
        let (store, enc) = encoder(EncoderConfig::online(5), 3, 2);
        for t in [1, 2, 3, 4, 5, 7, 8, 16, 17, 23] {
            let x = frames(t, 3, t as u64 + 100);
            let mut g = Graph::new(&store);
            let batch = enc.pyramidal_forward(&mut g, &x).unwrap();
            let mut s = enc.stream(&mut g).unwrap();
            let mut streamed = Vec::new();
            for f in &x.frames {
                streamed.extend(s.push(&mut g, &enc, f).unwrap());
            }
            streamed.extend(s.finish(&mut g, &enc).unwrap());
            assert_eq!(streamed.len(), batch.len(), "T={t}");
            for (a, b) in batch.iter().zip(&streamed) {
                assert_eq!(g.data(*a), g.data(*b));
            }
            assert!(s.finish(&mut g, &enc).is_err());
        }
    }

    #[test]
    fn prefix_property() {
        let (store, enc) = encoder(EncoderConfig::online(4), 3, 6);
        let x = frames(24, 3, 77);
        let mut g = Graph::new(&store);
        let full = enc.pyramidal_forward(&mut g, &x).unwrap();
        for tp in [4, 8, 12, 20] {
            let prefix = FrameSequence::new("p", x.frames[..tp].to_vec()).unwrap();
            let part = enc.pyramidal_forward(&mut g, &prefix).unwrap();
            assert_eq!(part.len(), tp / 4);
            for (a, b) in part.iter().zip(&full) {
                for (u, v) in g.data(*a).iter().zip(g.data(*b)) {
                    assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn stream_rejects_bidirectional() {
        let (store, enc) = encoder(EncoderConfig::offline(3), 2, 1);
        let mut g = Graph::new(&store);
        assert!(matches!(enc.stream(&mut g), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for cfg in [EncoderConfig::online(3), EncoderConfig::offline(2)] {
            let (store, enc) = encoder(cfg, 2, 12);
            let x = frames(7, 2, 5);
            let r = check_gradients(&store, GradCheck::default(), |g| {
                let states = enc.forward(g, &x)?;
                let all = g.concat(&states);
                let t = g.tanh(all);
                Ok(g.sum(t))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
