//! Teacher-forced training over halting-aligned outputs.
//!
//! A training utterance needs exactly one context per reference label, but the
//! halting layer produces an activation-dependent number of segments. When the
//! unscaled activations do not split into exactly that many segments, they are
//! rescaled so their total equals the label count before segmentation. If that
//! still misses, [`MismatchPolicy`] decides: either segments close at the
//! highest activations, or the scale is searched further (segment count is
//! monotone in the scale) and extra segments are truncated. Utterances that
//! cannot be matched contribute only a penalty pulling the activation total
//! toward the label count.
//!
//! The cross-entropy is invariant to a common factor on all activations, and
//! inference segments the unscaled activations. An auxiliary penalty (see
//! [`count_penalty`]) therefore asks the unscaled activations to close one
//! segment per label on their own.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{PAD, SOS};
use crate::error::{contract, Error, Result};
use crate::halting::{pool_segment, segment, Segment};
use crate::model::AcsModel;
use crate::numerics::{clip_global_norm, AdamConfig, AdamState, Grads, Graph, NodeId, ParamStore};
use crate::search::greedy_decode;
use crate::tasks::{label_error_rate, CorpusRecord};

/// Scaled activations are clamped below `1 - SCALE_DELTA`.
pub const SCALE_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this after every epoch.
    pub lr_decay: f64,
    /// L2 penalty coefficient added to gradients; zero disables it.
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub late_clip_norm: f64,
    /// Last epoch (1-based) that uses `clip_norm`.
    pub clip_switch_epoch: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Context window used while training; defaults to the decoder's slots.
    pub window: Option<usize>,
    pub scale_activations: bool,
    pub mismatch: MismatchPolicy,
    /// Weight of [`count_penalty`] relative to the cross-entropy.
    pub alignment_loss_weight: f64,
    /// Entropy weight inside [`count_penalty`].
    pub binarization_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            lr_decay: 0.95,
            weight_decay: 0.0,
            clip_norm: 2.0,
            late_clip_norm: 1.0,
            clip_switch_epoch: 20,
            batch_size: 1,
            patience: 5,
            window: None,
            scale_activations: true,
            mismatch: MismatchPolicy::Rescale,
            alignment_loss_weight: 10.0,
            binarization_weight: 0.05,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.clip_norm > 0.0 && self.late_clip_norm > 0.0) {
            return bad("clip norms must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning rate must be positive and decay in (0, 1]");
        }
        if !(self.weight_decay >= 0.0) || !(self.alignment_loss_weight >= 0.0)
            || !(self.binarization_weight >= 0.0) {
            return bad("penalty weights must be non-negative");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }

    /// Max gradient norm for a 1-based epoch.
    pub fn clip_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.clip_switch_epoch {
            self.clip_norm
        } else {
            self.late_clip_norm
        }
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32 - 1)
    }
}

/// Fallback when neither the unscaled nor the sum-to-length activations give
/// one segment per label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    /// Search the scale further, then truncate extra segments.
    Rescale,
    /// Close segments at the `L - 1` highest activations.
    Rank,
}

/// Segments closing at the `len - 1` highest activations before the last step
/// (earlier step wins ties), with the final segment ending at the last step.
pub fn ranked_segments(acts: &[f64], len: usize) -> Vec<Segment> {
    let last = acts.len() - 1;
    let mut order: Vec<usize> = (0..last).collect();
    order.sort_by(|&i, &j| acts[j].total_cmp(&acts[i]).then(i.cmp(&j)));
    let mut ends: Vec<usize> = order.into_iter().take(len - 1).collect();
    ends.sort_unstable();
    ends.push(last);
    let mut start = 0;
    ends.into_iter()
        .map(|end| {
            let s = Segment {
                start,
                end,
                remainder: 0.0,
                forced: end == last,
            };
            start = end + 1;
            s
        })
        .collect()
}

/// Multiplies every activation by `len / sum` and clamps into `(0, 1 - SCALE_DELTA)`.
pub fn scale_activations_to_length(activations: &[f64], len: usize) -> Result<Vec<f64>> {
    contract!(len >= 1, "target length must be at least 1");
    let total: f64 = activations.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric(format!("activation total {total} cannot be scaled")));
    }
    let factor = len as f64 / total;
    Ok(activations
        .iter()
        .map(|a| (a * factor).clamp(f64::MIN_POSITIVE, 1.0 - SCALE_DELTA))
        .collect())
}

/// Mean negative log-probability of the targets, skipping `<PAD>` positions.
pub fn sequence_loss(g: &mut Graph<'_>, log_probs: &[NodeId], targets: &[usize]) -> Result<NodeId> {
    contract!(
        log_probs.len() == targets.len(),
        "{} output steps for {} targets",
        log_probs.len(),
        targets.len()
    );
    let picked: Vec<NodeId> = log_probs
        .iter()
        .zip(targets)
        .filter(|(_, &t)| t != PAD)
        .map(|(&lp, &t)| g.pick(lp, t))
        .collect();
    contract!(!picked.is_empty(), "no non-padding targets");
    let v = g.concat(&picked);
    let total = g.sum(v);
    Ok(g.affine(total, -1.0 / picked.len() as f64, 0.0))
}

/// How the segment count was reconciled with the label count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthMatch {
    /// The unscaled activations already give one segment per label.
    Unscaled,
    /// Sum-to-length scaling gave one segment per label.
    Scaled,
    /// The scale had to be adjusted beyond sum-to-length.
    Rescaled,
    /// Segments past the label count were dropped.
    Truncated,
    /// Segments closed at the highest-ranked activations.
    Ranked,
    /// Too few segments; only the length penalty applies.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct UtteranceLoss {
    pub loss: NodeId,
    /// Cross-entropy term, absent when the utterance was skipped.
    pub cross_entropy: Option<NodeId>,
    pub length_match: LengthMatch,
    /// Segments produced by the unscaled activations.
    pub raw_segments: usize,
}

fn count_segments(values: &[f64], epsilon: f64) -> Result<usize> {
    let t = segment(values, epsilon)?;
    Ok(t.segments.len() + usize::from(t.tail.is_some()))
}

fn scaled_count(acts: &[f64], m: f64, epsilon: f64) -> Result<usize> {
    let v: Vec<f64> = acts
        .iter()
        .map(|a| (a * m).clamp(f64::MIN_POSITIVE, 1.0 - SCALE_DELTA))
        .collect();
    count_segments(&v, epsilon)
}

/// Multiplier for `acts` that yields `len` segments, starting from sum-to-length.
/// Returns the closest multiplier from above when no value hits `len` exactly.
fn fit_scale(acts: &[f64], len: usize, epsilon: f64) -> Result<f64> {
    let total: f64 = acts.iter().sum();
    let m0 = len as f64 / total;
    let c0 = scaled_count(acts, m0, epsilon)?;
    if c0 == len {
        return Ok(m0);
    }
    let (mut lo, mut hi) = (m0, m0);
    if c0 < len {
        for _ in 0..64 {
            hi *= 2.0;
            if scaled_count(acts, hi, epsilon)? >= len {
                break;
            }
        }
    } else {
        for _ in 0..64 {
            lo /= 2.0;
            if scaled_count(acts, lo, epsilon)? <= len {
                break;
            }
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match scaled_count(acts, mid, epsilon)?.cmp(&len) {
            std::cmp::Ordering::Less => lo = mid,
            std::cmp::Ordering::Greater => hi = mid,
            std::cmp::Ordering::Equal => return Ok(mid),
        }
    }
    Ok(hi)
}

/// Records the full training loss of one utterance on `g`.
pub fn utterance_loss(
    model: &AcsModel,
    g: &mut Graph<'_>,
    record: &CorpusRecord,
    cfg: &TrainConfig,
) -> Result<UtteranceLoss> {
    let labels = &record.labels;
    contract!(!labels.is_empty(), "record {} has no labels", record.id);
    let window = cfg.window.unwrap_or(model.config.decoder.window);
    let len = labels.len();
    let eps = model.config.halting.epsilon;

    let states = model.encode(g, &record.sequence())?;
    let acts = model.halting.activations(g, &states)?;
    let raw: Vec<f64> = acts.iter().map(|&a| g.scalar(a)).collect();
    let raw_segments = count_segments(&raw, eps)?;

    let mass = g.concat(&acts);
    let mass = g.sum(mass);
    let weight = cfg.alignment_loss_weight;
    // Fallback when no matching segmentation exists: pull the total mass toward L.
    let skipped = |g: &mut Graph<'_>| {
        let loss = if weight > 0.0 {
            let diff = g.affine(mass, 1.0, -(len as f64));
            let sq = g.mul(diff, diff);
            g.affine(sq, weight / len as f64, 0.0)
        } else {
            g.constant_scalar(0.0)
        };
        UtteranceLoss {
            loss,
            cross_entropy: None,
            length_match: LengthMatch::Skipped,
            raw_segments,
        }
    };
    if states.len() < len {
        return Ok(skipped(g));
    }

    let scaled = |g: &mut Graph<'_>, m: f64| -> Vec<NodeId> {
        let total: f64 = raw.iter().sum();
        let inv = g.recip(mass);
        let factor = g.affine(inv, m * total, 0.0);
        acts.iter()
            .map(|&a| {
                let s = g.scale_by(a, factor);
                g.clamp(s, f64::MIN_POSITIVE, 1.0 - SCALE_DELTA)
            })
            .collect()
    };
    let (weights, segments, length_match) = if !cfg.scale_activations || raw_segments == len {
        let t = segment(&raw, eps)?.flushed();
        (acts.clone(), t.segments, LengthMatch::Unscaled)
    } else {
        let plain = len as f64 / raw.iter().sum::<f64>();
        let m = match cfg.mismatch {
            MismatchPolicy::Rescale => fit_scale(&raw, len, eps)?,
            MismatchPolicy::Rank => plain,
        };
        let w = scaled(g, m);
        let values: Vec<f64> = w.iter().map(|&x| g.scalar(x)).collect();
        let t = segment(&values, eps)?.flushed();
        if t.segments.len() == len {
            let kind = if m == plain { LengthMatch::Scaled } else { LengthMatch::Rescaled };
            (w, t.segments, kind)
        } else {
            match cfg.mismatch {
                MismatchPolicy::Rescale if t.segments.len() > len => {
                    let mut segs = t.segments;
                    segs.truncate(len);
                    (w, segs, LengthMatch::Truncated)
                }
                MismatchPolicy::Rescale => return Ok(skipped(g)),
                MismatchPolicy::Rank => (w, ranked_segments(&raw, len), LengthMatch::Ranked),
            }
        }
    };

    let mut contexts = Vec::with_capacity(len);
    for s in &segments {
        let mut p: Vec<NodeId> = weights[s.start..s.end].to_vec();
        let prior = if p.is_empty() {
            g.constant_scalar(0.0)
        } else {
            let mut acc = p[0];
            for &w in &p[1..] {
                acc = g.add(acc, w);
            }
            acc
        };
        let rest = g.one_minus(prior);
        p.push(g.relu(rest));
        contexts.push(pool_segment(g, &states[s.start..=s.end], &p));
    }

    let mut state = model.decoder.initial_state(g);
    let mut log_probs = Vec::with_capacity(len);
    let mut prev = SOS;
    for (i, &y) in labels.iter().enumerate() {
        let w = model.decoder.window(g, &contexts, i, window)?;
        let (next, logp) = model.decoder.step(g, state, prev, w)?;
        log_probs.push(logp);
        state = next;
        prev = y;
    }
    let ce = sequence_loss(g, &log_probs, labels)?;
    let loss = if weight > 0.0 {
        let p = count_penalty(g, &acts, len, cfg.binarization_weight);
        let p = g.affine(p, weight / len as f64, 0.0);
        g.add(ce, p)
    } else {
        ce
    };
    Ok(UtteranceLoss {
        loss,
        cross_entropy: Some(ce),
        length_match,
        raw_segments,
    })
}

/// Penalty on the unscaled activations of one utterance with `len` labels.
///
/// Inference closes one segment per activation near one, so the activations
/// before the final step should sum to `len - 1`. The squared gap to that count
/// is added to `binarization` times the binary entropy of each of those
/// activations, which pushes them toward zero or one.
pub fn count_penalty(g: &mut Graph<'_>, acts: &[NodeId], len: usize, binarization: f64) -> NodeId {
    let Some(last) = acts.len().checked_sub(1).filter(|&l| l > 0) else {
        return g.constant_scalar(0.0);
    };
    let head = &acts[..last];
    let v = g.concat(head);
    let total = g.sum(v);
    let gap = g.affine(total, 1.0, -((len - 1) as f64));
    let mut loss = g.mul(gap, gap);
    if binarization > 0.0 {
        let mut terms = Vec::with_capacity(last);
        for &a in head {
            let la = g.ln(a);
            let pos = g.mul(a, la);
            let b = g.one_minus(a);
            let lb = g.ln(b);
            let neg = g.mul(b, lb);
            terms.push(g.add(pos, neg));
        }
        let v = g.concat(&terms);
        let h = g.sum(v);
        let h = g.affine(h, -binarization, 0.0);
        loss = g.add(loss, h);
    }
    loss
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub unscaled: usize,
    pub scaled: usize,
    pub rescaled: usize,
    pub truncated: usize,
    pub ranked: usize,
    pub skipped: usize,
    /// Utterances whose unscaled activations give exactly one segment per label.
    pub raw_exact: usize,
}

impl LengthStats {
    fn record(&mut self, u: &UtteranceLoss, len: usize) {
        match u.length_match {
            LengthMatch::Unscaled => self.unscaled += 1,
            LengthMatch::Scaled => self.scaled += 1,
            LengthMatch::Rescaled => self.rescaled += 1,
            LengthMatch::Truncated => self.truncated += 1,
            LengthMatch::Ranked => self.ranked += 1,
            LengthMatch::Skipped => self.skipped += 1,
        }
        if u.raw_segments == len {
            self.raw_exact += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub train_loss: f64,
    pub train_cross_entropy: f64,
    pub dev_loss: f64,
    pub dev_ler: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    /// Fraction of updates whose gradient was rescaled by clipping.
    pub clipped_fraction: f64,
    pub train_lengths: LengthStats,
    pub dev_lengths: LengthStats,
    /// Dev utterances whose decoded length equals the reference length.
    pub dev_length_accuracy: f64,
    /// This epoch's parameters became the best checkpoint, ranked by dev LER
    /// then dev loss. Patience also resets when dev loss alone improves.
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochReport>,
    /// Parameters of the best epoch by (dev LER, dev loss).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevEvaluation {
    pub loss: f64,
    pub ler: f64,
    pub lengths: LengthStats,
    pub length_accuracy: f64,
}

/// Mean loss with training-time alignment, and greedy-decode LER without it.
pub fn evaluate(model: &AcsModel, records: &[CorpusRecord], cfg: &TrainConfig) -> Result<DevEvaluation> {
    contract!(!records.is_empty(), "evaluation set is empty");
    let window = cfg.window.unwrap_or(model.config.decoder.window);
    let mut lengths = LengthStats::default();
    let mut total = 0.0;
    let mut refs = Vec::with_capacity(records.len());
    let mut hyps = Vec::with_capacity(records.len());
    let mut same_len = 0usize;
    for r in records {
        let mut g = Graph::new(&model.params);
        let u = utterance_loss(model, &mut g, r, cfg)?;
        total += g.scalar(u.loss);
        lengths.record(&u, r.labels.len());
        let out = greedy_decode(model, None, &r.sequence(), 0.0, window)?;
        let hyp = out.nbest[0].symbols.clone();
        same_len += usize::from(hyp.len() == r.labels.len());
        refs.push(r.labels.clone());
        hyps.push(hyp);
    }
    Ok(DevEvaluation {
        loss: total / records.len() as f64,
        ler: label_error_rate(&refs, &hyps)?,
        lengths,
        length_accuracy: same_len as f64 / records.len() as f64,
    })
}

fn add_weight_decay(grads: &mut Grads, params: &ParamStore, coeff: f64) {
    for id in params.ids() {
        let p = params.get(id).data();
        for (g, w) in grads.get_mut(id).data_mut().iter_mut().zip(p) {
            *g += coeff * w;
        }
    }
}

/// Trains `model` in place and returns per-epoch reports plus the best parameters.
/// `on_epoch` sees each report and the parameters at the end of that epoch.
pub fn train(
    model: &mut AcsModel,
    train_set: &[CorpusRecord],
    dev_set: &[CorpusRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    contract!(!train_set.is_empty(), "training set is empty");
    contract!(!dev_set.is_empty(), "development set is empty");
    let window = cfg.window.unwrap_or(model.config.decoder.window);
    if window > model.config.decoder.window {
        return Err(Error::InvalidConfig(format!(
            "training window {window} exceeds the decoder's {} slots",
            model.config.decoder.window
        )));
    }
    for r in train_set.iter().chain(dev_set) {
        r.sequence().validate(Some(model.config.input_dim))?;
        for &l in &r.labels {
            contract!(
                l > SOS && l < model.config.vocab_size,
                "record {} has label id {l} outside the model's labels",
                r.id
            );
        }
    }

    let mut adam = AdamState::new(&model.params, AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), ParamStore, usize)> = None;
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        adam.config.learning_rate = cfg.lr_for_epoch(epoch);
        let clip = cfg.clip_for_epoch(epoch);
        order.shuffle(&mut rng);

        let mut lengths = LengthStats::default();
        let (mut loss_sum, mut ce_sum, mut ce_count) = (0.0, 0.0, 0usize);
        let (mut norm_sum, mut norm_max, mut clipped, mut updates) = (0.0, 0.0f64, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Grads::zeros_like(&model.params);
            for &i in batch {
                let r = &train_set[i];
                let mut g = Graph::new(&model.params);
                let u = utterance_loss(model, &mut g, r, cfg)?;
                let loss = g.scalar(u.loss);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss on {} in epoch {epoch}",
                        r.id
                    )));
                }
                loss_sum += loss;
                if let Some(ce) = u.cross_entropy {
                    ce_sum += g.scalar(ce);
                    ce_count += 1;
                }
                lengths.record(&u, r.labels.len());
                let grads = g.backward(u.loss)?;
                acc.accumulate(&grads)?;
            }
            if batch.len() > 1 {
                acc.scale(1.0 / batch.len() as f64);
            }
            if cfg.weight_decay > 0.0 {
                add_weight_decay(&mut acc, &model.params, cfg.weight_decay);
            }
            let norm = acc.global_norm();
            let scale = clip_global_norm(&mut acc, clip)?;
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            clipped += usize::from(scale < 1.0);
            updates += 1;
            adam.step(&mut model.params, &acc)?;
        }

        let dev = evaluate(model, dev_set, cfg)?;
        if !dev.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite dev loss in epoch {epoch}")));
        }
        let key = (dev.ler, dev.loss);
        let improved = best.as_ref().is_none_or(|(k, _, _)| key < *k);
        if improved {
            best = Some((key, model.params.clone(), epoch));
        }
        if improved || dev.loss < best_loss {
            best_loss = best_loss.min(dev.loss);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let report = EpochReport {
            epoch,
            learning_rate: adam.config.learning_rate,
            clip_norm: clip,
            train_loss: loss_sum / train_set.len() as f64,
            train_cross_entropy: ce_sum / ce_count.max(1) as f64,
            dev_loss: dev.loss,
            dev_ler: dev.ler,
            grad_norm_mean: norm_sum / updates.max(1) as f64,
            grad_norm_max: norm_max,
            clipped_fraction: clipped as f64 / updates.max(1) as f64,
            train_lengths: lengths,
            dev_lengths: dev.lengths,
            dev_length_accuracy: dev.length_accuracy,
            improved,
        };
        on_epoch(&report, &model.params)?;
        epochs.push(report);
        if since_best >= cfg.patience && epoch < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    let (_, best, best_epoch) = best.ok_or_else(|| Error::State("no epoch completed".into()))?;
    Ok(TrainOutcome {
        epochs,
        best,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halting::segment;
    use crate::numerics::DenseArray;

    #[test]
    fn scaling_examples() {
        let s = scale_activations_to_length(&[0.5; 4], 1).unwrap();
        assert_eq!(s, vec![0.25; 4]);
        let t = segment(&s, 0.01).unwrap();
        assert_eq!(t.segments.len(), 1);
        assert_eq!((t.segments[0].start, t.segments[0].end), (0, 3));

        let a = [0.2, 0.3, 0.5];
        assert_eq!(scale_activations_to_length(&a, 1).unwrap(), a.to_vec());

        let s = scale_activations_to_length(&[0.9, 0.9], 2).unwrap();
        assert_eq!(s, vec![1.0 - SCALE_DELTA; 2]);
        let t = segment(&s, 0.01).unwrap();
        assert_eq!(t.segments.len(), 2);
        assert!(t.segments.iter().all(|s| s.len() == 1));

        assert!(matches!(
            scale_activations_to_length(&[0.0, 0.0], 1),
            Err(Error::Numeric(_))
        ));
        assert!(scale_activations_to_length(&[0.5], 0).is_err());
    }

    #[test]
    fn fit_scale_hits_length() {
        // uniform activations jump from pairs straight to singletons
        let flat = vec![0.3; 8];
        assert_eq!(scaled_count(&flat, 5.0 / 2.4, 0.01).unwrap(), 4);
        let m = fit_scale(&flat, 5, 0.01).unwrap();
        assert_eq!(scaled_count(&flat, m, 0.01).unwrap(), 8);

        let acts = [0.1, 0.5, 0.2, 0.6, 0.3, 0.4, 0.2, 0.5, 0.05, 0.7];
        for len in 1..=acts.len() {
            // oracle: scan a fine grid of multipliers for an exact hit
            let reachable = (1..20_000)
                .map(|k| k as f64 * 1e-3)
                .any(|m| scaled_count(&acts, m, 0.01).unwrap() == len);
            let got = scaled_count(&acts, fit_scale(&acts, len, 0.01).unwrap(), 0.01).unwrap();
            if reachable {
                assert_eq!(got, len);
            } else {
                assert!(got > len);
            }
        }
    }

    #[test]
    fn sequence_loss_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let k = 5.0f64;
        let uniform = g.constant_vec(vec![-(k.ln()); 5]);
        let l = sequence_loss(&mut g, &[uniform, uniform], &[4, 2]).unwrap();
        assert!((g.scalar(l) - k.ln()).abs() < 1e-12);
        let certain = g.constant_vec(vec![-50.0, -50.0, -50.0, -50.0, 0.0]);
        let l = sequence_loss(&mut g, &[certain], &[4]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(sequence_loss(&mut g, &[certain], &[4, 4]).is_err());
    }

    #[test]
    fn padding_positions_are_excluded() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant_vec(vec![-1.0, -2.0, -3.0, -4.0, -5.0]);
        let l = sequence_loss(&mut g, &[a, a, a], &[4, PAD, 2]).unwrap();
        assert_eq!(g.scalar(l), 4.0);
        assert!(sequence_loss(&mut g, &[a], &[PAD]).is_err());
    }

    #[test]
    fn sequence_loss_gradient_matches_finite_differences() {
        use crate::numerics::gradcheck::{check_gradients, GradCheck};
        let mut store = ParamStore::new();
        store
            .insert("logits".into(), DenseArray::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.1, 0.0, -0.7]).unwrap())
            .unwrap();
        let report = check_gradients(&store, GradCheck::default(), |g| {
            let m = g.param(store.id("logits").unwrap());
            let rows: Vec<NodeId> = (0..2)
                .map(|i| {
                    let r = g.row(m, i);
                    g.log_softmax(r)
                })
                .collect();
            sequence_loss(g, &rows, &[2, 1])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.clip_for_epoch(1), 2.0);
        assert_eq!(cfg.clip_for_epoch(20), 2.0);
        assert_eq!(cfg.clip_for_epoch(21), 1.0);
        assert_eq!(cfg.lr_for_epoch(1), 3e-3);
        assert!((cfg.lr_for_epoch(3) - 3e-3 * 0.95 * 0.95).abs() < 1e-15);
        assert!(TrainConfig {
            epochs: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            late_clip_norm: 0.0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn count_penalty_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let acts: Vec<NodeId> = [0.2, 0.7, 0.4, 0.9].iter().map(|&a| g.constant_scalar(a)).collect();
        let p = count_penalty(&mut g, &acts, 3, 0.0);
        // head sum 1.3 against a target of 2
        assert!((g.scalar(p) - 0.49).abs() < 1e-12);
        let p = count_penalty(&mut g, &acts, 3, 0.5);
        let entropy: f64 = [0.2f64, 0.7, 0.4]
            .iter()
            .map(|a| -(a * a.ln() + (1.0 - a) * (1.0 - a).ln()))
            .sum();
        assert!((g.scalar(p) - (0.49 + 0.5 * entropy)).abs() < 1e-12);
        let single = [acts[0]];
        let p = count_penalty(&mut g, &single, 1, 0.5);
        assert_eq!(g.scalar(p), 0.0);
    }

    #[test]
    fn count_penalty_gradient_matches_finite_differences() {
        use crate::numerics::gradcheck::{check_gradients, GradCheck};
        let mut store = ParamStore::new();
        store
            .insert("scores".into(), DenseArray::new(vec![5], vec![-1.2, 0.4, 2.0, -0.3, 0.8]).unwrap())
            .unwrap();
        let report = check_gradients(&store, GradCheck::default(), |g| {
            let v = g.param(store.id("scores").unwrap());
            let acts: Vec<NodeId> = (0..5)
                .map(|i| {
                    let s = g.pick(v, i);
                    g.sigmoid(s)
                })
                .collect();
            Ok(count_penalty(g, &acts, 3, 0.05))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn utterance_loss_gradient_matches_finite_differences() {
        use crate::model::ModelConfig;
        use crate::numerics::gradcheck::{check_gradients, GradCheck};
        use crate::tasks::{generate_corpus, TaskConfig};
        let corpus = generate_corpus(&TaskConfig {
            num_labels: 3,
            input_dim: 3,
            min_labels: 2,
            max_labels: 3,
            train_size: 2,
            dev_size: 1,
            test_size: 1,
            ..TaskConfig::easy()
        })
        .unwrap();
        let mut cfg = ModelConfig::online(3, corpus.vocab.len());
        cfg.encoder.units = 3;
        cfg.decoder.embed_dim = 3;
        cfg.decoder.units = 3;
        let model = AcsModel::initialized(cfg, 5).unwrap();
        let train = TrainConfig::default();
        let record = &corpus.train[0];
        let report = check_gradients(
            &model.params,
            GradCheck {
                max_entries_per_param: Some(6),
                ..GradCheck::default()
            },
            |g| Ok(utterance_loss(&model, g, record, &train)?.loss),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
