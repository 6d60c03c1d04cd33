//! Synthetic corpora shaped like speech recognition data, and the label error rate.
//!
//! Every label owns a random prototype frame. An utterance is a label
//! sequence rendered as runs of noisy copies of the prototypes, one run per
//! label with a random run length. Adjacent labels always differ.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::{Vocab, FIRST_LABEL};
use crate::encoder::FrameSequence;
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Number of ordinary labels, excluding special symbols.
    pub num_labels: usize,
    pub input_dim: usize,
    pub min_frames_per_label: usize,
    pub max_frames_per_label: usize,
    pub noise_std: f64,
    pub min_labels: usize,
    pub max_labels: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Label sequences follow a fixed successor chain.
    pub bigram: bool,
    /// Utterances longer than this are discarded and drawn again.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_labels: 8,
            input_dim: 12,
            min_frames_per_label: 4,
            max_frames_per_label: 8,
            noise_std: 0.1,
            min_labels: 3,
            max_labels: 8,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            bigram: false,
            max_frames: 1000,
            seed: 1,
        }
    }
}

impl TaskConfig {
    pub fn easy() -> Self {
        Self::default()
    }

    pub fn hard() -> Self {
        Self {
            noise_std: 0.5,
            bigram: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_labels < 2 {
            return bad(format!("need at least 2 labels, got {}", self.num_labels));
        }
        if self.input_dim == 0 {
            return bad("frame dimension must be positive".into());
        }
        if self.min_frames_per_label < 1 || self.min_frames_per_label > self.max_frames_per_label {
            return bad(format!(
                "frames per label range [{}, {}] is invalid",
                self.min_frames_per_label, self.max_frames_per_label
            ));
        }
        if self.min_labels < 1 || self.min_labels > self.max_labels {
            return bad(format!(
                "labels per utterance range [{}, {}] is invalid",
                self.min_labels, self.max_labels
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.min_labels * self.min_frames_per_label > self.max_frames {
            return bad(format!(
                "max frames {} admits no utterance of {} labels",
                self.max_frames, self.min_labels
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub frames: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Exclusive end frame of each label's run. Diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<usize>>,
}

impl CorpusRecord {
    pub fn sequence(&self) -> FrameSequence {
        FrameSequence {
            id: self.id.clone(),
            frames: self.frames.clone(),
        }
    }

    pub fn validate(&self, vocab: &Vocab, input_dim: usize) -> Result<()> {
        self.sequence().validate(Some(input_dim))?;
        contract!(!self.labels.is_empty(), "record {} has no labels", self.id);
        for &l in &self.labels {
            contract!(
                (FIRST_LABEL..vocab.len()).contains(&l),
                "record {} has label id {l} outside the vocabulary's ordinary labels",
                self.id
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    /// Label prototypes, indexed by label id minus the first label id.
    pub prototypes: Vec<Vec<f64>>,
    /// Successor of each label under the bigram chain, same indexing.
    pub successors: Option<Vec<usize>>,
    /// Utterances discarded for exceeding the frame limit.
    pub regenerated: usize,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[CorpusRecord] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

// Stream ids for per-record generators; split tags occupy the high bits.
const PROTOTYPE_STREAM: u64 = 0;

fn record_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.tag() << 48) | index as u64);
    rng
}

/// Draws the label prototypes and, when requested, a successor chain that
/// visits every label once per cycle.
fn task_structure(cfg: &TaskConfig) -> (Vec<Vec<f64>>, Option<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PROTOTYPE_STREAM);
    let prototypes = (0..cfg.num_labels)
        .map(|_| (0..cfg.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let successors = cfg.bigram.then(|| {
        let mut order: Vec<usize> = (0..cfg.num_labels).collect();
        order.shuffle(&mut rng);
        let mut succ = vec![0; cfg.num_labels];
        for (i, &v) in order.iter().enumerate() {
            succ[v] = order[(i + 1) % order.len()];
        }
        succ
    });
    (prototypes, successors)
}

fn draw_record(
    cfg: &TaskConfig,
    prototypes: &[Vec<f64>],
    successors: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<(CorpusRecord, usize)> {
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::InvalidConfig(format!("noise distribution: {e}")))?;
    let mut discarded = 0;
    loop {
        let n = rng.random_range(cfg.min_labels..=cfg.max_labels);
        let mut labels = Vec::with_capacity(n);
        let mut k = rng.random_range(0..cfg.num_labels);
        for _ in 0..n {
            labels.push(k);
            k = match successors {
                Some(s) => s[k],
                // never repeats the previous label
                None => (k + rng.random_range(1..cfg.num_labels)) % cfg.num_labels,
            };
        }
        let mut frames = Vec::new();
        let mut bounds = Vec::with_capacity(n);
        for &l in &labels {
            let run = rng.random_range(cfg.min_frames_per_label..=cfg.max_frames_per_label);
            for _ in 0..run {
                frames.push(prototypes[l].iter().map(|m| m + noise.sample(rng)).collect());
            }
            bounds.push(frames.len());
        }
        if frames.len() > cfg.max_frames {
            discarded += 1;
            continue;
        }
        let record = CorpusRecord {
            id,
            frames,
            labels: labels.into_iter().map(|l| l + FIRST_LABEL).collect(),
            bounds: Some(bounds),
        };
        return Ok((record, discarded));
    }
}

/// Generates train, dev, and test splits. Each record depends only on the
/// master seed, its split, and its index.
pub fn generate_corpus(cfg: &TaskConfig) -> Result<Corpus> {
    cfg.validate()?;
    let (prototypes, successors) = task_structure(cfg);
    let mut splits: Vec<Vec<CorpusRecord>> = Vec::with_capacity(3);
    let mut regenerated = 0;
    for split in Split::ALL {
        let size = match split {
            Split::Train => cfg.train_size,
            Split::Dev => cfg.dev_size,
            Split::Test => cfg.test_size,
        };
        let mut records = Vec::with_capacity(size);
        for i in 0..size {
            let mut rng = record_rng(cfg.seed, split, i);
            let id = format!("{}-{:05}", split.name(), i);
            let (r, d) = draw_record(cfg, &prototypes, successors.as_deref(), &mut rng, id)?;
            regenerated += d;
            records.push(r);
        }
        splits.push(records);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Corpus {
        vocab: Vocab::with_labels(cfg.num_labels),
        train,
        dev,
        test,
        prototypes,
        successors,
        regenerated,
    })
}

/// Writes one JSON object per line.
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Minimum number of substitutions, insertions, and deletions turning `a` into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total edit distance over total reference length.
pub fn label_error_rate(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64> {
    contract!(!refs.is_empty(), "no reference utterances");
    contract!(
        refs.len() == hyps.len(),
        "{} references but {} hypotheses",
        refs.len(),
        hyps.len()
    );
    let total: usize = refs.iter().map(Vec::len).sum();
    contract!(total > 0, "references contain no labels");
    let errors: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(errors as f64 / total as f64)
}
