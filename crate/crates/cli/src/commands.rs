//! Implementations of the `acs` subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use acs_core::decoder::Vocab;
use acs_core::lm::{train_lm, LanguageModel, LmConfig};
use acs_core::model::{AcsModel, ModelConfig};
use acs_core::numerics::{checkpoint, Graph};
use acs_core::search::{beam_decode, streaming_decode, BeamConfig, DecodeOutput};
use acs_core::tasks::{edit_distance, generate_corpus, read_corpus, write_corpus, CorpusRecord};
use acs_core::training::train;
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LM_TEXT_FILE: &str = "lm.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LM_FILE: &str = "lm.ckpt";
pub const REPORT_FILE: &str = "report.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_records(path: &Path) -> Result<Vec<CorpusRecord>> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("reading vocab {}", path.display()))
}

/// Architecture stored beside a checkpoint: `model.ckpt` pairs with `model.json`.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_file(path, text + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<AcsModel> {
    let cfg: ModelConfig = read_json(&sidecar(path))?;
    let mut model = AcsModel::new(cfg)?;
    let params = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    model.load_params(&params)?;
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmSidecar {
    config: LmConfig,
    vocab_size: usize,
}

pub fn load_lm(path: &Path) -> Result<LanguageModel> {
    let side: LmSidecar = read_json(&sidecar(path))?;
    let mut lm = LanguageModel::new(side.config, side.vocab_size)?;
    let params = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    lm.params.load_from(&params)?;
    Ok(lm)
}

fn label_line(vocab: &Vocab, labels: &[usize]) -> String {
    vocab.render(labels)
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let corpus = generate_corpus(&cfg.task)?;
    for (name, records) in [(TRAIN_FILE, &corpus.train), (DEV_FILE, &corpus.dev), (TEST_FILE, &corpus.test)] {
        let path = dir.join(name);
        write_corpus(&path, records).with_context(|| format!("writing corpus {}", path.display()))?;
    }
    let vocab_path = dir.join(VOCAB_FILE);
    corpus
        .vocab
        .save(&vocab_path)
        .with_context(|| format!("writing vocab {}", vocab_path.display()))?;
    let text: String = corpus
        .train
        .iter()
        .map(|r| label_line(&corpus.vocab, &r.labels) + "\n")
        .collect();
    write_file(&dir.join(LM_TEXT_FILE), text)?;
    cfg.echo_into(dir)?;

    let all = corpus.train.iter().chain(&corpus.dev).chain(&corpus.test);
    let (mut frames, mut labels, mut count) = (0usize, 0usize, 0usize);
    for r in all {
        frames += r.frames.len();
        labels += r.labels.len();
        count += 1;
    }
    println!(
        "wrote {} train / {} dev / {} test utterances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        dir.display()
    );
    println!(
        "mean frames {:.1}, mean labels {:.2}, regenerated {} over-long utterances",
        frames as f64 / count as f64,
        labels as f64 / count as f64,
        corpus.regenerated
    );
    Ok(())
}

fn check_records(records: &[CorpusRecord], vocab: &Vocab, input_dim: usize, path: &Path) -> Result<()> {
    for r in records {
        r.validate(vocab, input_dim)
            .with_context(|| format!("{} does not match the configured vocab and input size", path.display()))?;
    }
    Ok(())
}

pub fn train_model(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    let data = &cfg.paths.data_dir;
    let vocab = load_vocab(&data.join(VOCAB_FILE))?;
    let model_cfg = cfg.model_config();
    if vocab.len() != model_cfg.vocab_size {
        bail!(
            "vocab {} has {} symbols but the config implies {}",
            data.join(VOCAB_FILE).display(),
            vocab.len(),
            model_cfg.vocab_size
        );
    }
    let (train_path, dev_path) = (data.join(TRAIN_FILE), data.join(DEV_FILE));
    let train_set = read_records(&train_path)?;
    let dev_set = read_records(&dev_path)?;
    check_records(&train_set, &vocab, model_cfg.input_dim, &train_path)?;
    check_records(&dev_set, &vocab, model_cfg.input_dim, &dev_path)?;

    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let ckpt = out.join(MODEL_FILE);
    let mut model = if resume {
        let m = load_model(&ckpt).context("--resume needs an existing checkpoint")?;
        if m.config != model_cfg {
            bail!("checkpoint {} was trained with a different model config", ckpt.display());
        }
        println!("resuming from {}", ckpt.display());
        m
    } else {
        AcsModel::initialized(model_cfg, cfg.model.init_seed)?
    };
    cfg.echo_into(out)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_json(&sidecar(&ckpt), &model.config)?;

    let report_path = out.join(REPORT_FILE);
    let mut report = fs::File::create(&report_path).with_context(|| format!("creating {}", report_path.display()))?;
    let outcome = train(&mut model, &train_set, &dev_set, &cfg.train, |r, params| {
        let line = serde_json::to_string(r).map_err(|e| acs_core::Error::Parse(e.to_string()))?;
        writeln!(report, "{line}").map_err(|e| acs_core::Error::io(&report_path, e))?;
        if r.improved {
            checkpoint::save(params, &ckpt)?;
        }
        println!(
            "epoch {:>3}  train {:.4}  dev loss {:.4}  dev LER {:.4}{}",
            r.epoch,
            r.train_loss,
            r.dev_loss,
            r.dev_ler,
            if r.improved { "  *" } else { "" }
        );
        Ok(())
    })?;
    checkpoint::save(&outcome.best, &ckpt)?;
    println!(
        "best epoch {} of {}{}; checkpoint {}",
        outcome.best_epoch,
        outcome.epochs.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        ckpt.display()
    );
    Ok(())
}

pub fn train_language_model(cfg: &ExperimentConfig) -> Result<()> {
    let data = &cfg.paths.data_dir;
    let vocab = load_vocab(&data.join(VOCAB_FILE))?;
    let text_path = data.join(LM_TEXT_FILE);
    let text = fs::read_to_string(&text_path).with_context(|| format!("reading {}", text_path.display()))?;
    let mut corpus = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let ids = line
            .split_whitespace()
            .map(|s| {
                vocab
                    .id(s)
                    .ok_or_else(|| anyhow!("{} line {}: unknown symbol {s:?}", text_path.display(), n + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        if !ids.is_empty() {
            corpus.push(ids);
        }
    }
    let dir = &cfg.paths.lm_dir;
    create_dir(dir)?;
    cfg.echo_into(dir)?;
    let mut lm = LanguageModel::initialized(cfg.lm.clone(), vocab.len(), cfg.lm_train.seed)?;
    let losses = train_lm(&mut lm, &corpus, &cfg.lm_train)?;
    for (i, l) in losses.iter().enumerate() {
        println!("lm epoch {:>3}  loss {l:.4}", i + 1);
    }
    let path = dir.join(LM_FILE);
    checkpoint::save(&lm.params, &path)?;
    write_json(
        &sidecar(&path),
        &LmSidecar {
            config: cfg.lm.clone(),
            vocab_size: vocab.len(),
        },
    )?;
    println!("language model written to {}", path.display());
    Ok(())
}

pub struct DecodeOptions {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub output: PathBuf,
    pub vocab: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub beam: BeamConfig,
    pub online: bool,
}

pub fn decode(opts: &DecodeOptions) -> Result<()> {
    let model = load_model(&opts.checkpoint)?;
    if opts.online && model.is_bidirectional() {
        bail!("--online needs a unidirectional encoder, but {} is bidirectional", opts.checkpoint.display());
    }
    let vocab_path = opts
        .vocab
        .clone()
        .unwrap_or_else(|| opts.checkpoint.with_file_name(VOCAB_FILE));
    let vocab = load_vocab(&vocab_path)?;
    if vocab.len() != model.config.vocab_size {
        bail!("vocab {} does not match the checkpoint", vocab_path.display());
    }
    let lm = opts.lm.as_deref().map(load_lm).transpose()?;
    let records = read_records(&opts.corpus)?;
    check_records(&records, &vocab, model.config.input_dim, &opts.corpus)?;
    opts.beam.validate()?;

    let mut out = String::new();
    for r in &records {
        let x = r.sequence();
        let result: DecodeOutput = if opts.online {
            streaming_decode(&model, lm.as_ref(), &x, &opts.beam)?.output
        } else {
            beam_decode(&model, lm.as_ref(), &x, &opts.beam)?
        };
        if opts.beam.nbest == 1 {
            let best = result.best();
            writeln!(out, "{}\t{}\t{}", r.id, vocab.render(&best.symbols), best.score)?;
        } else {
            for (rank, h) in result.nbest.iter().enumerate() {
                writeln!(out, "{}\t{}\t{}\t{}", rank + 1, r.id, vocab.render(&h.symbols), h.score)?;
            }
        }
    }
    if let Some(dir) = opts.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&opts.output, out)?;
    println!("decoded {} utterances into {}", records.len(), opts.output.display());
    Ok(())
}

/// Top-1 transcript per utterance id; n-best files keep rank 1 only.
pub fn read_transcripts(path: &Path, vocab: &Vocab) -> Result<BTreeMap<String, Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (id, symbols) = match fields.as_slice() {
            [id, syms, _score] => (*id, *syms),
            ["1", id, syms, _score] => (*id, *syms),
            [_, _, _, _] => continue,
            _ => bail!("{} line {}: expected tab-separated id, symbols, score", path.display(), n + 1),
        };
        let ids = symbols.split_whitespace().map(|s| vocab.id_or_unk(s)).collect();
        if map.insert(id.to_string(), ids).is_some() {
            bail!("{} line {}: duplicate utterance id {id}", path.display(), n + 1);
        }
    }
    Ok(map)
}

/// Corpus LER over `refs`; fails listing any reference id without a transcript.
pub fn eval(refs: &Path, hyps: &Path, vocab: &Path) -> Result<f64> {
    let vocab = load_vocab(vocab)?;
    let records = read_records(refs)?;
    let transcripts = read_transcripts(hyps, &vocab)?;
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !transcripts.contains_key(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!("{} reference utterances have no transcript: {}", missing.len(), missing.join(", "));
    }
    let (mut errors, mut total) = (0usize, 0usize);
    for r in &records {
        let e = edit_distance(&r.labels, &transcripts[&r.id]);
        println!("{}\t{e}\t{}\t{:.4}", r.id, r.labels.len(), e as f64 / r.labels.len() as f64);
        errors += e;
        total += r.labels.len();
    }
    let ler = errors as f64 / total.max(1) as f64;
    println!("LER {ler:.4} ({errors} errors / {total} labels, {} utterances)", records.len());
    Ok(ler)
}

/// One row of the alignment dump.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub step: usize,
    pub activation: f64,
    pub running_sum: f64,
    pub probability: f64,
    pub segment: usize,
    pub emitted: bool,
}

pub fn alignment_rows(model: &AcsModel, record: &CorpusRecord) -> Result<Vec<AlignmentRow>> {
    let mut g = Graph::new(&model.params);
    let states = model.encode(&mut g, &record.sequence())?;
    let (trace, _, _) = model.align(&mut g, &states)?;
    let mut rows = Vec::with_capacity(trace.activations.len());
    for (k, s) in trace.segments.iter().enumerate() {
        let mut sum = 0.0;
        for j in s.range() {
            sum += trace.activations[j];
            rows.push(AlignmentRow {
                step: j,
                activation: trace.activations[j],
                running_sum: sum,
                probability: trace.probabilities[j],
                segment: k,
                emitted: j == s.end,
            });
        }
    }
    Ok(rows)
}

pub fn render_table(rows: &[AlignmentRow]) -> String {
    let mut out = String::from("step\tactivation\trunning_sum\tprobability\tsegment\temitted\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            r.step,
            r.activation,
            r.running_sum,
            r.probability,
            r.segment,
            if r.emitted { "yes" } else { "no" }
        );
    }
    out
}

pub fn render_svg(rows: &[AlignmentRow], title: &str) -> String {
    let (dx, height, pad) = (12.0, 200.0, 30.0);
    let width = pad * 2.0 + dx * rows.len().max(1) as f64;
    let y = |v: f64| pad + (1.0 - v) * (height - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="18" font-family="monospace" font-size="12">{title}</text>"#);
    let (y0, y1) = (y(0.0), y(1.0));
    let _ = writeln!(
        out,
        r##"<line x1="{pad}" y1="{y0}" x2="{}" y2="{y0}" stroke="#888"/>"##,
        width - pad
    );
    for r in rows.iter().filter(|r| r.emitted) {
        let x = pad + dx * (r.step as f64 + 0.5);
        let _ = writeln!(
            out,
            r##"<line x1="{x}" y1="{y1}" x2="{x}" y2="{y0}" stroke="#c33" stroke-dasharray="3,3"/>"##
        );
    }
    let points: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.1},{:.1}", pad + dx * (r.step as f64 + 0.5), y(r.activation)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="#236" stroke-width="1.5" points="{}"/>"##,
        points.join(" ")
    );
    out.push_str("</svg>\n");
    out
}

pub fn inspect_alignment(checkpoint: &Path, corpus: &Path, utterance: &str, svg: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint)?;
    let records = read_records(corpus)?;
    let record = records
        .iter()
        .find(|r| r.id == utterance)
        .ok_or_else(|| anyhow!("utterance {utterance} not found in {}", corpus.display()))?;
    let rows = alignment_rows(&model, record)?;
    print!("{}", render_table(&rows));
    if let Some(path) = svg {
        write_file(path, render_svg(&rows, utterance))?;
    }
    Ok(())
}
