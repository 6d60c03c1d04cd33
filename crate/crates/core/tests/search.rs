use acs_core::decoder::{Vocab, FIRST_LABEL, SOS};
use acs_core::encoder::FrameSequence;
use acs_core::lm::{LanguageModel, LmConfig};
use acs_core::model::{AcsModel, ModelConfig};
use acs_core::numerics::Graph;
use acs_core::search::{beam_decode, greedy_decode, streaming_decode, BeamConfig, StreamingDecoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INPUT_DIM: usize = 3;

fn small_model(labels: usize, window: usize, seed: u64) -> AcsModel {
    let mut cfg = ModelConfig::online(INPUT_DIM, Vocab::with_labels(labels).len());
    cfg.encoder.units = 6;
    cfg.decoder.embed_dim = 5;
    cfg.decoder.units = 7;
    cfg.decoder.window = window;
    let mut model = AcsModel::new(cfg).unwrap();
    model.params.init_uniform(-0.8, 0.8, seed).unwrap();
    model
}

/// Forces every encoder step to close its own segment.
fn one_segment_per_step(model: &mut AcsModel) {
    let proj = model.params.id("halting.proj").unwrap();
    model.params.get_mut(proj).data_mut().fill(0.0);
    let bias = model.halting.proj_bias();
    model.params.get_mut(bias).data_mut().fill(30.0);
}

fn frames(rng: &mut ChaCha8Rng, id: &str, len: usize) -> FrameSequence {
    let f = (0..len)
        .map(|_| (0..INPUT_DIM).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    FrameSequence::new(id, f).unwrap()
}

fn beam(width: usize, window: usize) -> BeamConfig {
    BeamConfig {
        width,
        window,
        ..BeamConfig::default()
    }
}

/// Teacher-forced sum of per-step log-probabilities of `symbols`.
fn sequence_score(model: &AcsModel, x: &FrameSequence, symbols: &[usize], window: usize) -> f64 {
    let mut g = Graph::new(&model.params);
    let states = model.encode(&mut g, x).unwrap();
    let (_, contexts, _) = model.align(&mut g, &states).unwrap();
    assert_eq!(contexts.len(), symbols.len());
    let mut state = model.decoder.initial_state(&mut g);
    let mut prev = SOS;
    let mut total = 0.0;
    for (i, &y) in symbols.iter().enumerate() {
        let w = model.decoder.window(&mut g, &contexts, i, window).unwrap();
        let (next, logp) = model.decoder.step(&mut g, state, prev, w).unwrap();
        total += g.data(logp)[y];
        state = next;
        prev = y;
    }
    total
}

#[test]
fn width_one_matches_greedy() {
    let model = small_model(5, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..20 {
        let len = rng.random_range(1..60);
        let x = frames(&mut rng, &format!("u{k}"), len);
        for window in [0, 1] {
            let g = greedy_decode(&model, None, &x, 0.0, window).unwrap();
            let b = beam_decode(&model, None, &x, &beam(1, window)).unwrap();
            assert_eq!(g.best(), b.best());
            assert_eq!(g.best().symbols.len(), g.trace.segments.len());
            assert_eq!(g.contexts, b.contexts);
        }
    }
}

#[test]
fn beam_matches_exhaustive_search() {
    let mut model = small_model(4, 1, 5);
    one_segment_per_step(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..5 {
        // 12 frames downsample to 3 encoder steps
        let x = frames(&mut rng, &format!("u{k}"), 12);
        let out = beam_decode(&model, None, &x, &beam(64, 1)).unwrap();
        assert_eq!(out.best().symbols.len(), 3);
        let labels: Vec<usize> = (FIRST_LABEL..FIRST_LABEL + 4).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for &a in &labels {
            for &b in &labels {
                for &c in &labels {
                    let seq = vec![a, b, c];
                    let s = sequence_score(&model, &x, &seq, 1);
                    if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
                        best = Some((s, seq));
                    }
                }
            }
        }
        let (score, seq) = best.unwrap();
        assert_eq!(out.best().symbols, seq);
        assert!((out.best().score - score).abs() < 1e-12);
    }
}

#[test]
fn nbest_scores_are_sorted_and_share_length() {
    let model = small_model(5, 1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..10 {
        let len = rng.random_range(8..80);
        let x = frames(&mut rng, &format!("u{k}"), len);
        let cfg = BeamConfig {
            width: 8,
            nbest: 8,
            ..BeamConfig::default()
        };
        let out = beam_decode(&model, None, &x, &cfg).unwrap();
        let len = out.trace.segments.len();
        for pair in out.nbest.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        assert!(out.nbest.iter().all(|h| h.symbols.len() == len));
        for h in &out.nbest {
            let s = sequence_score(&model, &x, &h.symbols, 1);
            assert!((h.score - s).abs() < 1e-9);
        }
    }
}

#[test]
fn wider_beams_never_score_lower() {
    let model = small_model(5, 1, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 0..10 {
        let len = rng.random_range(8..80);
        let x = frames(&mut rng, &format!("u{k}"), len);
        let scores: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&w| beam_decode(&model, None, &x, &beam(w, 1)).unwrap().best().score)
            .collect();
        for pair in scores.windows(2) {
            assert!(pair[1] >= pair[0], "{scores:?}");
        }
    }
}

#[test]
fn zero_gamma_ignores_language_model() {
    let model = small_model(5, 1, 9);
    let lm = LanguageModel::initialized(LmConfig::default(), model.config.vocab_size, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = frames(&mut rng, "u", 40);
    let with = beam_decode(&model, Some(&lm), &x, &beam(4, 1)).unwrap();
    let without = beam_decode(&model, None, &x, &beam(4, 1)).unwrap();
    assert_eq!(with.nbest, without.nbest);
    let fused = BeamConfig {
        gamma: 0.5,
        ..beam(4, 1)
    };
    let small = LanguageModel::initialized(LmConfig::default(), 3, 1).unwrap();
    assert!(beam_decode(&model, Some(&small), &x, &fused).is_err());
}

#[test]
fn streaming_matches_batch() {
    let model = small_model(5, 1, 13);
    let lm = LanguageModel::initialized(LmConfig::default(), model.config.vocab_size, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for k in 0..15 {
        let len = rng.random_range(1..70);
        let x = frames(&mut rng, &format!("u{k}"), len);
        for (width, window, gamma) in [(1, 0, 0.0), (1, 1, 0.0), (4, 1, 0.0), (4, 1, 0.3)] {
            let cfg = BeamConfig {
                width,
                window,
                gamma,
                nbest: 1,
            };
            let batch = beam_decode(&model, Some(&lm), &x, &cfg).unwrap();
            let stream = streaming_decode(&model, Some(&lm), &x, &cfg).unwrap();
            assert_eq!(stream.output.nbest, batch.nbest);
            assert_eq!(stream.output.contexts, batch.contexts);
            assert_eq!(stream.output.emission_steps, batch.emission_steps);
            let committed: Vec<usize> = stream.emissions.iter().map(|e| e.symbol).collect();
            assert_eq!(committed, batch.best().symbols);
        }
    }
}

#[test]
fn last_symbol_waits_for_flush_with_future_context() {
    let mut model = small_model(5, 1, 13);
    one_segment_per_step(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..10 {
        let len = rng.random_range(20..70);
        let x = frames(&mut rng, &format!("u{k}"), len);
        let out = streaming_decode(&model, None, &x, &beam(1, 1)).unwrap();
        assert!(out.emissions.last().unwrap().at_flush);
        let out = streaming_decode(&model, None, &x, &beam(1, 0)).unwrap();
        assert!(out.emissions.iter().filter(|e| !e.at_flush).count() >= out.emissions.len() - 2);
    }
}

#[test]
fn symbols_commit_once_window_context_exists() {
    let mut model = small_model(5, 1, 13);
    one_segment_per_step(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = frames(&mut rng, "u", 40);
    let mut dec = StreamingDecoder::new(&model, None, beam(1, 1), "u").unwrap();
    for f in &x.frames {
        let committed = dec.push_frame(f).unwrap();
        for e in committed {
            assert!(e.index + 1 < dec.contexts_emitted());
        }
    }
    let out = dec.finish().unwrap();
    assert_eq!(out.emissions.len(), out.output.best().symbols.len());
    assert!(out.emissions.iter().filter(|e| e.at_flush).count() >= 1);
}

#[test]
fn halting_evaluations_equal_encoder_steps() {
    let model = small_model(5, 1, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for len in [50, 123, 400, 801] {
        let x = frames(&mut rng, "u", len);
        let out = streaming_decode(&model, None, &x, &beam(1, 1)).unwrap();
        assert_eq!(out.output.halting_evaluations, len.div_ceil(4));
        let batch = greedy_decode(&model, None, &x, 0.0, 1).unwrap();
        assert_eq!(batch.halting_evaluations, len.div_ceil(4));
    }
}

#[test]
fn streaming_rejects_bidirectional_encoders_and_wide_windows() {
    let cfg = ModelConfig::offline(INPUT_DIM, Vocab::with_labels(4).len());
    let model = AcsModel::initialized(cfg, 1).unwrap();
    assert!(StreamingDecoder::new(&model, None, beam(1, 1), "u").is_err());
    let model = small_model(4, 1, 1);
    assert!(StreamingDecoder::new(&model, None, beam(1, 2), "u").is_err());
    assert!(beam_decode(&model, None, &FrameSequence::new("u", vec![vec![0.0; 3]]).unwrap(), &beam(0, 1)).is_err());
}
