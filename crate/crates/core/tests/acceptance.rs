//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p tokscribe-core --test acceptance -- 1 4 9`.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use tokscribe_core::audio::AudioBuffer;
use tokscribe_core::codec::{
    canonicalize, shuffle_tokens, Codec, SegmentWindow, TokenSeq, TrackDecoder,
};
use tokscribe_core::dataset::{generate, CorpusMode, SyntheticSpec, SyntheticTrack};
use tokscribe_core::metrics::{
    evaluate_corpus, harmonic_f1, instrument_leakage_ratio, instrument_set_prf, onset_match,
    Granularity, Prf,
};
use tokscribe_core::midi::write_smf;
use tokscribe_core::model::{
    cross_key_len, decode_logits, embed_memory, encode_frames, evaluate_teacher_forced,
    gradient_check, transcribe_track, LrSchedule, ModelConfig, Params, TrainConfig, Trainer,
    FD_STEP,
};
use tokscribe_core::notes::{NoteEvent, NoteSequence};
use tokscribe_core::segment::{
    make_training_pairs, prior_window, sample_prior_window, SegmentConfig, Split, TrainingPair,
};
use tokscribe_core::spectral::LogMel;
use tokscribe_core::Vocab;

const WINDOW_S: f64 = 2.048;
const N_WINDOWS: usize = 4;
const TIME_BINS: u32 = 205;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn windows() -> Vec<SegmentWindow> {
    (0..N_WINDOWS)
        .map(|k| SegmentWindow::new(k as f64 * WINDOW_S, (k + 1) as f64 * WINDOW_S))
        .collect()
}

/// Nearest 10 ms step from the start of the window holding `t`, half up, capped
/// at the last step of the window.
fn quantize(t: f64, wins: &[SegmentWindow]) -> f64 {
    let w = wins
        .iter()
        .find(|w| t >= w.start_s && t < w.end_s)
        .expect("time inside the track");
    let steps = ((t - w.start_s) / 0.01 + 0.5)
        .floor()
        .min(f64::from(TIME_BINS - 1));
    w.start_s + steps * 0.01
}

fn key(n: &NoteEvent) -> (bool, u8, u8) {
    (n.is_drum, n.program, n.pitch)
}

/// Random notes with at least 30 ms between notes of the same key and every
/// offset inside the track.
fn random_track(rng: &mut ChaCha8Rng, max_notes: usize) -> NoteSequence {
    let end = N_WINDOWS as f64 * WINDOW_S;
    let mut notes: Vec<NoteEvent> = Vec::new();
    let target = rng.random_range(0..=max_notes);
    while notes.len() < target {
        let onset = rng.random_range(0.0..end - 0.05);
        let cand = if rng.random_bool(0.15) {
            NoteEvent::drum(onset, rng.random_range(35..82))
        } else {
            let off = onset + rng.random_range(0.03..1.5);
            if off >= end - 0.01 {
                continue;
            }
            NoteEvent::new(
                onset,
                off,
                rng.random_range(0..128),
                rng.random_range(0..128),
            )
        };
        let reach = |n: &NoteEvent| n.offset_s + 0.03;
        if notes
            .iter()
            .any(|n| key(n) == key(&cand) && cand.onset_s < reach(n) && n.onset_s < reach(&cand))
        {
            continue;
        }
        notes.push(cand);
    }
    NoteSequence::new(notes, end)
}

fn decode_track(per_window: &[TokenSeq]) -> NoteSequence {
    let mut td = TrackDecoder::new();
    for (toks, w) in per_window.iter().zip(windows()) {
        td.push(toks, w);
    }
    td.finish(N_WINDOWS as f64 * WINDOW_S).0
}

fn criterion_1() -> Outcome {
    let codec = Codec::new(WINDOW_S, 1024);
    let wins = windows();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = 0;
    for _ in 0..200 {
        let seq = random_track(&mut rng, 40);
        let tokens: Vec<TokenSeq> = wins.iter().map(|&w| codec.encode(&seq, w)).collect();
        let got = decode_track(&tokens);
        let want = NoteSequence::new(
            seq.notes()
                .iter()
                .map(|n| {
                    let on = quantize(n.onset_s, &wins);
                    let off = if n.is_drum {
                        on
                    } else {
                        quantize(n.offset_s, &wins)
                    };
                    NoteEvent {
                        onset_s: on,
                        offset_s: off,
                        ..*n
                    }
                })
                .collect(),
            seq.duration_s(),
        );
        if got.notes() != want.notes() {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("200 sequences x {N_WINDOWS} windows, {failures} failures"),
    )
}

/// Chord-heavy tracks so that most time steps hold several program groups.
fn chordal_track(rng: &mut ChaCha8Rng) -> NoteSequence {
    let programs = [0u8, 5, 33, 40, 81];
    let mut notes = Vec::new();
    for step in 0..70 {
        let t = f64::from(step) * 0.1 + 0.05;
        for &p in &programs {
            if rng.random_bool(0.35) {
                for pitch in [60u8, 64, 67].iter().filter(|_| rng.random_bool(0.6)) {
                    notes.push(NoteEvent::new(t, t + 0.05, *pitch + p % 12, p));
                }
            }
        }
        if rng.random_bool(0.3) {
            notes.push(NoteEvent::drum(t, 36));
        }
    }
    NoteSequence::new(notes, N_WINDOWS as f64 * WINDOW_S)
}

fn criterion_2() -> Outcome {
    let codec = Codec::new(WINDOW_S, 1024);
    let wins = windows();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut midi_fail, mut canon_fail, mut changed) = (0, 0, 0);
    for _ in 0..50 {
        let seq = chordal_track(&mut rng);
        let tokens: Vec<TokenSeq> = wins.iter().map(|&w| codec.encode(&seq, w)).collect();
        let reference = write_smf(&decode_track(&tokens), 480);
        for _ in 0..20 {
            let shuffled: Vec<TokenSeq> = tokens
                .iter()
                .map(|t| shuffle_tokens(t, &mut rng).unwrap())
                .collect();
            if shuffled != tokens {
                changed += 1;
            }
            if write_smf(&decode_track(&shuffled), 480) != reference {
                midi_fail += 1;
            }
            for (s, t) in shuffled.iter().zip(&tokens) {
                if canonicalize(s).unwrap() != canonicalize(t).unwrap() {
                    canon_fail += 1;
                }
            }
        }
    }
    outcome(
        midi_fail == 0 && canon_fail == 0 && changed > 900,
        format!("1000 shuffles ({changed} reordered): {midi_fail} MIDI mismatches, {canon_fail} canonical mismatches"),
    )
}

fn criterion_3() -> Outcome {
    // (start frame i, hop) -> prior frames [i - hop*256, i + (1 - hop)*256), worked by hand
    let table: [(usize, usize, isize, isize); 20] = [
        (0, 1, -256, 0),
        (256, 1, 0, 256),
        (512, 1, 256, 512),
        (512, 2, 0, 256),
        (768, 3, 0, 256),
        (768, 2, 256, 512),
        (1024, 1, 768, 1024),
        (1024, 4, 0, 256),
        (1280, 5, 0, 256),
        (1280, 2, 768, 1024),
        (256, 2, -256, 0),
        (0, 3, -768, -512),
        (1792, 1, 1536, 1792),
        (1792, 7, 0, 256),
        (1536, 3, 768, 1024),
        (2048, 8, 0, 256),
        (2304, 4, 1280, 1536),
        (100, 1, -156, 100),
        (384, 1, 128, 384),
        (640, 2, 128, 384),
    ];
    let bad: Vec<_> = table
        .iter()
        .filter(|&&(i, hop, s, e)| prior_window(i, hop, 256) != (s, e))
        .collect();
    let max_hop = 6;
    let cfg = SegmentConfig {
        max_hop,
        ..SegmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut counts = vec![0f64; max_hop];
    let draws = 100_000;
    let mut inconsistent = 0;
    for _ in 0..draws {
        let pw = sample_prior_window(1536, &cfg, &mut rng);
        counts[pw.hop - 1] += 1.0;
        if (pw.start, pw.end) != prior_window(1536, pw.hop, 256) {
            inconsistent += 1;
        }
    }
    let expected = draws as f64 / max_hop as f64;
    let stat: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((max_hop - 1) as f64).unwrap().cdf(stat);
    outcome(
        bad.is_empty() && inconsistent == 0 && p > 0.01,
        format!(
            "{} of 20 table cases wrong; hop uniformity chi2 {stat:.2}, p = {p:.3}",
            bad.len()
        ),
    )
}

fn same_class(g: Granularity, a: &NoteEvent, b: &NoteEvent) -> bool {
    if a.is_drum || b.is_drum {
        return a.is_drum && b.is_drum;
    }
    match g {
        Granularity::Flat => true,
        Granularity::MidiClass => a.program / 8 == b.program / 8,
        Granularity::Full => a.program == b.program,
    }
}

/// Largest matching by trying every assignment.
fn exhaustive_matches(r: &[NoteEvent], e: &[NoteEvent], g: Granularity, tol: f64) -> usize {
    fn go(
        i: usize,
        used: &mut Vec<bool>,
        r: &[NoteEvent],
        e: &[NoteEvent],
        ok: &dyn Fn(usize, usize) -> bool,
    ) -> usize {
        if i == r.len() {
            return 0;
        }
        let mut best = go(i + 1, used, r, e, ok);
        for j in 0..e.len() {
            if !used[j] && ok(i, j) {
                used[j] = true;
                best = best.max(1 + go(i + 1, used, r, e, ok));
                used[j] = false;
            }
        }
        best
    }
    let ok = |i: usize, j: usize| {
        r[i].pitch == e[j].pitch
            && same_class(g, &r[i], &e[j])
            && (r[i].onset_s - e[j].onset_s).abs() <= tol + 1e-9
    };
    go(0, &mut vec![false; e.len()], r, e, &ok)
}

fn random_small(rng: &mut ChaCha8Rng) -> NoteSequence {
    let n = rng.random_range(1..=8);
    let notes = (0..n)
        .map(|_| {
            let t = f64::from(rng.random_range(0..30u32)) * 0.01;
            if rng.random_bool(0.2) {
                NoteEvent::drum(t, rng.random_range(60..63))
            } else {
                NoteEvent::new(
                    t,
                    t + 0.2,
                    rng.random_range(60..63),
                    [0u8, 1, 9, 10][rng.random_range(0..4)],
                )
            }
        })
        .collect();
    NoteSequence::from_notes(notes)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (r, e) = (random_small(&mut rng), random_small(&mut rng));
        for g in Granularity::ALL {
            let c = onset_match(&r, &e, g, 0.05);
            let tp = exhaustive_matches(r.notes(), e.notes(), g, 0.05);
            let (p, rc) = (tp as f64 / e.len() as f64, tp as f64 / r.len() as f64);
            let f1 = if tp == 0 {
                0.0
            } else {
                2.0 * p * rc / (p + rc)
            };
            if c.tp != tp
                || c.fp != e.len() - tp
                || c.fn_ != r.len() - tp
                || Prf::from_counts(c).f1 != f1
            {
                mismatches += 1;
            }
        }
    }
    let seq = |progs: &[u8]| {
        NoteSequence::from_notes(
            progs
                .iter()
                .map(|&p| NoteEvent::new(0.0, 1.0, 60, p))
                .collect(),
        )
    };
    let (a, b, c) = (seq(&[0, 33]), seq(&[0, 33, 40, 41]), seq(&[25]));
    let (d, e) = (seq(&[0, 1]), seq(&[0, 1, 2]));
    let phi = instrument_leakage_ratio(&[(&a, &b), (&c, &c)]).unwrap();
    let det = instrument_set_prf(&d.instruments(), &e.instruments());
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    // phi: (4 + 1) predicted over (2 + 1) true instruments
    let fixtures_ok = close(phi, 5.0 / 3.0)
        && close(det.precision, 2.0 / 3.0)
        && close(det.recall, 1.0)
        && close(det.f1, 0.8);
    outcome(
        mismatches == 0 && fixtures_ok,
        format!("500 instances x 3 granularities, {mismatches} oracle mismatches; phi {phi:.6}, detection {det:?}"),
    )
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let reports: Vec<_> = (0..5).map(|s| gradient_check(s, true)).collect();
    let secs = t0.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    let elem = reports
        .iter()
        .map(|r| r.max_elem_rel_err())
        .fold(0.0, f64::max);
    let mem = reports[0]
        .tensors
        .iter()
        .filter(|t| t.name.starts_with("mem."))
        .count();
    outcome(
        worst < 1e-4 && secs < 120.0 && mem > 0,
        format!(
            "5 seeds, h = {FD_STEP:e}, {} tensors ({mem} memory), max rel err {worst:.2e} (elementwise {elem:.1e}), {secs:.1}s",
            reports[0].tensors.len()
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut lens = Vec::new();
    for l_agg in [0, 32, 64] {
        let cfg = ModelConfig {
            l_agg,
            ..ModelConfig::default()
        };
        let p = Params::init(&cfg, 6);
        let frames = ndarray::Array2::<f32>::zeros((cfg.frames_per_window, cfg.input_dim));
        let enc = encode_frames(&p, &cfg, &frames.view(), cfg.frames_per_window).unwrap();
        let mut prior = vec![Vocab::PAD; cfg.max_tokens];
        prior[..3].copy_from_slice(&[Vocab::TIE, 10, Vocab::EOS]);
        let mem = embed_memory(&p, &cfg, &prior).unwrap();
        lens.push((l_agg, cross_key_len(&cfg, &enc, mem.as_ref())));
    }
    let frames = LogMel::new()
        .compute(&AudioBuffer::new(vec![0.0; 256_000], 16_000))
        .unwrap()
        .nrows();
    let ok = lens.iter().all(|&(l, n)| n == 256 + l) && frames == 2000;
    outcome(
        ok,
        format!("(L_agg, key length) {lens:?}; 256000 samples -> {frames} frames"),
    )
}

fn train_pairs(
    tracks: &[&SyntheticTrack],
    seg: &SegmentConfig,
    seed: u64,
) -> Vec<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tracks
        .iter()
        .map(|t| make_training_pairs(&t.audio, &t.notes, seg, &mut rng).unwrap())
        .collect()
}

fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        schedule: LrSchedule {
            peak: 1e-3,
            floor: 1e-4,
            warmup_steps: 30,
            total_steps: 2000,
        },
        seed,
        ..TrainConfig::default()
    }
}

fn toy_model(l_agg: usize) -> ModelConfig {
    ModelConfig {
        l_agg,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn criterion_7() -> (Outcome, String) {
    let t0 = Instant::now();
    let budget_s = 600.0;
    let corpus = generate(&SyntheticSpec::default()).unwrap();
    let train: Vec<&SyntheticTrack> = corpus.iter().filter(|t| t.split == Split::Train).collect();
    let seg = SegmentConfig::default();
    let pairs = train_pairs(&train, &seg, 7);
    let all: Vec<&TrainingPair> = pairs.iter().flatten().collect();
    let cfg = toy_model(64);
    let mut trainer = Trainer::new(cfg.clone(), toy_train_config(7)).unwrap();
    let mut acc = 0.0;
    while t0.elapsed().as_secs_f64() < budget_s {
        trainer.train_step(&pairs).unwrap();
        if trainer.step % 25 == 0 {
            acc = evaluate_teacher_forced(&trainer.params, &cfg, &all)
                .unwrap()
                .accuracy();
            if acc >= 0.99 {
                break;
            }
        }
    }
    let train_s = t0.elapsed().as_secs_f64();
    let mut items = Vec::new();
    for t in train.iter().take(4) {
        let est = transcribe_track(&trainer.params, &cfg, &seg, &t.audio)
            .unwrap()
            .notes;
        items.push((t.name.clone(), t.notes.clone(), est));
    }
    let named: Vec<_> = items.iter().map(|(n, r, e)| (n.as_str(), r, e)).collect();
    let f1 = evaluate_corpus(&named, 0.05).onset.flat.f1;
    let total_s = t0.elapsed().as_secs_f64();
    let silent = transcribe_track(
        &trainer.params,
        &cfg,
        &seg,
        &AudioBuffer::silence(4.096, 16_000),
    )
    .unwrap()
    .notes
    .len();
    let extra = format!("silence budget (<= 2 notes on 4.096 s of silence): {silent} notes");
    (
        outcome(
            acc >= 0.99 && f1 >= 0.90 && total_s <= budget_s,
            format!(
                "{} train tracks, {} steps: accuracy {acc:.4} after {train_s:.0}s, flat onset F1 on 4 tracks {f1:.3}, total {total_s:.0}s",
                train.len(),
                trainer.step
            ),
        ),
        format!("{} {extra}", if silent <= 2 { "PASS" } else { "FAIL" }),
    )
}

struct Disambiguation {
    correct: usize,
    segments: usize,
    phi: f64,
    logit_shift: f64,
}

fn swap_programs(ids: &[u32], vocab: &Vocab) -> Vec<u32> {
    let base = vocab.program_ids().start;
    let swap: BTreeMap<u32, u32> = [(0, 1), (1, 0), (16, 64), (64, 16)].into_iter().collect();
    ids.iter()
        .map(
            |&id| match id.checked_sub(base).and_then(|p| swap.get(&p)) {
                Some(&q) if vocab.program_ids().contains(&id) => base + q,
                _ => id,
            },
        )
        .collect()
}

fn run_disambiguation(
    l_agg: usize,
    train: &[&SyntheticTrack],
    held: &[SyntheticTrack],
    steps: u64,
) -> Disambiguation {
    let seg = SegmentConfig::default();
    let vocab = seg.vocab();
    let pairs = train_pairs(train, &seg, 8);
    let cfg = toy_model(l_agg);
    let mut trainer = Trainer::new(cfg.clone(), toy_train_config(8)).unwrap();
    while trainer.step < steps {
        trainer.train_step(&pairs).unwrap();
    }
    let p = &trainer.params;
    let (mut correct, mut segments) = (0, 0);
    let mut est = Vec::new();
    for t in held {
        let notes = transcribe_track(p, &cfg, &seg, &t.audio).unwrap().notes;
        let n_windows = (t.notes.duration_s() / WINDOW_S).round() as usize;
        for k in 1..n_windows {
            let (lo, hi) = (k as f64 * WINDOW_S, (k + 1) as f64 * WINDOW_S);
            let mut votes: BTreeMap<u8, usize> = BTreeMap::new();
            for n in notes
                .notes()
                .iter()
                .filter(|n| n.onset_s >= lo && n.onset_s < hi)
            {
                *votes.entry(n.program).or_default() += 1;
            }
            let total: usize = votes.values().sum();
            let right = t
                .context_program
                .and_then(|c| votes.get(&c))
                .copied()
                .unwrap_or(0);
            segments += 1;
            if 2 * right > total {
                correct += 1;
            }
        }
        est.push(notes);
    }
    let refs: Vec<(&NoteSequence, &NoteSequence)> =
        held.iter().zip(&est).map(|(t, e)| (&t.notes, e)).collect();
    let phi = instrument_leakage_ratio(&refs).unwrap();
    // teacher-forced logits for window 1 of the first held-out track, with the
    // prior's program ids swapped between the two contexts
    let mut logit_shift = 0.0;
    if cfg.has_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tp = make_training_pairs(&held[0].audio, &held[0].notes, &seg, &mut rng).unwrap();
        let w1 = &tp[1];
        let enc = encode_frames(p, &cfg, &w1.frames.view(), w1.valid_frames).unwrap();
        let mut input = vec![Vocab::SOS];
        input.extend(w1.target.iter().take_while(|&&t| t != Vocab::PAD));
        input.pop();
        let logits = |prior: &[u32]| {
            let mem = embed_memory(p, &cfg, prior).unwrap();
            decode_logits(p, &cfg, &input, &enc, mem.as_ref(), w1.valid_frames).unwrap()
        };
        let (a, b) = (logits(&w1.prior), logits(&swap_programs(&w1.prior, &vocab)));
        let progs = vocab.program_ids();
        logit_shift = (&a - &b)
            .slice(ndarray::s![.., progs.start as usize..progs.end as usize])
            .iter()
            .fold(0.0, |m: f64, x| m.max(x.abs()));
    }
    Disambiguation {
        correct,
        segments,
        phi,
        logit_shift,
    }
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        n_tracks: 24,
        track_seconds: 3.0 * WINDOW_S,
        notes_per_track: 12,
        mode: CorpusMode::Disambiguation,
        seed: 1,
        ..SyntheticSpec::default()
    };
    let corpus = generate(&spec).unwrap();
    let train: Vec<&SyntheticTrack> = corpus.iter().filter(|t| t.split == Split::Train).collect();
    let held = generate(&SyntheticSpec {
        n_tracks: 16,
        seed: 2,
        ..spec
    })
    .unwrap();
    let steps = 450;
    let with = run_disambiguation(64, &train, &held, steps);
    let without = run_disambiguation(0, &train, &held, steps);
    let rate = |d: &Disambiguation| d.correct as f64 / d.segments as f64;
    let pass = rate(&with) >= 0.70
        && rate(&without) <= 0.55
        && with.phi <= without.phi
        && with.logit_shift > 0.0;
    outcome(
        pass,
        format!(
            "context-correct program {}/{} with memory vs {}/{} without; phi {:.3} vs {:.3}; prior program swap moves program logits by {:.3}; {:.0}s",
            with.correct,
            with.segments,
            without.correct,
            without.segments,
            with.phi,
            without.phi,
            with.logit_shift,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_9() -> Outcome {
    // A denominator of Precision × Recall would give 2PR / (PR) = 2 at P = R = 1.
    // The harmonic mean 2PR / (P + R) gives 1.
    let perfect = harmonic_f1(1.0, 1.0);
    let set: BTreeSet<u8> = [0, 24, 128].into_iter().collect();
    let detected = instrument_set_prf(&set, &set).f1;
    outcome(
        perfect == 1.0 && detected == 1.0,
        format!("F1(P=1, R=1) = {perfect}, identical instrument sets F1 = {detected}"),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut extras = Vec::new();
    let names = [
        "codec round trip",
        "shuffle invariance",
        "prior-window formula",
        "metric oracle",
        "gradient check",
        "shape invariants",
        "toy overfit",
        "memory causality",
        "instrument F1 regression guard",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i as u32 + 1;
        if !run(n) {
            continue;
        }
        let t0 = Instant::now();
        let o = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => {
                let (o, extra) = criterion_7();
                extras.push(extra);
                o
            }
            8 => criterion_8(),
            _ => criterion_9(),
        };
        let limit = match n {
            1 | 2 => Some(30.0),
            5 => Some(120.0),
            _ => None,
        };
        let secs = t0.elapsed().as_secs_f64();
        let o = match limit {
            Some(l) if secs > l => {
                outcome(false, format!("{} (took {secs:.1}s, limit {l}s)", o.detail))
            }
            _ => o,
        };
        println!(
            "criterion {n} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    }
    for e in &extras {
        println!("extra {e}");
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
