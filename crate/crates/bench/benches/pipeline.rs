use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tokscribe_core::codec::TrackDecoder;
use tokscribe_core::dataset::{generate_track, SyntheticSpec, MIDI_PPQ};
use tokscribe_core::metrics::evaluate_track;
use tokscribe_core::spectral::LogMel;
use tokscribe_core::{parse_smf, write_smf, Codec, SegmentWindow};

const WS: f64 = 2.048;

fn pipeline(c: &mut Criterion) {
    let spec = SyntheticSpec {
        notes_per_track: 40,
        track_seconds: 8.192,
        max_instruments: 3,
        drums: true,
        polyphony: 3,
        ..SyntheticSpec::default()
    };
    let track = generate_track(&spec, 0);
    let codec = Codec::new(WS, 1024);
    let windows: Vec<SegmentWindow> = (0..4)
        .map(|k| SegmentWindow::new(k as f64 * WS, (k + 1) as f64 * WS))
        .collect();

    c.bench_function("encode_4_windows", |b| {
        b.iter(|| {
            for &w in &windows {
                black_box(codec.encode(black_box(&track.notes), w));
            }
        })
    });

    let encoded: Vec<_> = windows
        .iter()
        .map(|&w| codec.encode(&track.notes, w))
        .collect();
    c.bench_function("decode_4_windows", |b| {
        b.iter(|| {
            let mut td = TrackDecoder::new();
            for (t, &w) in encoded.iter().zip(&windows) {
                td.push(black_box(t), w);
            }
            black_box(td.finish(4.0 * WS))
        })
    });

    let smf = write_smf(&track.notes, MIDI_PPQ);
    c.bench_function("smf_write", |b| {
        b.iter(|| black_box(write_smf(black_box(&track.notes), MIDI_PPQ)))
    });
    c.bench_function("smf_parse", |b| {
        b.iter(|| black_box(parse_smf(black_box(&smf)).unwrap()))
    });

    let mel = LogMel::new();
    let mut g = c.benchmark_group("spectral");
    g.sample_size(10);
    g.bench_function("log_mel_8s", |b| {
        b.iter(|| black_box(mel.compute(black_box(&track.audio)).unwrap()))
    });
    g.finish();

    let other = generate_track(&spec, 1);
    c.bench_function("evaluate_track", |b| {
        b.iter(|| {
            black_box(evaluate_track(
                "x",
                black_box(&track.notes),
                black_box(&other.notes),
                0.05,
            ))
        })
    });
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
