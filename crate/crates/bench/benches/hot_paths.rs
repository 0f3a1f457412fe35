use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mmkg_core::captioning::{detect_degenerate, DEFAULT_DEGENERATE_THRESHOLD};
use mmkg_core::linkpred::synthetic::{text_informative_kg, TextInformativeSpec};
use mmkg_core::linkpred::*;

fn featurize(c: &mut Criterion) {
    let text =
        "a red brick tower beside a canal with moored boats, cyclists and a stone bridge under a grey sky ".repeat(8);
    c.bench_function("featurize_text/256", |b| b.iter(|| featurize_text(black_box(&text), 256)));
}

fn degenerate(c: &mut Criterion) {
    let looping = "person, ".repeat(64);
    let varied =
        "a wide harbor at dusk with fishing boats, stacked crates, gulls over the water and lamps along the quay";
    c.bench_function("detect_degenerate/looping", |b| {
        b.iter(|| detect_degenerate(black_box(&looping), DEFAULT_DEGENERATE_THRESHOLD))
    });
    c.bench_function("detect_degenerate/varied", |b| {
        b.iter(|| detect_degenerate(black_box(varied), DEFAULT_DEGENERATE_THRESHOLD))
    });
}

fn ranking(c: &mut Criterion) {
    let ds = text_informative_kg(&TextInformativeSpec { groups: 8, warm_per_group: 20, cold_per_group: 4, seed: 1 });
    let mut config = ExperimentConfig::new("s+t".parse().unwrap(), None);
    config.hyper.epochs = 5;
    let features = build_features(&ds, &[], None, &config).unwrap();
    let (model, _) = train(&ds, &features, &config.modality, &config.hyper).unwrap();
    let emb = model.embed(&features);
    let test = id_triples(&ds, &ds.test);
    let known = KnownTriples::from_dataset(&ds);
    c.bench_function("evaluate/filtered", |b| {
        b.iter(|| evaluate(&emb, black_box(&test), FilterMode::Filtered, &known, None).unwrap())
    });
    let q = Query { triple: test[0], direction: Direction::Tail };
    c.bench_function("rank_query/filtered", |b| {
        b.iter(|| rank_query(&emb, black_box(&q), FilterMode::Filtered, &known))
    });
}

criterion_group!(benches, featurize, degenerate, ranking);
criterion_main!(benches);
