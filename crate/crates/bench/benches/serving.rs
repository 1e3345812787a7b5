use criterion::{criterion_group, criterion_main, Criterion};
use dualhead_core::harness::random_prompts;
use dualhead_core::training::{Corpus, EvalSet};
use dualhead_core::{embed, generate, generate_nocache, set_mode, Backbone, DecodeParams, Index, Mode, ModelConfig};
use std::hint::black_box;

fn model() -> Backbone {
    Backbone::new(ModelConfig::default(), 0).unwrap()
}

fn bench_decode(c: &mut Criterion) {
    let mut m = model();
    let vocab = m.config().vocab_size;
    let prompt = random_prompts(0, 1, 32, vocab).remove(0);
    let params = DecodeParams::greedy(32);
    let mut group = c.benchmark_group("decode_32");
    group.sample_size(20);
    group.bench_function("cached", |b| b.iter(|| generate(&mut m, black_box(&prompt), &params).unwrap()));
    group.bench_function("uncached", |b| b.iter(|| generate_nocache(&mut m, black_box(&prompt), &params).unwrap()));
    group.finish();
}

fn bench_mode_switch(c: &mut Criterion) {
    let mut m = model();
    c.bench_function("mode_switch_round_trip", |b| {
        b.iter(|| {
            set_mode(&mut m, Mode::Retrieval);
            set_mode(&mut m, Mode::Generation);
        })
    });
}

fn bench_search(c: &mut Criterion) {
    let mut m = model();
    let corpus = Corpus::synthetic(1, 200);
    let mut index = Index::new(m.config().proj_dim);
    for (i, p) in corpus.pairs.iter().enumerate() {
        index.add(EvalSet::doc_id(i), embed(&mut m, &p.document_input(), false).unwrap()).unwrap();
    }
    let q = embed(&mut m, &corpus.pairs[0].query_input(), true).unwrap();
    c.bench_function("search_200_docs", |b| b.iter(|| index.search(black_box(&q), 5).unwrap()));
    c.bench_function("embed_document", |b| {
        b.iter(|| embed(&mut m, black_box(&corpus.pairs[1].document_input()), false).unwrap())
    });
}

criterion_group!(benches, bench_decode, bench_mode_switch, bench_search);
criterion_main!(benches);
