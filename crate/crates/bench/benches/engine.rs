use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rahp_core::clustering::{build_super_map, kmeans, KMeansParams};
use rahp_core::corpus::{infer_corpus, ScoresFile};
use rahp_core::embedding::{similarity_matrix, EmbeddingMatrix};
use rahp_core::eval::{evaluate_corpus, EvalOptions};
use rahp_core::inference::InferOptions;
use rahp_core::presets::{vg_predcls_vocabulary, VG_SUPER_ENTITIES};
use rahp_core::prompts::{all_prompt_strings, index_hierarchy};
use rahp_core::scorer::{score_batch, ScorerConfig};
use rahp_core::synth::{entity_embeddings, synthetic_corpus, synthetic_regions, CorpusParams, HashEncoder};

const DIM: usize = 256;

fn texts(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix} {i}")).collect()
}

fn bench_similarity(c: &mut Criterion) {
    let enc = HashEncoder::new(512, 1);
    let rows = enc.encode_all(&texts("row", 256)).unwrap();
    let cols = enc.encode_all(&texts("col", 1024)).unwrap();
    let mut g = c.benchmark_group("similarity");
    g.throughput(Throughput::Elements((rows.count() * cols.count()) as u64));
    g.bench_function("256x1024x512", |b| b.iter(|| similarity_matrix(black_box(&rows), black_box(&cols)).unwrap()));
    g.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let vocab = vg_predcls_vocabulary();
    let points = entity_embeddings(&vocab, &HashEncoder::new(512, 2)).unwrap();
    let mut g = c.benchmark_group("kmeans");
    g.sample_size(10);
    g.bench_function("150x512_to_30", |b| b.iter(|| kmeans(black_box(&points), 30, 0, &KMeansParams::default()).unwrap()));
    g.finish();
}

fn bench_pipeline(c: &mut Criterion) {
    let vocab = vg_predcls_vocabulary();
    let enc = HashEncoder::new(DIM, 3);
    let names: Vec<String> = VG_SUPER_ENTITIES.iter().map(|s| s.to_string()).collect();
    let map = build_super_map(
        &entity_embeddings(&vocab, &enc).unwrap(),
        names.len(),
        &names,
        None,
        0,
        &KMeansParams::default(),
    )
    .unwrap();
    let regions = synthetic_regions(&map.super_names, &vocab, 4);
    let text: Arc<EmbeddingMatrix> = Arc::new(enc.encode_all(&all_prompt_strings(&vocab, &map, &regions)).unwrap());
    let hier = index_hierarchy(&vocab, &map, &regions, text).unwrap();
    let params = CorpusParams { images: 20, ..CorpusParams::default() };
    let corpus = synthetic_corpus(&hier, &vocab, &params, 5);
    let batch = corpus.proposals.to_batch(corpus.relation.clone(), corpus.union.clone()).unwrap();

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(20);
    g.throughput(Throughput::Elements(batch.len() as u64));
    g.bench_function("score_2000_proposals", |b| {
        b.iter(|| score_batch(black_box(&batch), &hier, &ScorerConfig::default()).unwrap())
    });
    let mut unlabeled = batch.clone();
    for p in unlabeled.proposals.iter_mut().take(200) {
        p.subj_label = None;
    }
    unlabeled.proposals.truncate(200);
    g.throughput(Throughput::Elements(200));
    g.bench_function("score_200_unlabeled_max_all", |b| {
        b.iter(|| score_batch(black_box(&unlabeled), &hier, &ScorerConfig::default()).unwrap())
    });

    let scored = score_batch(&batch, &hier, &ScorerConfig::default()).unwrap();
    let scores = ScoresFile::from_tensor(&corpus.proposals, &scored.scores, vocab.predicate_names());
    g.throughput(Throughput::Elements(params.images as u64));
    g.bench_function("infer_20_images", |b| {
        b.iter(|| infer_corpus(black_box(&corpus.proposals), &scores, &InferOptions::default()).unwrap())
    });
    let graphs = infer_corpus(&corpus.proposals, &scores, &InferOptions::default()).unwrap();
    g.bench_function("eval_20_images", |b| {
        b.iter_batched(
            || graphs.clone(),
            |graphs| evaluate_corpus(&graphs, &corpus.ground_truth, &vocab, &EvalOptions::default()).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bench_similarity, bench_kmeans, bench_pipeline);
criterion_main!(benches);
