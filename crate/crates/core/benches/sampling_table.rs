use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refgen::mining::{synthetic_embeddings, SamplingTable};

const PAIRS: usize = 10_000;
const DIM: usize = 64;
const CATEGORIES: usize = 200;

fn build(c: &mut Criterion) {
    let emb = synthetic_embeddings(PAIRS, DIM, CATEGORIES, 0);
    c.bench_function("build 1e4 x 64", |b| b.iter(|| SamplingTable::build(&emb).unwrap()));
}

fn sample(c: &mut Criterion) {
    let emb = synthetic_embeddings(PAIRS, DIM, CATEGORIES, 0);
    let table = SamplingTable::build(&emb).unwrap();
    let ids: Vec<&str> = (0..table.len())
        .filter(|&m| table.peer_count(m) > 0)
        .map(|m| table.pair_id(m))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut i = 0;
    c.bench_function("sample_negatives", |b| {
        b.iter_batched(
            || {
                i = (i + 1) % ids.len();
                ids[i]
            },
            |id| table.sample_negatives(id, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, build, sample);
criterion_main!(benches);
