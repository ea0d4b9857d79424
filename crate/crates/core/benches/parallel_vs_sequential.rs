use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng as _;

use cmlm::autodiff::{finite_diff_check, Tensor, DEFAULT_STEP};
use cmlm::encoder::{EncoderConfig, EncoderParams};
use cmlm::masking::make_crm_batch;
use cmlm::par::Execution;
use cmlm::rng::{derive, seeded};
use cmlm::text::{TokenId, TokenSequence, NUM_SPECIAL};

const V: usize = 200;
const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sequences(n: usize, len: usize) -> Vec<TokenSequence> {
    let mut rng = seeded(1);
    (0..n)
        .map(|_| {
            let ids: Vec<TokenId> = (0..len - 1).map(|_| rng.gen_range(NUM_SPECIAL..V) as TokenId).collect();
            TokenSequence::from_segments(&ids, None, len).unwrap()
        })
        .collect()
}

fn masking_monte_carlo(c: &mut Criterion) {
    let seqs = sequences(2000, 64);
    let mut g = c.benchmark_group("masking_monte_carlo");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let selected: usize = exec
                    .map_range(seqs.len(), |i| {
                        let batch = make_crm_batch(&seqs[i], 1, 0.15, 0.7, V, &mut derive(7, &[i as u64])).unwrap();
                        batch.views[0].pattern.num_selected()
                    })
                    .into_iter()
                    .sum();
                selected
            })
        });
    }
    g.finish();
}

fn batch_prediction(c: &mut Criterion) {
    let cfg = EncoderConfig {
        max_len: 32,
        ..EncoderConfig::desk(V)
    };
    let mut params = EncoderParams::<f32>::init(&cfg, &mut seeded(2)).unwrap();
    params.set_classifier(2, &mut seeded(3)).unwrap();
    let batch: Vec<Vec<TokenId>> = sequences(64, 32).iter().map(|s| s.ids().to_vec()).collect();
    let mut g = c.benchmark_group("batch_prediction");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| params.predict(&batch, exec).unwrap()));
    }
    g.finish();
}

fn grad_check(c: &mut Criterion) {
    let mut rng = seeded(4);
    let params = vec![
        Tensor::<f64>::randn(&[16, 16], 1.0, &mut rng),
        Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng),
    ];
    let mut g = c.benchmark_group("grad_check");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                finite_diff_check(
                    |t, v| {
                        let h = t.matmul(v[0], v[1])?;
                        let h = t.gelu(h);
                        let s = t.softmax(h)?;
                        let l = t.log(s)?;
                        Ok(t.sum(l))
                    },
                    &params,
                    DEFAULT_STEP,
                    exec,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, masking_monte_carlo, batch_prediction, grad_check);
criterion_main!(benches);
