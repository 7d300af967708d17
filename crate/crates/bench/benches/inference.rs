use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dbnplan_bench::{domain, network, DOMAINS};
use dbnplan_core::bp::{dbn_marginals, BpConfig};
use dbnplan_core::csvi::{estimate_log_g, CsviConfig, TrajectorySampler};
use dbnplan_core::forward::build_forward_graph;
use dbnplan_core::mfvi::{MeanField, SweepOrder, UpdateMask, VariationalPosterior};
use dbnplan_core::{EvidenceMode, PolicyParams};

fn inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("inference");
    for name in DOMAINS {
        let mdp = domain(name);
        let dbn = network(&mdp, 9, EvidenceMode::Terminal);
        let theta = PolicyParams::uniform(&mdp.action_cards(), 9);

        g.bench_function(BenchmarkId::new("bp-marginals", name), |b| {
            b.iter(|| dbn_marginals(&dbn, &BpConfig::default()).unwrap())
        });

        let graph = build_forward_graph(&dbn);
        g.bench_function(BenchmarkId::new("forward-gradient", name), |b| b.iter(|| graph.value_and_gradient(&theta)));

        let mf = MeanField::new(&dbn);
        g.bench_function(BenchmarkId::new("mfvi-sweep", name), |b| {
            b.iter(|| {
                let mut q = VariationalPosterior::init(&dbn);
                mf.run_sweeps(&mut q, &UpdateMask::all(), 1, 0.0, SweepOrder::TimeMajor, 0, &mut Vec::new())
            })
        });

        let sampler = TrajectorySampler::new(&dbn);
        let cfg = CsviConfig::default();
        g.bench_function(BenchmarkId::new("collapsed-estimate", name), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            b.iter(|| estimate_log_g(&sampler, &theta, None, &cfg, &mut rng))
        });
    }
    g.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
