//! Same workloads on a one-thread pool and on the default pool. Built
//! without the `parallel` feature only the sequential path exists, so the
//! "pool" rows are skipped.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use intra_core::dataset::rng_for;
use intra_core::encoders::{EncoderConfig, FeatureGrid, ImageEncoder, ToyImageEncoder, ToyTextEncoder, TextEncoder};
use intra_core::head::{AffordanceHead, HeadConfig};
use intra_core::imaging::{GrayMap, RgbImage};
use intra_core::losses::{LossConfig, Projector, ProjectorConfig};
use intra_core::metrics::{evaluate_dataset, EvalPair};
use intra_core::params::ParamStore;
use intra_core::relmap::{Provenance, RelationshipMap};
use intra_core::trainer::{loss_and_grads, TrainConfig, ViewInput};

fn eval_pairs(n: usize) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|k| {
            let mut map = |w: usize| GrayMap::new(w, w, (0..w * w).map(|_| rng.random::<f64>()).collect()).unwrap();
            EvalPair {
                id: format!("img{k}"),
                interaction: "hold".into(),
                object: "cup".into(),
                gt: map(64),
                pred: map(24),
            }
        })
        .collect()
}

struct StepFixture {
    head: AffordanceHead,
    projector: Projector,
    store: ParamStore,
    views: Vec<ViewInput>,
    labels: Vec<usize>,
    objects: Vec<usize>,
    relmap: RelationshipMap,
}

fn step_fixture(n_views: usize) -> StepFixture {
    let cfg = TrainConfig::default();
    let enc: &EncoderConfig = &cfg.encoder;
    let image_enc = ToyImageEncoder::new(enc.seed, enc.patch, enc.dim);
    let text_enc = ToyTextEncoder::new(enc.seed, enc.text_dim);
    let mut rng = rng_for(3, "bench");
    let mut store = ParamStore::new();
    let head_cfg: HeadConfig = cfg.head_config();
    let proj_cfg: ProjectorConfig = cfg.projector_config();
    let head = AffordanceHead::init(head_cfg, &mut store, &mut rng).unwrap();
    let projector = Projector::init(proj_cfg, &mut store, &mut rng).unwrap();
    let labels: Vec<String> = ["grip", "tap", "lift", "push"].map(String::from).to_vec();
    let views = (0..n_views)
        .map(|i| {
            let mut img = RgbImage::new(84, 84);
            for y in 0..84 {
                for x in 0..84 {
                    img.put(x, y, [rng.random(), rng.random(), rng.random()]);
                }
            }
            let grid: FeatureGrid = image_enc.encode(&img).unwrap();
            ViewInput {
                grid,
                class_token: text_enc.encode(&labels[(i / 2) % 4]).unwrap().class_token,
            }
        })
        .collect();
    StepFixture {
        head,
        projector,
        store,
        views,
        labels: (0..n_views).map(|i| (i / 2) % 4).collect(),
        objects: (0..n_views).map(|i| (i / 2) % 3).collect(),
        relmap: RelationshipMap::identity(labels, Provenance::Manual),
    }
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", one), ("parallel", all)]
}

fn bench(c: &mut Criterion) {
    let pairs = eval_pairs(64);
    let step = step_fixture(16);
    let loss_cfg = LossConfig::default();
    let run_eval = || evaluate_dataset(&pairs).unwrap();
    let run_step = || {
        loss_and_grads(
            &step.head,
            &step.projector,
            &step.store,
            &step.views,
            &step.labels,
            &step.objects,
            &step.relmap,
            &loss_cfg,
        )
        .unwrap()
    };

    let mut g = c.benchmark_group("evaluate_dataset_64");
    #[cfg(feature = "parallel")]
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(run_eval)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(run_eval));
    g.finish();

    let mut g = c.benchmark_group("train_step_16_views");
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(run_step)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(run_step));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
