#![allow(dead_code)]

use debias_core::dataset::{
    compute_popularity, GroupAssignment, PopularityConfig, PopularityTable, Sample, SampleSet,
};
use debias_core::recmodel::{EmbeddingInit, ModelState, TrainConfig};
use debias_core::synth::{generate, write_synth, SynthConfig, SynthFiles};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Small strongly convex problem: Gaussian embeddings, `reg` on the adapter.
pub struct ConvexFixture {
    pub train: SampleSet,
    pub eval: SampleSet,
    pub item_count: usize,
    pub pop: PopularityTable,
    pub groups: GroupAssignment,
    pub cfg: TrainConfig,
}

/// Users prefer one of four item clusters; half of the targets follow a
/// Zipf(1.2) popularity law instead.
pub fn convex_fixture(n_train: usize, n_eval: usize, items: usize, d: usize, reg: f64, seed: u64) -> ConvexFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = 40;
    let weights: Vec<f64> = (0..items).map(|i| ((i + 1) as f64).powf(-1.2)).collect();
    let zipf = WeightedIndex::new(&weights).unwrap();
    let clusters = 4;
    let draw = |rng: &mut ChaCha8Rng, user: usize, pop_rate: f64| {
        if rng.gen::<f64>() < pop_rate {
            zipf.sample(rng)
        } else {
            let c = user % clusters;
            let members: Vec<usize> = (c..items).step_by(clusters).collect();
            members[rng.gen_range(0..members.len())]
        }
    };
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let v: Vec<Sample> = (0..n)
            .map(|k| {
                let user = rng.gen_range(0..users);
                let len = rng.gen_range(1..=4);
                let history = (0..len).map(|_| draw(rng, user, 0.3)).collect();
                let target = draw(rng, user, 0.5);
                Sample { sample_id: 0, user, history, target, timestamp: k as i64 }
            })
            .collect();
        SampleSet::new(v)
    };
    let train = make(&mut rng, n_train);
    let eval = make(&mut rng, n_eval);
    let pop = compute_popularity(&train, items, &PopularityConfig::default()).unwrap();
    let mut groups = GroupAssignment::unknown(users);
    for u in 0..users {
        groups.group_of[u] = if u % 2 == 0 {
            debias_core::dataset::Group::G0
        } else {
            debias_core::dataset::Group::G1
        };
    }
    let cfg = TrainConfig {
        d,
        reg,
        emb_scale: 1.0,
        epochs: 200_000,
        learning_rate: 2.0,
        seed,
        grad_tol: 1e-10,
        emb_init: EmbeddingInit::Gaussian,
    };
    ConvexFixture { train, eval, item_count: items, pop, groups, cfg }
}

/// Random model with a perturbed adapter, for derivative checks.
pub fn random_model(rng: &mut ChaCha8Rng, items: usize, d: usize, reg: f64) -> ModelState {
    let m = ModelState::init(items, d, reg, 1.0, rng.gen()).unwrap();
    let adapter = m.adapter.iter().map(|a| a + rng.gen_range(-0.5..0.5)).collect();
    m.with_adapter(adapter).unwrap()
}

pub fn random_samples(rng: &mut ChaCha8Rng, n: usize, items: usize, users: usize) -> SampleSet {
    let v = (0..n)
        .map(|k| {
            let len = rng.gen_range(1..=4);
            Sample {
                sample_id: 0,
                user: k % users,
                history: (0..len).map(|_| rng.gen_range(0..items)).collect(),
                target: rng.gen_range(0..items),
                timestamp: k as i64,
            }
        })
        .collect();
    SampleSet::new(v)
}

/// Writes a synthetic dataset under `dir`.
pub fn synth_files(dir: &Path, cfg: &SynthConfig) -> SynthFiles {
    write_synth(&generate(cfg).unwrap(), dir).unwrap()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    dist(a, b) / norm(a).max(norm(b)).max(floor)
}
