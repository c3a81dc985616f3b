mod common;

use common::*;
use debias_core::dataset::{
    compute_popularity, sample_candidates, temporal_split, Group, GroupAssignment, InteractionLog, PopularityConfig,
    SplitConfig,
};
use debias_core::fairness::{evaluate_bias, evaluate_model, BiasKind, BiasSpec, EvalConfig};
use debias_core::influence::CgConfig;
use debias_core::maskopt::{select_unlearn_set, Lambdas, MaskState};
use debias_core::pipeline::decile_report;
use debias_core::recmodel::{exact_hessian, hvp, item_distribution, rank_top_k, ModelState};
use debias_core::unlearn::{apply_update, compute_delta};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(seed: u64, items: usize, d: usize) -> (ModelState, debias_core::dataset::SampleSet, GroupAssignment) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng, items, d, 0.05);
    let set = random_samples(&mut rng, 24, items, 6);
    let mut groups = GroupAssignment::unknown(6);
    for u in 0..6 {
        groups.group_of[u] = if u % 2 == 0 { Group::G0 } else { Group::G1 };
    }
    (model, set, groups)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probabilities_form_a_distribution(seed in any::<u64>(), items in 2usize..40, d in 2usize..6) {
        let (model, set, _) = fixture(seed, items, d);
        for s in &set {
            let (dist, probs) = item_distribution(&model, s).unwrap();
            prop_assert!(dist.iter().all(|x| *x >= 0.0));
            prop_assert!(probs.iter().all(|p| *p >= 0.0 && *p <= 1.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_functionals_respect_their_ranges(seed in any::<u64>(), items in 2usize..40, alpha in 0.0f64..=1.0) {
        let (model, set, groups) = fixture(seed, items, 3);
        let pop = compute_popularity(&set, items, &PopularityConfig::default()).unwrap();
        let spec = |kind| BiasSpec { kind, eval_set: &set, groups: Some(&groups), pop: Some(&pop) };
        let b_pop = evaluate_bias(&model, &spec(BiasKind::Popularity)).unwrap().value;
        let b_attr = evaluate_bias(&model, &spec(BiasKind::Attribute)).unwrap().value;
        let b_mix = evaluate_bias(&model, &spec(BiasKind::Combined { alpha })).unwrap().value;
        let lo = pop.v_pop.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pop.v_pop.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(b_pop >= lo - 1e-12 && b_pop <= hi + 1e-12);
        prop_assert!(b_attr >= 0.0);
        prop_assert!((b_mix - (alpha * b_pop + (1.0 - alpha) * b_attr)).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_range(seed in any::<u64>(), items in 6usize..40) {
        let (model, set, groups) = fixture(seed, items, 3);
        let pop = compute_popularity(&set, items, &PopularityConfig::default()).unwrap();
        let cfg = EvalConfig { ks: vec![1, 3, 5], ..Default::default() };
        let r = evaluate_model(&model, &set, &pop, Some(&groups), &cfg).unwrap();
        for row in &r.rows {
            for v in [row.hr, row.ndcg, row.apt, row.hd.unwrap(), row.dp.unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(row.arp >= 0.0);
            prop_assert!(row.ndcg <= row.hr);
        }
    }

    #[test]
    fn ranking_matches_full_sort(seed in any::<u64>(), items in 2usize..100, k in 1usize..20, exclude in any::<bool>()) {
        let (model, set, _) = fixture(seed, items, 4);
        for s in set.iter().take(4) {
            let (dist, _) = item_distribution(&model, s).unwrap();
            let mut all: Vec<usize> = (0..items).filter(|i| !(exclude && s.history.contains(i))).collect();
            all.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
            all.truncate(k);
            prop_assert_eq!(rank_top_k(&model, s, k, exclude).unwrap(), all);
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_hvp_columns(seed in any::<u64>(), items in 2usize..12, d in 2usize..4) {
        let (model, set, _) = fixture(seed, items, d);
        let h = exact_hessian(&model, &set).unwrap();
        prop_assert!((&h - h.transpose()).amax() < 1e-10);
        for j in 0..model.dim() {
            let mut e = vec![0.0; model.dim()];
            e[j] = 1.0;
            let col = hvp(&model, &set, &e).unwrap();
            for i in 0..model.dim() {
                prop_assert!((col.0[i] - h[(i, j)]).abs() < 1e-8 * (1.0 + h[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn candidates_are_unique_sized_and_reproducible(n in 1usize..500, ratio in 0.001f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_samples(&mut rng, n, 5, 3);
        let c = sample_candidates(&set, ratio, seed).unwrap();
        let want = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(c.len(), want);
        prop_assert!(c.sample_ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.sample_ids.iter().all(|&i| i < n));
        prop_assert_eq!(c, sample_candidates(&set, ratio, seed).unwrap());
    }

    #[test]
    fn selection_is_the_positive_logit_filter(logits in proptest::collection::vec(-3.0f64..3.0, 0..40)) {
        let ids: Vec<usize> = (0..logits.len()).map(|i| 3 * i + 1).collect();
        let mut mask = MaskState::new(ids.clone(), 0.0, Lambdas { fair: 1.0, acc: 0.0, spa: 0.0 });
        mask.logits = logits.clone();
        let want: Vec<usize> = ids.iter().zip(&logits).filter(|(_, &w)| w > 0.0).map(|(&i, _)| i).collect();
        prop_assert_eq!(select_unlearn_set(&mask), want);
    }

    #[test]
    fn split_respects_temporal_order(seed in any::<u64>(), users in 2usize..12, events in 10usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<(String, String, i64)> = (0..users * events)
            .map(|k| (format!("u{}", rng.gen_range(0..users)), format!("i{}", rng.gen_range(0..15)), k as i64))
            .collect();
        let log = InteractionLog::from_triples(rows).unwrap();
        let split = temporal_split(&log, &SplitConfig::default()).unwrap();
        let max = |s: &debias_core::dataset::SampleSet| s.max_timestamp();
        let min = |s: &debias_core::dataset::SampleSet| s.min_timestamp();
        if let (Some(a), Some(b)) = (max(&split.train), min(&split.valid)) {
            prop_assert!(a <= b);
        }
        if let (Some(a), Some(b)) = (max(&split.valid), min(&split.test)) {
            prop_assert!(a <= b);
        }
        if let (Some(a), Some(b)) = (max(&split.train), min(&split.test)) {
            prop_assert!(a <= b);
        }
        let total = split.train.len() + split.valid.len() + split.test.len();
        prop_assert!(total <= log.events.len());
        for s in split.train.iter().chain(&split.valid).chain(&split.test) {
            prop_assert!(!s.history.is_empty() && s.history.len() <= 10);
        }
    }

    #[test]
    fn update_equals_fresh_model_with_summed_adapter(seed in any::<u64>(), items in 2usize..20) {
        let (model, set, _) = fixture(seed, items, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let delta: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let updated = apply_update(&model, &delta).unwrap();
        let adapter: Vec<f64> = model.adapter.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let fresh = ModelState::new(model.d, items, model.reg, model.seed, std::sync::Arc::new((*model.item_emb).clone()), adapter).unwrap();
        for s in &set {
            prop_assert_eq!(item_distribution(&updated, s).unwrap(), item_distribution(&fresh, s).unwrap());
        }
    }

    #[test]
    fn deciles_partition_exposure(seed in any::<u64>(), items in 10usize..60, k in 1usize..6) {
        let (model, set, _) = fixture(seed, items, 3);
        let pop = compute_popularity(&set, items, &PopularityConfig::default()).unwrap();
        let rows = decile_report(&model, &set, &pop, k, false).unwrap();
        prop_assert_eq!(rows.len(), 10);
        prop_assert_eq!(rows.iter().map(|r| r.item_count).sum::<usize>(), items);
        prop_assert!((rows.iter().map(|r| r.rec_share).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((rows.iter().map(|r| r.target_share).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn delta_is_additive_over_disjoint_sets(seed in any::<u64>(), items in 3usize..15) {
        let (model, set, _) = fixture(seed, items, 3);
        let cfg = CgConfig { damping: 0.01, tol: 1e-13, max_iter: 500 };
        let a = [0usize, 3, 7];
        let b = [1usize, 10, 20];
        let both = [0usize, 1, 3, 7, 10, 20];
        let da = compute_delta(&model, &set, &a, &cfg).unwrap().delta;
        let db = compute_delta(&model, &set, &b, &cfg).unwrap().delta;
        let dab = compute_delta(&model, &set, &both, &cfg).unwrap().delta;
        let sum: Vec<f64> = da.0.iter().zip(&db.0).map(|(x, y)| x + y).collect();
        prop_assert!(rel_err(&dab.0, &sum, 1e-12) < 1e-8);
    }
}
