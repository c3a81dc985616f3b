//! Differentiable bias functionals and the evaluation metric suite.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Group, GroupAssignment, PopularityTable, SampleSet};
use crate::error::{Error, Result};
use crate::par;
use crate::recmodel::{rank_by_distance, ModelState, ParamVector};

/// Which bias functional to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasKind {
    /// Mean expected popularity of the recommendation distribution.
    Popularity,
    /// Absolute gap in mean target probability between user groups.
    Attribute,
    /// `alpha * popularity + (1 - alpha) * attribute`
    Combined { alpha: f64 },
}

impl BiasKind {
    pub fn needs_groups(&self) -> bool {
        !matches!(self, BiasKind::Popularity)
    }

    pub fn needs_popularity(&self) -> bool {
        !matches!(self, BiasKind::Attribute)
    }

    pub fn describe(&self) -> String {
        match self {
            BiasKind::Popularity => "popularity".into(),
            BiasKind::Attribute => "attribute".into(),
            BiasKind::Combined { alpha } => format!("combined(alpha={alpha:?})"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiasSpec<'a> {
    pub kind: BiasKind,
    pub eval_set: &'a SampleSet,
    pub groups: Option<&'a GroupAssignment>,
    pub pop: Option<&'a PopularityTable>,
}

impl BiasSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.eval_set.is_empty() {
            return Err(Error::EmptyInput("bias evaluation set is empty".into()));
        }
        if let BiasKind::Combined { alpha } = self.kind {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
            }
        }
        if self.kind.needs_groups() && self.groups.is_none() {
            return Err(Error::InvalidArgument(
                "attribute bias needs a group assignment".into(),
            ));
        }
        if self.kind.needs_popularity() && self.pop.is_none() {
            return Err(Error::InvalidArgument(
                "popularity bias needs a popularity table".into(),
            ));
        }
        Ok(())
    }

    /// Stable text identifying the functional and its inputs.
    pub fn describe(&self) -> String {
        let mut s = format!("{};eval={}", self.kind.describe(), self.eval_set.len());
        if let Some(pop) = self.pop {
            let _ = write!(s, ";vpop={:?}", pop.v_pop);
        }
        if let Some(g) = self.groups {
            let _ = write!(s, ";groups={:?}", g.group_of);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasValue {
    pub value: f64,
    pub grad: ParamVector,
}

fn popularity_bias(model: &ModelState, set: &SampleSet, pop: &PopularityTable) -> Result<BiasValue> {
    if pop.item_count() != model.item_count {
        return Err(Error::InvalidArgument("popularity table size mismatch".into()));
    }
    let d = model.d;
    let (sum, gsum) = par::ordered_scalar_vec_sum(&set.samples, model.dim(), |s, acc| {
        let fwd = model.forward(&s.history);
        let b: f64 = fwd.probs.iter().zip(&pop.v_pop).map(|(p, v)| p * v).sum();
        // dB/dq = 2 sum_i p_i (v_i - B) e_i
        let mut gq = vec![0.0; d];
        for (i, &p) in fwd.probs.iter().enumerate() {
            let c = 2.0 * p * (pop.v_pop[i] - b);
            for (g, e) in gq.iter_mut().zip(model.emb(i)) {
                *g += c * e;
            }
        }
        model.add_outer(acc, &gq, &fwd.u, 1.0);
        b
    });
    let n = set.len() as f64;
    Ok(BiasValue {
        value: sum / n,
        grad: ParamVector(gsum).scaled(1.0 / n),
    })
}

/// Mean target probability over the samples of one group, with gradient.
fn group_target_prob(model: &ModelState, set: &SampleSet, groups: &GroupAssignment, g: Group) -> Result<(f64, ParamVector)> {
    let members: Vec<_> = set.iter().filter(|s| groups.group(s.user) == g).cloned().collect();
    if members.is_empty() {
        return Err(Error::GroupEmpty(format!("{g:?}")));
    }
    let d = model.d;
    let (sum, gsum) = par::ordered_scalar_vec_sum(&members, model.dim(), |s, acc| {
        let fwd = model.forward(&s.history);
        let pt = fwd.probs[s.target];
        // dp_t/dq = 2 p_t (e_t - E_p[e])
        let gq: Vec<f64> = (0..d)
            .map(|a| 2.0 * pt * (model.emb(s.target)[a] - fwd.mean_emb[a]))
            .collect();
        model.add_outer(acc, &gq, &fwd.u, 1.0);
        pt
    });
    let n = members.len() as f64;
    Ok((sum / n, ParamVector(gsum).scaled(1.0 / n)))
}

fn attribute_bias(model: &ModelState, set: &SampleSet, groups: &GroupAssignment) -> Result<BiasValue> {
    let (p0, g0) = group_target_prob(model, set, groups, Group::G0)?;
    let (p1, g1) = group_target_prob(model, set, groups, Group::G1)?;
    let diff = p0 - p1;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let mut grad = g0.scaled(sign);
    grad.add_scaled(-sign, &g1);
    Ok(BiasValue {
        value: diff.abs(),
        grad,
    })
}

/// Evaluates `B(theta)` and its gradient with respect to the adapter.
pub fn evaluate_bias(model: &ModelState, spec: &BiasSpec<'_>) -> Result<BiasValue> {
    spec.validate()?;
    let out = match spec.kind {
        BiasKind::Popularity => popularity_bias(model, spec.eval_set, spec.pop.unwrap())?,
        BiasKind::Attribute => attribute_bias(model, spec.eval_set, spec.groups.unwrap())?,
        BiasKind::Combined { alpha } => {
            let pop = popularity_bias(model, spec.eval_set, spec.pop.unwrap())?;
            let attr = attribute_bias(model, spec.eval_set, spec.groups.unwrap())?;
            let mut grad = pop.grad.scaled(alpha);
            grad.add_scaled(1.0 - alpha, &attr.grad);
            BiasValue {
                value: alpha * pop.value + (1.0 - alpha) * attr.value,
                grad,
            }
        }
    };
    if !out.value.is_finite() || !out.grad.is_finite() {
        return Err(Error::NumericalFailure("non-finite bias value".into()));
    }
    Ok(out)
}

/// `2 tau hr fair / (tau hr + fair)`, zero when the denominator vanishes.
pub fn f_score(hr: f64, fair: f64, tau: f64) -> Result<f64> {
    if hr < 0.0 || fair < 0.0 || tau < 0.0 || hr.is_nan() || fair.is_nan() || tau.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "f-score inputs must be non-negative (hr={hr}, fair={fair}, tau={tau})"
        )));
    }
    let denom = tau * hr + fair;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tau * hr * fair / denom)
}

/// Fairness component used in `F_pop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopFair {
    #[default]
    Apt,
    Arp,
}

/// Fairness component used in `F_attr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrFair {
    #[default]
    OneMinusDp,
    OneMinusHd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub tau: f64,
    pub exclude_history: bool,
    pub pop_fair: PopFair,
    pub attr_fair: AttrFair,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10, 20],
            tau: 5.0,
            exclude_history: false,
            pop_fair: PopFair::Apt,
            attr_fair: AttrFair::OneMinusDp,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "K list {:?} must be non-empty, positive and strictly ascending",
                self.ks
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub arp: f64,
    pub apt: f64,
    /// Absent when the evaluation has no two-group assignment.
    pub hd: Option<f64>,
    pub dp: Option<f64>,
    pub f_pop: f64,
    pub f_attr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub tau: f64,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

/// Top-`k` lists for every sample, in sample order.
pub fn rankings(model: &ModelState, set: &SampleSet, k: usize, exclude_history: bool) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    for s in set {
        if s.history.is_empty() || s.target >= model.item_count {
            return Err(Error::InvalidArgument(format!("invalid sample {}", s.sample_id)));
        }
    }
    Ok(par::ordered_map(&set.samples, |s| {
        let fwd = model.forward(&s.history);
        rank_by_distance(&fwd.dist, &s.history, k, exclude_history)
    }))
}

/// HR@K and NDCG@K from precomputed rankings.
pub fn accuracy_from_rankings(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> (f64, f64) {
    if rankings.is_empty() {
        return (0.0, 0.0);
    }
    let (mut hits, mut gain) = (0.0, 0.0);
    for (list, &t) in rankings.iter().zip(targets) {
        if let Some(pos) = list.iter().take(k).position(|&i| i == t) {
            hits += 1.0;
            gain += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let n = rankings.len() as f64;
    (hits / n, gain / n)
}

/// ARP@K and APT@K from precomputed rankings.
pub fn popularity_from_rankings(rankings: &[Vec<usize>], pop: &PopularityTable, k: usize) -> (f64, f64) {
    if rankings.is_empty() {
        return (0.0, 0.0);
    }
    let (mut arp, mut apt) = (0.0, 0.0);
    for list in rankings {
        let top = &list[..k.min(list.len())];
        if top.is_empty() {
            continue;
        }
        arp += top.iter().map(|&i| pop.v_pop[i]).sum::<f64>() / top.len() as f64;
        apt += top.iter().filter(|&&i| pop.is_tail(i)).count() as f64 / k as f64;
    }
    let n = rankings.len() as f64;
    (arp / n, apt / n)
}

/// HD@K and DP@K from precomputed rankings; `group_of_sample[j]` is the
/// group of sample `j`'s user.
pub fn attribute_from_rankings(
    rankings: &[Vec<usize>],
    targets: &[usize],
    group_of_sample: &[Group],
    item_count: usize,
    k: usize,
) -> Result<(f64, f64)> {
    let mut hits = [0.0f64; 2];
    let mut counts = [0usize; 2];
    let mut freq = [vec![0.0f64; item_count], vec![0.0f64; item_count]];
    for ((list, &t), g) in rankings.iter().zip(targets).zip(group_of_sample) {
        let gi = match g {
            Group::G0 => 0,
            Group::G1 => 1,
            Group::Unknown => continue,
        };
        counts[gi] += 1;
        let top = &list[..k.min(list.len())];
        if top.contains(&t) {
            hits[gi] += 1.0;
        }
        for &i in top {
            freq[gi][i] += 1.0;
        }
    }
    for (gi, name) in [(0, "G0"), (1, "G1")] {
        if counts[gi] == 0 {
            return Err(Error::GroupEmpty(name.into()));
        }
    }
    let hd = (hits[0] / counts[0] as f64 - hits[1] / counts[1] as f64).abs();
    let norm = [(k * counts[0]) as f64, (k * counts[1]) as f64];
    let dp = 0.5
        * freq[0]
            .iter()
            .zip(&freq[1])
            .map(|(a, b)| (a / norm[0] - b / norm[1]).abs())
            .sum::<f64>();
    Ok((hd, dp))
}

fn check_nonempty(test: &SampleSet) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    Ok(())
}

fn max_k(ks: &[usize]) -> Result<usize> {
    ks.iter()
        .copied()
        .max()
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidArgument("K list must be non-empty and positive".into()))
}

pub fn eval_accuracy(model: &ModelState, test: &SampleSet, ks: &[usize], exclude_history: bool) -> Result<Vec<(f64, f64)>> {
    check_nonempty(test)?;
    let ranks = rankings(model, test, max_k(ks)?, exclude_history)?;
    let targets: Vec<usize> = test.iter().map(|s| s.target).collect();
    Ok(ks.iter().map(|&k| accuracy_from_rankings(&ranks, &targets, k)).collect())
}

pub fn eval_popularity_fairness(
    model: &ModelState,
    test: &SampleSet,
    pop: &PopularityTable,
    ks: &[usize],
    exclude_history: bool,
) -> Result<Vec<(f64, f64)>> {
    check_nonempty(test)?;
    let ranks = rankings(model, test, max_k(ks)?, exclude_history)?;
    Ok(ks.iter().map(|&k| popularity_from_rankings(&ranks, pop, k)).collect())
}

pub fn eval_attribute_fairness(
    model: &ModelState,
    test: &SampleSet,
    groups: &GroupAssignment,
    ks: &[usize],
    exclude_history: bool,
) -> Result<Vec<(f64, f64)>> {
    check_nonempty(test)?;
    let ranks = rankings(model, test, max_k(ks)?, exclude_history)?;
    let targets: Vec<usize> = test.iter().map(|s| s.target).collect();
    let gs: Vec<Group> = test.iter().map(|s| groups.group(s.user)).collect();
    ks.iter()
        .map(|&k| attribute_from_rankings(&ranks, &targets, &gs, model.item_count, k))
        .collect()
}

/// Full metric suite. HD/DP (and `F_attr`) are reported only when `groups`
/// is given and both groups appear in `test`.
pub fn evaluate_model(
    model: &ModelState,
    test: &SampleSet,
    pop: &PopularityTable,
    groups: Option<&GroupAssignment>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_nonempty(test)?;
    let ranks = rankings(model, test, max_k(&cfg.ks)?, cfg.exclude_history)?;
    let targets: Vec<usize> = test.iter().map(|s| s.target).collect();
    let gs: Option<Vec<Group>> = groups.map(|g| test.iter().map(|s| g.group(s.user)).collect());
    let both = gs.as_ref().is_some_and(|v| v.contains(&Group::G0) && v.contains(&Group::G1));
    let mut rows = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        let (hr, ndcg) = accuracy_from_rankings(&ranks, &targets, k);
        let (arp, apt) = popularity_from_rankings(&ranks, pop, k);
        let (hd, dp) = match (&gs, both) {
            (Some(g), true) => {
                let (hd, dp) = attribute_from_rankings(&ranks, &targets, g, model.item_count, k)?;
                (Some(hd), Some(dp))
            }
            _ => (None, None),
        };
        let pop_fair = match cfg.pop_fair {
            PopFair::Apt => apt,
            PopFair::Arp => arp,
        };
        let f_pop = f_score(hr, pop_fair, cfg.tau)?;
        let f_attr = match (cfg.attr_fair, hd, dp) {
            (AttrFair::OneMinusDp, _, Some(dp)) => Some(f_score(hr, (1.0 - dp).max(0.0), cfg.tau)?),
            (AttrFair::OneMinusHd, Some(hd), _) => Some(f_score(hr, (1.0 - hd).max(0.0), cfg.tau)?),
            _ => None,
        };
        rows.push(MetricRow {
            k,
            hr,
            ndcg,
            arp,
            apt,
            hd,
            dp,
            f_pop,
            f_attr,
        });
    }
    Ok(EvalReport { rows, tau: cfg.tau })
}

pub const METRICS_HEADER: &str = "stage,K,hr,ndcg,arp,apt,hd,dp,f_pop,f_attr";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metrics.csv` rows for the given `(stage, report)` pairs.
pub fn metrics_csv(reports: &[(&str, &EvalReport)]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (stage, report) in reports {
        for r in &report.rows {
            let _ = writeln!(
                out,
                "{stage},{},{},{},{},{},{},{},{},{}",
                r.k,
                r.hr,
                r.ndcg,
                r.arp,
                r.apt,
                opt(r.hd),
                opt(r.dp),
                r.f_pop,
                opt(r.f_attr)
            );
        }
    }
    out
}

pub fn write_metrics_csv(path: &Path, reports: &[(&str, &EvalReport)]) -> Result<()> {
    fs::write(path, metrics_csv(reports)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_popularity, PopularityConfig, Sample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn s(user: usize, history: Vec<usize>, target: usize) -> Sample {
        Sample { sample_id: 0, user, history, target, timestamp: 0 }
    }

    fn table(v_pop: Vec<f64>, head: &[usize]) -> PopularityTable {
        let n = v_pop.len();
        let is_head: Vec<bool> = (0..n).map(|i| head.contains(&i)).collect();
        PopularityTable {
            count: vec![0; n],
            v_pop,
            head_set: head.to_vec(),
            tail_set: (0..n).filter(|i| !head.contains(i)).collect(),
            is_head,
            rank_order: (0..n).collect(),
        }
    }

    #[test]
    fn f_score_reference_values() {
        assert!((f_score(0.2, 1.0, 5.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(f_score(0.0, 0.0, 5.0).unwrap(), 0.0);
        assert!(f_score(-0.1, 0.5, 5.0).is_err());
        assert!((f_score(0.0336, 0.2476, 5.0).unwrap() - 0.2002).abs() < 5e-4);
        assert!((f_score(0.0336, 1.0 - 0.0974, 5.0).unwrap() - 0.2833).abs() < 5e-4);
    }

    #[test]
    fn constant_popularity_gives_constant_bias() {
        let m = ModelState::init(6, 3, 0.0, 1.0, 2).unwrap();
        let set = SampleSet::new(vec![s(0, vec![1, 2], 3), s(1, vec![4], 0)]);
        let pop = table(vec![1.7; 6], &[0, 1]);
        let spec = BiasSpec { kind: BiasKind::Popularity, eval_set: &set, groups: None, pop: Some(&pop) };
        let b = evaluate_bias(&m, &spec).unwrap();
        assert!((b.value - 1.7).abs() < 1e-12);
        assert!(b.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn symmetric_groups_have_zero_attribute_bias() {
        let m = ModelState::init(5, 3, 0.0, 1.0, 2).unwrap();
        let set = SampleSet::new(vec![s(0, vec![1, 2], 3), s(1, vec![1, 2], 3), s(2, vec![4], 0), s(3, vec![4], 0)]);
        let groups = GroupAssignment { group_of: vec![Group::G0, Group::G1, Group::G0, Group::G1] };
        let spec = BiasSpec { kind: BiasKind::Attribute, eval_set: &set, groups: Some(&groups), pop: None };
        let b = evaluate_bias(&m, &spec).unwrap();
        assert_eq!(b.value, 0.0);
        assert!(b.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_group_is_an_error() {
        let m = ModelState::init(5, 3, 0.0, 1.0, 2).unwrap();
        let set = SampleSet::new(vec![s(0, vec![1], 3)]);
        let groups = GroupAssignment { group_of: vec![Group::G0] };
        let spec = BiasSpec { kind: BiasKind::Attribute, eval_set: &set, groups: Some(&groups), pop: None };
        assert!(matches!(evaluate_bias(&m, &spec), Err(Error::GroupEmpty(_))));
    }

    #[test]
    fn popularity_bias_is_within_value_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = ModelState::init(20, 4, 0.0, 2.0, 1).unwrap();
        let set = SampleSet::new((0..10).map(|u| s(u, vec![rng.gen_range(0..20)], rng.gen_range(0..20))).collect());
        let v: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..5.0)).collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pop = table(v, &[0]);
        let spec = BiasSpec { kind: BiasKind::Popularity, eval_set: &set, groups: None, pop: Some(&pop) };
        let b = evaluate_bias(&m, &spec).unwrap().value;
        assert!(lo <= b && b <= hi);
    }

    #[test]
    fn bias_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..6 {
            let items = 12;
            let d = 3;
            let emb: Vec<f64> = (0..items * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let adapter: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = ModelState::new(d, items, 0.0, 0, Arc::new(emb), adapter).unwrap();
            let set = SampleSet::new(
                (0..8).map(|u| s(u, vec![rng.gen_range(0..items), rng.gen_range(0..items)], rng.gen_range(0..items))).collect(),
            );
            let groups = GroupAssignment { group_of: (0..8).map(|u| if u % 2 == 0 { Group::G0 } else { Group::G1 }).collect() };
            let pop = compute_popularity(&set, items, &PopularityConfig::default()).unwrap();
            let kind = match trial % 3 {
                0 => BiasKind::Popularity,
                1 => BiasKind::Attribute,
                _ => BiasKind::Combined { alpha: 0.3 },
            };
            let spec = BiasSpec { kind, eval_set: &set, groups: Some(&groups), pop: Some(&pop) };
            let b = evaluate_bias(&m, &spec).unwrap();
            let h = 1e-6;
            for j in 0..d * d {
                let mut ap = m.adapter.clone();
                ap[j] += h;
                let mut am = m.adapter.clone();
                am[j] -= h;
                let fp = evaluate_bias(&m.with_adapter(ap).unwrap(), &spec).unwrap().value;
                let fm = evaluate_bias(&m.with_adapter(am).unwrap(), &spec).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - b.grad[j]).abs() / b.grad[j].abs().max(1e-3);
                assert!(rel < 1e-4, "{kind:?} coordinate {j}: fd {fd} vs {}", b.grad[j]);
            }
        }
    }

    #[test]
    fn accuracy_hand_cases() {
        // Target first everywhere.
        let r = vec![vec![3, 1, 2], vec![0, 2, 1]];
        assert_eq!(accuracy_from_rankings(&r, &[3, 0], 2), (1.0, 1.0));
        // Target third of five.
        let r = vec![vec![4, 1, 7, 2, 0]];
        let (hr, ndcg) = accuracy_from_rankings(&r, &[7], 5);
        assert_eq!(hr, 1.0);
        assert!((ndcg - 0.5).abs() < 1e-15);
        // Five samples with target ranks 1, 2, miss, 4, miss at K=4.
        let r = vec![vec![0, 1, 2, 3], vec![1, 0, 2, 3], vec![1, 2, 3, 4], vec![1, 2, 3, 0], vec![9, 8, 7, 6]];
        let (hr, ndcg) = accuracy_from_rankings(&r, &[0, 0, 0, 0, 0], 4);
        assert!((hr - 0.6).abs() < 1e-15);
        let want = (1.0 + 1.0 / 3f64.log2() + 1.0 / 5f64.log2()) / 5.0;
        assert!((ndcg - want).abs() < 1e-15);
    }

    #[test]
    fn popularity_metric_hand_cases() {
        let pop = table(vec![3.0, 2.0, 1.0, 0.5], &[0]);
        let r = vec![vec![1, 2], vec![3, 2]];
        let (arp, apt) = popularity_from_rankings(&r, &pop, 2);
        assert_eq!(apt, 1.0);
        assert!((arp - (1.5 + 0.75) / 2.0).abs() < 1e-15);
        let flat = table(vec![2.5; 4], &[0]);
        assert_eq!(popularity_from_rankings(&r, &flat, 2).0, 2.5);
        // Three users: lists (0,1), (0,2), (3,1) at K=2.
        let r = vec![vec![0, 1], vec![0, 2], vec![3, 1]];
        let (arp, apt) = popularity_from_rankings(&r, &pop, 2);
        assert!((arp - ((3.0 + 2.0) / 2.0 + (3.0 + 1.0) / 2.0 + (0.5 + 2.0) / 2.0) / 3.0).abs() < 1e-15);
        assert!((apt - (0.5 + 0.5 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn attribute_metric_hand_cases() {
        let g = [Group::G0, Group::G1];
        let same = vec![vec![0, 1], vec![0, 1]];
        assert_eq!(attribute_from_rankings(&same, &[0, 0], &g, 4, 2).unwrap(), (0.0, 0.0));
        let disjoint = vec![vec![0, 1], vec![2, 3]];
        let (_, dp) = attribute_from_rankings(&disjoint, &[0, 0], &g, 4, 2).unwrap();
        assert!((dp - 1.0).abs() < 1e-15);
        // Four users: G0 = {a, b}, G1 = {c, d}, K = 2.
        // a: [0,1] t=0 hit; b: [0,2] t=3 miss; c: [1,2] t=2 hit; d: [1,3] t=3 hit.
        let r = vec![vec![0, 1], vec![0, 2], vec![1, 2], vec![1, 3]];
        let gs = [Group::G0, Group::G0, Group::G1, Group::G1];
        let (hd, dp) = attribute_from_rankings(&r, &[0, 3, 2, 3], &gs, 4, 2).unwrap();
        assert!((hd - 0.5).abs() < 1e-15);
        // f0 = (0.5, 0.25, 0.25, 0), f1 = (0, 0.5, 0.25, 0.25) -> TV = 0.5
        assert!((dp - 0.5).abs() < 1e-15);
        assert!(matches!(
            attribute_from_rankings(&r, &[0, 3, 2, 3], &[Group::G0; 4], 4, 2),
            Err(Error::GroupEmpty(_))
        ));
    }

    #[test]
    fn eval_config_validation() {
        let mut cfg = EvalConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.ks = vec![10, 5];
        assert!(cfg.validate().is_err());
        cfg.ks = vec![5];
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
    }
}
