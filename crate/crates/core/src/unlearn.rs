//! One-step influence unlearning and the exact-retraining comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroupAssignment, PopularityTable, SampleSet};
use crate::error::{Error, Result};
use crate::fairness::{evaluate_model, EvalConfig, EvalReport};
use crate::influence::{solve_damped_cg, CgConfig, CgOutcome};
use crate::par;
use crate::recmodel::{hvp, initial_adapter, risk_and_grad, train_adapter, ModelState, ParamVector, TrainConfig, Trained};

#[derive(Debug, Clone)]
pub struct DeltaOutcome {
    pub delta: ParamVector,
    /// Size of the full training set used in the `1/n` factor.
    pub n: usize,
    pub unlearn_count: usize,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub cg_converged: bool,
    /// Per-sample gradients plus Hessian-vector products evaluated.
    pub grad_evals: u64,
}

fn validate_ids(train: &SampleSet, ids: &[usize]) -> Result<()> {
    let mut seen = vec![false; train.len()];
    for &id in ids {
        if id >= train.len() {
            return Err(Error::InvalidArgument(format!(
                "unlearn id {id} outside training set of {}",
                train.len()
            )));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::InvalidArgument(format!("duplicate unlearn id {id}")));
        }
    }
    Ok(())
}

/// `delta = (1/n) (H + damping I)^{-1} sum_{k in unlearn} grad L(z_k)`, with
/// `H` the mean Hessian over the full training set at the current adapter.
pub fn compute_delta(
    model: &ModelState,
    train: &SampleSet,
    unlearn_ids: &[usize],
    cfg: &CgConfig,
) -> Result<DeltaOutcome> {
    validate_ids(train, unlearn_ids)?;
    let n = train.len();
    let dim = model.dim();
    if unlearn_ids.is_empty() {
        return Ok(DeltaOutcome {
            delta: ParamVector::zeros(dim),
            n,
            unlearn_count: 0,
            cg_iterations: 0,
            cg_residual: 0.0,
            cg_converged: true,
            grad_evals: 0,
        });
    }
    if unlearn_ids.len() == n {
        return Err(Error::DegenerateRemain);
    }
    log::info!("unlearning {} of {n} samples", unlearn_ids.len());

    let mut sorted = unlearn_ids.to_vec();
    sorted.sort_unstable();
    let removed = train.select(&sorted);
    let grads = par::ordered_map(&removed.samples, |s| {
        crate::recmodel::sample_loss_and_grad(model, s).map(|(_, g)| g)
    });
    let mut g = ParamVector::zeros(dim);
    for grad in grads {
        g.add_scaled(1.0, &grad?);
    }
    let (delta, cg) = one_step_delta(|v| Ok(hvp(model, train, v)?.into_inner()), &g, n, cfg)?;
    Ok(DeltaOutcome {
        delta,
        n,
        unlearn_count: sorted.len(),
        cg_iterations: cg.iterations,
        cg_residual: cg.residual,
        cg_converged: cg.converged,
        grad_evals: sorted.len() as u64 + cg.operator_calls as u64,
    })
}

/// `(1/n) (H + damping I)^{-1} grad_sum` for an arbitrary Hessian oracle.
pub fn one_step_delta<F>(oracle: F, grad_sum: &[f64], n: usize, cfg: &CgConfig) -> Result<(ParamVector, CgOutcome)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(Error::InvalidArgument("training set size must be positive".into()));
    }
    let cg = solve_damped_cg(oracle, grad_sum, cfg)?;
    let delta = cg.x.scaled(1.0 / n as f64);
    if !delta.is_finite() {
        return Err(Error::NumericalFailure("non-finite parameter update".into()));
    }
    Ok((delta, cg))
}

/// `theta* = theta + delta`; the original model is left untouched.
pub fn apply_update(model: &ModelState, delta: &[f64]) -> Result<ModelState> {
    if delta.len() != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "delta length {} != parameter dimension {}",
            delta.len(),
            model.dim()
        )));
    }
    let adapter = model.adapter.iter().zip(delta).map(|(a, b)| a + b).collect();
    model.with_adapter(adapter)
}

/// Retrains the adapter from its initialization on the remaining samples,
/// reusing `base`'s frozen embeddings.
pub fn retrain_oracle(
    train: &SampleSet,
    unlearn_ids: &[usize],
    base: &ModelState,
    cfg: &TrainConfig,
) -> Result<Trained> {
    validate_ids(train, unlearn_ids)?;
    let remain = train.without(unlearn_ids);
    if remain.is_empty() {
        return Err(Error::DegenerateRemain);
    }
    let init = ModelState::new(
        base.d,
        base.item_count,
        cfg.reg,
        base.seed,
        std::sync::Arc::clone(&base.item_emb),
        initial_adapter(base.d),
    )?;
    train_adapter(init, &remain, cfg)
}

/// Uniformly drawn ids of the given size, ascending.
pub fn random_unlearn_baseline(train_len: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > train_len {
        return Err(Error::InvalidArgument(format!(
            "baseline size {size} exceeds training set of {train_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, train_len, size).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Inputs shared by every evaluation in a run.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub pop: &'a PopularityTable,
    pub groups: Option<&'a GroupAssignment>,
    pub cfg: &'a EvalConfig,
}

impl EvalContext<'_> {
    pub fn evaluate(&self, model: &ModelState, set: &SampleSet) -> Result<EvalReport> {
        evaluate_model(model, set, self.pop, self.groups, self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub metric: String,
    pub fudlr_value: f64,
    pub retrained_value: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub param_distance: f64,
    /// `||grad R_remain||` at the original adapter.
    pub stationarity_before: f64,
    /// `||grad R_remain||` at the updated adapter.
    pub stationarity_after: f64,
}

impl GapReport {
    pub fn gap(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.gap)
    }
}

fn metric_pairs(report: &EvalReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for r in &report.rows {
        let k = r.k;
        out.push((format!("hr@{k}"), r.hr));
        out.push((format!("ndcg@{k}"), r.ndcg));
        out.push((format!("arp@{k}"), r.arp));
        out.push((format!("apt@{k}"), r.apt));
        if let Some(v) = r.hd {
            out.push((format!("hd@{k}"), v));
        }
        if let Some(v) = r.dp {
            out.push((format!("dp@{k}"), v));
        }
        out.push((format!("f_pop@{k}"), r.f_pop));
        if let Some(v) = r.f_attr {
            out.push((format!("f_attr@{k}"), v));
        }
    }
    out
}

pub fn gap_report(
    fudlr: &ModelState,
    retrained: &ModelState,
    original: &ModelState,
    remain: &SampleSet,
    test: &SampleSet,
    ctx: &EvalContext<'_>,
) -> Result<GapReport> {
    for m in [retrained, original] {
        if m.d != fudlr.d || m.item_count != fudlr.item_count {
            return Err(Error::InvalidArgument("models differ in shape".into()));
        }
    }
    let a = metric_pairs(&ctx.evaluate(fudlr, test)?);
    let b = metric_pairs(&ctx.evaluate(retrained, test)?);
    let rows = a
        .into_iter()
        .zip(b)
        .map(|((metric, x), (_, y))| GapRow {
            metric,
            fudlr_value: x,
            retrained_value: y,
            gap: (x - y).abs(),
        })
        .collect();
    let param_distance = fudlr
        .adapter
        .iter()
        .zip(&retrained.adapter)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let stationarity_before = risk_and_grad(original, remain)?.1.norm();
    let stationarity_after = risk_and_grad(fudlr, remain)?.1.norm();
    Ok(GapReport {
        rows,
        param_distance,
        stationarity_before,
        stationarity_after,
    })
}

pub fn gap_csv(report: &GapReport) -> String {
    let mut out = String::from("metric,fudlr_value,retrained_value,gap\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{}", r.metric, r.fudlr_value, r.retrained_value, r.gap);
    }
    let _ = writeln!(out, "param_distance,,,{}", report.param_distance);
    let _ = writeln!(out, "stationarity_before,,,{}", report.stationarity_before);
    let _ = writeln!(out, "stationarity_after,,,{}", report.stationarity_after);
    out
}

pub fn write_gap_csv(path: &Path, report: &GapReport) -> Result<()> {
    fs::write(path, gap_csv(report)).map_err(|e| Error::io(path, e))
}

/// Contents of `unlearn.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnSummary {
    pub n: usize,
    pub unlearn_count: usize,
    pub delta_norm: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub cg_converged: bool,
    pub damping: f64,
    pub stationarity_before: f64,
    pub stationarity_after: f64,
}

impl UnlearnSummary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("unlearn.json", e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}
