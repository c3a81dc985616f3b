//! Damped conjugate gradient and per-sample influence scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateSet, SampleSet};
use crate::error::{Error, Result};
use crate::fairness::{evaluate_bias, BiasSpec};
use crate::par;
use crate::recmodel::{hex_digest, hvp, sample_loss_and_grad, ModelState, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgConfig {
    /// Added to the Hessian diagonal before solving.
    pub damping: f64,
    /// Target relative residual `||A x - b|| / ||b||`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            damping: 1e-3,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid CG config (damping {}, tol {}, max_iter {})",
                self.damping, self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: ParamVector,
    pub iterations: usize,
    /// Final relative residual (recursive estimate).
    pub residual: f64,
    pub converged: bool,
    /// Operator applications performed.
    pub operator_calls: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(H + damping I) x = b` given `v -> H v`.
///
/// Stops when the relative residual reaches `tol` or after `max_iter`
/// iterations; hitting the cap is reported through `converged`, not an error.
pub fn solve_damped_cg<F>(mut oracle: F, b: &[f64], cfg: &CgConfig) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("right-hand side is not finite".into()));
    }
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: ParamVector::zeros(n),
            iterations: 0,
            residual: 0.0,
            converged: true,
            operator_calls: 0,
        });
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut residual = 1.0;
    let mut calls = 0;
    for iter in 1..=cfg.max_iter {
        let mut ap = oracle(&p)?;
        calls += 1;
        if ap.len() != n {
            return Err(Error::SolverFailure {
                iteration: iter,
                reason: format!("operator returned length {} for length {n}", ap.len()),
            });
        }
        for (a, pv) in ap.iter_mut().zip(&p) {
            *a += cfg.damping * pv;
        }
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::SolverFailure {
                iteration: iter,
                reason: "non-finite curvature".into(),
            });
        }
        if pap <= 0.0 {
            return Err(Error::SolverFailure {
                iteration: iter,
                reason: format!("non-positive curvature {pap:e}; operator is not positive definite"),
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SolverFailure {
                iteration: iter,
                reason: "non-finite iterate".into(),
            });
        }
        residual = rr_new.sqrt() / b_norm;
        if residual <= cfg.tol {
            return Ok(CgOutcome {
                x: ParamVector(x),
                iterations: iter,
                residual,
                converged: true,
                operator_calls: calls,
            });
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    log::warn!(
        "CG stopped at max_iter={} with relative residual {residual:.3e}",
        cfg.max_iter
    );
    Ok(CgOutcome {
        x: ParamVector(x),
        iterations: cfg.max_iter,
        residual,
        converged: false,
        operator_calls: calls,
    })
}

/// `(H + damping I)^{-1} grad B`, the vector shared by all influence scores.
#[derive(Debug, Clone)]
pub struct InfluenceVector {
    pub s: ParamVector,
    pub bias_value: f64,
    pub bias_grad_norm: f64,
    pub cg: CgOutcome,
}

pub fn precompute_influence_vector(
    model: &ModelState,
    train: &SampleSet,
    spec: &BiasSpec<'_>,
    cfg: &CgConfig,
) -> Result<InfluenceVector> {
    let bias = evaluate_bias(model, spec)?;
    let cg = solve_damped_cg(|v| Ok(hvp(model, train, v)?.into_inner()), &bias.grad, cfg)?;
    Ok(InfluenceVector {
        s: cg.x.clone(),
        bias_value: bias.value,
        bias_grad_norm: bias.grad.norm(),
        cg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub sample_id: usize,
    pub influence: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceCache {
    pub fingerprint: String,
    pub s_vector: ParamVector,
    /// Ordered by `sample_id`.
    pub entries: Vec<InfluenceEntry>,
}

impl InfluenceCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.sample_id).collect()
    }
}

/// Fingerprint of everything an influence cache depends on.
pub fn cache_fingerprint(model: &ModelState, spec: &BiasSpec<'_>, cfg: &CgConfig) -> String {
    let mut bytes = model.to_bytes();
    bytes.extend_from_slice(spec.describe().as_bytes());
    bytes.extend_from_slice(
        format!("damping={:?};tol={:?};max_iter={}", cfg.damping, cfg.tol, cfg.max_iter).as_bytes(),
    );
    hex_digest(&bytes)
}

/// `I(z_k) = -<s, grad L(z_k)>` for every candidate, with the candidate's
/// loss and gradient norm cached alongside.
pub fn influence_scores(
    model: &ModelState,
    candidates: &CandidateSet,
    train: &SampleSet,
    s: &ParamVector,
    fingerprint: &str,
) -> Result<InfluenceCache> {
    if s.len() != model.dim() || !s.is_finite() {
        return Err(Error::InvalidArgument("influence vector does not match the model".into()));
    }
    let mut ids = candidates.sample_ids.clone();
    ids.sort_unstable();
    ids.dedup();
    let samples = ids
        .iter()
        .map(|&id| {
            train
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("candidate {id} outside training set")))
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = par::ordered_map(&samples, |smp| {
        let (loss, grad) = sample_loss_and_grad(model, smp)?;
        Ok(InfluenceEntry {
            sample_id: smp.sample_id,
            influence: -s.dot(&grad),
            loss,
            grad_norm: grad.norm(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(InfluenceCache {
        fingerprint: fingerprint.to_string(),
        s_vector: s.clone(),
        entries,
    })
}

const FINGERPRINT_PREFIX: &str = "# fingerprint=";
const INFLUENCE_HEADER: &str = "sample_id,influence,loss,grad_norm";

pub fn influence_csv(cache: &InfluenceCache) -> String {
    let mut out = format!("{FINGERPRINT_PREFIX}{}\n{INFLUENCE_HEADER}\n", cache.fingerprint);
    for e in &cache.entries {
        let _ = writeln!(out, "{},{},{},{}", e.sample_id, e.influence, e.loss, e.grad_norm);
    }
    out
}

pub fn write_influence_csv(path: &Path, cache: &InfluenceCache) -> Result<()> {
    fs::write(path, influence_csv(cache)).map_err(|e| Error::io(path, e))
}

/// Reads `influence.csv`. The `s` vector is not persisted and comes back empty.
pub fn read_influence_csv(path: &Path) -> Result<InfluenceCache> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let fingerprint = lines
        .next()
        .and_then(|l| l.strip_prefix(FINGERPRINT_PREFIX))
        .ok_or_else(|| Error::format("influence.csv", "missing fingerprint header"))?
        .to_string();
    if lines.next() != Some(INFLUENCE_HEADER) {
        return Err(Error::format("influence.csv", "missing column header"));
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 3,
            msg: "expected sample_id,influence,loss,grad_norm".into(),
        };
        if f.len() != 4 {
            return Err(bad());
        }
        entries.push(InfluenceEntry {
            sample_id: f[0].parse().map_err(|_| bad())?,
            influence: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            grad_norm: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(InfluenceCache {
        fingerprint,
        s_vector: ParamVector::default(),
        entries,
    })
}
