//! Mask learning over the candidate pool and selection of the unlearning set.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::CandidateSet;
use crate::error::{Error, Result};
use crate::influence::InfluenceCache;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub fair: f64,
    pub acc: f64,
    pub spa: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            fair: 1.0,
            acc: 0.1,
            spa: 0.1,
        }
    }
}

impl Lambdas {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("fair", self.fair), ("acc", self.acc), ("spa", self.spa)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda_{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// The hyperparameter grid `{10^i : i = -3..=2}`.
pub fn lambda_grid() -> Vec<f64> {
    (-3..=2).map(|i| 10f64.powi(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub sample_ids: Vec<usize>,
    pub logits: Vec<f64>,
    pub step: usize,
    pub lambdas: Lambdas,
}

impl MaskState {
    pub fn new(sample_ids: Vec<usize>, init_logit: f64, lambdas: Lambdas) -> Self {
        let n = sample_ids.len();
        MaskState {
            sample_ids,
            logits: vec![init_logit; n],
            step: 0,
            lambdas,
        }
    }

    /// `m_k = sigmoid(omega_k)`
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&w| sigmoid(w)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Recorded for provenance; the optimizer itself draws no randomness.
    pub seed: u64,
    pub init_logit: f64,
}

impl Default for MaskOptConfig {
    fn default() -> Self {
        MaskOptConfig {
            learning_rate: 1e-3,
            iterations: 500,
            seed: 0,
            init_logit: 0.0,
        }
    }
}

fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

fn check_alignment(mask: &MaskState, cache: &InfluenceCache) -> Result<()> {
    if mask.sample_ids.len() != cache.entries.len() {
        return Err(Error::Alignment(format!(
            "{} mask entries vs {} cache entries",
            mask.sample_ids.len(),
            cache.entries.len()
        )));
    }
    if let Some((k, (id, e))) = mask
        .sample_ids
        .iter()
        .zip(&cache.entries)
        .enumerate()
        .find(|(_, (id, e))| **id != e.sample_id)
    {
        return Err(Error::Alignment(format!(
            "position {k}: mask id {id} vs cache id {}",
            e.sample_id
        )));
    }
    Ok(())
}

/// The three objective terms `(L_fair, L_acc, L_spa)`.
pub fn objective_terms(mask: &MaskState, cache: &InfluenceCache) -> Result<(f64, f64, f64)> {
    check_alignment(mask, cache)?;
    if cache.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let n = cache.len() as f64;
    let (mut fair, mut acc, mut spa) = (0.0, 0.0, 0.0);
    for (&w, e) in mask.logits.iter().zip(&cache.entries) {
        let m = sigmoid(w);
        fair -= m * e.influence;
        acc += m * e.loss;
        spa += m;
    }
    Ok((fair / n, acc / n, spa / n))
}

/// Weighted objective and its gradient with respect to the logits.
pub fn mask_objective(mask: &MaskState, cache: &InfluenceCache) -> Result<(f64, Vec<f64>)> {
    let (fair, acc, spa) = objective_terms(mask, cache)?;
    let l = mask.lambdas;
    let value = l.fair * fair + l.acc * acc + l.spa * spa;
    let n = cache.len().max(1) as f64;
    let grad = mask
        .logits
        .iter()
        .zip(&cache.entries)
        .map(|(&w, e)| {
            let m = sigmoid(w);
            m * (1.0 - m) * (-l.fair * e.influence + l.acc * e.loss + l.spa) / n
        })
        .collect();
    Ok((value, grad))
}

/// Minimizes the mask objective with Adam (beta1 0.9, beta2 0.999, eps 1e-8).
pub fn optimize_mask(
    candidates: &CandidateSet,
    cache: &InfluenceCache,
    lambdas: Lambdas,
    cfg: &MaskOptConfig,
) -> Result<MaskState> {
    lambdas.validate()?;
    if cfg.iterations == 0 || !(cfg.learning_rate > 0.0) || !cfg.init_logit.is_finite() {
        return Err(Error::InvalidArgument(
            "mask optimization needs iterations >= 1, a positive learning rate and a finite init".into(),
        ));
    }
    let mut ids = candidates.sample_ids.clone();
    ids.sort_unstable();
    let mut mask = MaskState::new(ids, cfg.init_logit, lambdas);
    let (initial, _) = mask_objective(&mask, cache)?;

    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let n = mask.logits.len();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut value = initial;
    for t in 1..=cfg.iterations {
        let (v, grad) = mask_objective(&mask, cache)?;
        if !v.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure(format!("mask objective diverged at step {t}")));
        }
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for k in 0..n {
            m1[k] = BETA1 * m1[k] + (1.0 - BETA1) * grad[k];
            m2[k] = BETA2 * m2[k] + (1.0 - BETA2) * grad[k] * grad[k];
            let mhat = m1[k] / c1;
            let vhat = m2[k] / c2;
            mask.logits[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + EPS);
        }
        mask.step = t;
        value = v;
    }
    let (final_value, _) = mask_objective(&mask, cache)?;
    if !final_value.is_finite() {
        return Err(Error::NumericalFailure("mask objective diverged".into()));
    }
    if final_value > initial {
        log::warn!("mask objective rose from {initial:.6e} to {final_value:.6e} (last step {value:.6e})");
    }
    Ok(mask)
}

/// Ids with strictly positive logits, ascending.
pub fn select_unlearn_set(mask: &MaskState) -> Vec<usize> {
    let mut ids: Vec<usize> = mask
        .sample_ids
        .iter()
        .zip(&mask.logits)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&id, _)| id)
        .collect();
    ids.sort_unstable();
    ids
}

const MASK_HEADER: &str = "sample_id,final_logit,m,influence,loss,selected";

pub fn mask_csv(mask: &MaskState, cache: &InfluenceCache) -> Result<String> {
    check_alignment(mask, cache)?;
    let mut out = String::from(MASK_HEADER);
    out.push('\n');
    for (&w, e) in mask.logits.iter().zip(&cache.entries) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.sample_id,
            w,
            sigmoid(w),
            e.influence,
            e.loss,
            u8::from(w > 0.0)
        );
    }
    Ok(out)
}

pub fn write_mask_csv(path: &Path, mask: &MaskState, cache: &InfluenceCache) -> Result<()> {
    fs::write(path, mask_csv(mask, cache)?).map_err(|e| Error::io(path, e))
}

/// Selected ids from a `mask.csv` file.
pub fn read_selected_ids(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MASK_HEADER) {
        return Err(Error::format("mask.csv", "missing header"));
    }
    let mut ids = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: "malformed mask row".into(),
        };
        if f.len() != 6 {
            return Err(bad());
        }
        match f[5] {
            "1" => ids.push(f[0].parse().map_err(|_| bad())?),
            "0" => {}
            _ => return Err(bad()),
        }
    }
    ids.sort_unstable();
    Ok(ids)
}
