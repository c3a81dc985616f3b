//! Distance-softmax next-item recommender with a trainable `d x d` adapter.
//!
//! A sample's history is mean-pooled over frozen item embeddings, mapped by
//! the adapter to a query `q = A u`, and every item is scored by its squared
//! distance to the query. `P(i | z) = softmax(-d)_i`. Only the adapter is
//! trained and only the adapter enters gradients and Hessians; its row-major
//! flattening is the parameter vector.

use std::fs;
use std::ops::{Deref, DerefMut};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Sample, SampleSet};
use crate::error::{Error, Result};
use crate::par;

/// Largest parameter dimension the dense Hessian oracle accepts.
pub const MAX_DENSE_DIM: usize = 4096;

/// A flat vector in adapter-parameter coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * alpha).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub d: usize,
    pub item_count: usize,
    pub reg: f64,
    pub seed: u64,
    /// Frozen `item_count x d` embeddings, row-major, shared between copies.
    pub item_emb: Arc<Vec<f64>>,
    /// `d x d` adapter, row-major.
    pub adapter: Vec<f64>,
}

impl ModelState {
    pub fn new(
        d: usize,
        item_count: usize,
        reg: f64,
        seed: u64,
        item_emb: Arc<Vec<f64>>,
        adapter: Vec<f64>,
    ) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidArgument(format!("embedding width {d} < 2")));
        }
        if item_count == 0 {
            return Err(Error::InvalidArgument("model needs at least one item".into()));
        }
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(Error::InvalidArgument(format!("reg {reg} must be finite and >= 0")));
        }
        if item_emb.len() != item_count * d || adapter.len() != d * d {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch: emb {} (want {}), adapter {} (want {})",
                item_emb.len(),
                item_count * d,
                adapter.len(),
                d * d
            )));
        }
        if !adapter.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite adapter entry".into()));
        }
        Ok(ModelState {
            d,
            item_count,
            reg,
            seed,
            item_emb,
            adapter,
        })
    }

    /// Seeded Gaussian embeddings with per-coordinate std `emb_scale / sqrt(d)`
    /// and an identity adapter.
    pub fn init(item_count: usize, d: usize, reg: f64, emb_scale: f64, seed: u64) -> Result<Self> {
        if !(emb_scale > 0.0 && emb_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("emb_scale {emb_scale} must be > 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, emb_scale / (d.max(1) as f64).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let emb: Vec<f64> = (0..item_count * d).map(|_| normal.sample(&mut rng)).collect();
        ModelState::new(d, item_count, reg, seed, Arc::new(emb), initial_adapter(d))
    }

    pub fn dim(&self) -> usize {
        self.d * self.d
    }

    pub fn theta(&self) -> ParamVector {
        ParamVector(self.adapter.clone())
    }

    pub fn with_adapter(&self, adapter: Vec<f64>) -> Result<ModelState> {
        ModelState::new(
            self.d,
            self.item_count,
            self.reg,
            self.seed,
            Arc::clone(&self.item_emb),
            adapter,
        )
    }

    #[inline]
    pub fn emb(&self, item: usize) -> &[f64] {
        &self.item_emb[item * self.d..(item + 1) * self.d]
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.history.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {} has an empty history",
                sample.sample_id
            )));
        }
        if sample.target >= self.item_count || sample.history.iter().any(|&h| h >= self.item_count) {
            return Err(Error::InvalidArgument(format!(
                "sample {} references an item outside [0, {})",
                sample.sample_id, self.item_count
            )));
        }
        Ok(())
    }

    fn pooled_history(&self, history: &[usize]) -> Vec<f64> {
        let mut u = vec![0.0; self.d];
        for &h in history {
            for (acc, v) in u.iter_mut().zip(self.emb(h)) {
                *acc += v;
            }
        }
        let inv = 1.0 / history.len() as f64;
        u.iter_mut().for_each(|v| *v *= inv);
        u
    }

    pub(crate) fn forward(&self, history: &[usize]) -> Forward {
        let d = self.d;
        let u = self.pooled_history(history);
        let q: Vec<f64> = (0..d)
            .map(|a| {
                self.adapter[a * d..(a + 1) * d]
                    .iter()
                    .zip(&u)
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let dist: Vec<f64> = (0..self.item_count)
            .map(|i| {
                self.emb(i)
                    .iter()
                    .zip(&q)
                    .map(|(e, qv)| (e - qv) * (e - qv))
                    .sum()
            })
            .collect();
        let min_d = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let mut probs: Vec<f64> = dist.iter().map(|&di| (-(di - min_d)).exp()).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        // log-partition of -d
        let log_z = z.ln() - min_d;
        let mut mean_emb = vec![0.0; d];
        for (i, &p) in probs.iter().enumerate() {
            for (m, e) in mean_emb.iter_mut().zip(self.emb(i)) {
                *m += p * e;
            }
        }
        Forward {
            u,
            q,
            dist,
            probs,
            log_z,
            mean_emb,
        }
    }

    /// Data part of `-log P(target)`, i.e. without the L2 term.
    fn nll(&self, fwd: &Forward, target: usize) -> f64 {
        fwd.dist[target] + fwd.log_z
    }

    fn l2(&self) -> f64 {
        0.5 * self.reg * self.adapter.iter().map(|v| v * v).sum::<f64>()
    }

    /// Adds `scale * outer(gq, u)` to a flat `d x d` accumulator.
    #[inline]
    pub(crate) fn add_outer(&self, acc: &mut [f64], gq: &[f64], u: &[f64], scale: f64) {
        let d = self.d;
        for a in 0..d {
            let ga = scale * gq[a];
            for (slot, ub) in acc[a * d..(a + 1) * d].iter_mut().zip(u) {
                *slot += ga * ub;
            }
        }
    }

    /// `d(-log P(target)) / dq = 2 (E_p[e] - e_target)`
    fn nll_grad_q(&self, fwd: &Forward, target: usize) -> Vec<f64> {
        fwd.mean_emb
            .iter()
            .zip(self.emb(target))
            .map(|(m, e)| 2.0 * (m - e))
            .collect()
    }

    /// `H_q w = 4 (E_p[e e^T] - E_p[e] E_p[e]^T) w`, the Hessian of the
    /// negative log-likelihood in query space applied to `w`.
    pub(crate) fn query_hessian_apply(&self, fwd: &Forward, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (i, &p) in fwd.probs.iter().enumerate() {
            let e = self.emb(i);
            let ew: f64 = e.iter().zip(w).map(|(a, b)| a * b).sum();
            let c = p * ew;
            for (o, ev) in out.iter_mut().zip(e) {
                *o += c * ev;
            }
        }
        let mw: f64 = fwd.mean_emb.iter().zip(w).map(|(a, b)| a * b).sum();
        for (o, m) in out.iter_mut().zip(&fwd.mean_emb) {
            *o = 4.0 * (*o - m * mw);
        }
        out
    }
}

/// Cached forward quantities for one history.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub u: Vec<f64>,
    #[allow(dead_code)]
    pub q: Vec<f64>,
    pub dist: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_z: f64,
    /// `E_p[e]`
    pub mean_emb: Vec<f64>,
}

/// The adapter every training run starts from (identity).
pub fn initial_adapter(d: usize) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        a[i * d + i] = 1.0;
    }
    a
}

/// Squared distances from the sample's query to every item, and the softmax
/// of their negatives.
pub fn item_distribution(model: &ModelState, sample: &Sample) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check_sample(sample)?;
    let fwd = model.forward(&sample.history);
    Ok((fwd.dist, fwd.probs))
}

/// `-log P(target | z) + (reg / 2) ||theta||^2` and its exact gradient.
pub fn sample_loss_and_grad(model: &ModelState, sample: &Sample) -> Result<(f64, ParamVector)> {
    model.check_sample(sample)?;
    let fwd = model.forward(&sample.history);
    let loss = model.nll(&fwd, sample.target) + model.l2();
    let gq = model.nll_grad_q(&fwd, sample.target);
    let mut grad = model.theta().scaled(model.reg);
    model.add_outer(&mut grad, &gq, &fwd.u, 1.0);
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "non-finite loss for sample {}",
            sample.sample_id
        )));
    }
    Ok((loss, grad))
}

/// Mean loss and gradient of the empirical risk over `samples`.
pub fn risk_and_grad(model: &ModelState, samples: &SampleSet) -> Result<(f64, ParamVector)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("risk over an empty sample set".into()));
    }
    for s in samples {
        model.check_sample(s)?;
    }
    let (nll_sum, gsum) = par::ordered_scalar_vec_sum(&samples.samples, model.dim(), |s, acc| {
        let fwd = model.forward(&s.history);
        let gq = model.nll_grad_q(&fwd, s.target);
        model.add_outer(acc, &gq, &fwd.u, 1.0);
        model.nll(&fwd, s.target)
    });
    let n = samples.len() as f64;
    let mut grad = ParamVector(gsum).scaled(1.0 / n);
    grad.add_scaled(model.reg, &model.adapter);
    Ok((nll_sum / n + model.l2(), grad))
}

/// How Hessian-vector products are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    /// Exact second-order terms of the softmax cross-entropy.
    #[default]
    Analytic,
    /// Central differences of the empirical-risk gradient.
    FiniteDifference,
}

/// `H v` where `H` is the Hessian of the mean sample loss over `samples`.
pub fn hvp(model: &ModelState, samples: &SampleSet, v: &[f64]) -> Result<ParamVector> {
    hvp_with(model, samples, v, HvpMode::Analytic)
}

pub fn hvp_with(
    model: &ModelState,
    samples: &SampleSet,
    v: &[f64],
    mode: HvpMode,
) -> Result<ParamVector> {
    let dim = model.dim();
    if v.len() != dim {
        return Err(Error::InvalidArgument(format!(
            "vector length {} != parameter dimension {dim}",
            v.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("HVP over an empty sample set".into()));
    }
    let out = match mode {
        HvpMode::Analytic => {
            for s in samples {
                model.check_sample(s)?;
            }
            let d = model.d;
            let sum = par::ordered_vec_sum(&samples.samples, dim, |s, acc| {
                let fwd = model.forward(&s.history);
                let dq: Vec<f64> = (0..d)
                    .map(|a| v[a * d..(a + 1) * d].iter().zip(&fwd.u).map(|(x, y)| x * y).sum())
                    .collect();
                let w = model.query_hessian_apply(&fwd, &dq);
                model.add_outer(acc, &w, &fwd.u, 1.0);
            });
            let mut out = ParamVector(sum).scaled(1.0 / samples.len() as f64);
            out.add_scaled(model.reg, v);
            out
        }
        HvpMode::FiniteDifference => {
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vnorm == 0.0 {
                return Ok(ParamVector::zeros(dim));
            }
            // Step along the unit direction, relative to the parameter scale.
            let h = 1e-5 * (1.0 + model.theta().norm());
            let step = h / vnorm;
            let shifted = |sign: f64| -> Result<ParamVector> {
                let mut a = model.adapter.clone();
                for (x, vi) in a.iter_mut().zip(v) {
                    *x += sign * step * vi;
                }
                Ok(risk_and_grad(&model.with_adapter(a)?, samples)?.1)
            };
            let plus = shifted(1.0)?;
            let minus = shifted(-1.0)?;
            ParamVector(
                plus.iter()
                    .zip(minus.iter())
                    .map(|(p, m)| (p - m) / (2.0 * step))
                    .collect(),
            )
        }
    };
    if !out.is_finite() {
        return Err(Error::NumericalFailure("non-finite Hessian-vector product".into()));
    }
    Ok(out)
}

/// Dense Hessian of the mean sample loss, assembled from the Kronecker form
/// `H = mean_k (H_q,k (x) u_k u_k^T) + reg I`. Intended as a test oracle.
pub fn exact_hessian(model: &ModelState, samples: &SampleSet) -> Result<DMatrix<f64>> {
    let dim = model.dim();
    if dim > MAX_DENSE_DIM {
        return Err(Error::SizeGuard {
            dim,
            max: MAX_DENSE_DIM,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("Hessian over an empty sample set".into()));
    }
    let d = model.d;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for s in samples {
        model.check_sample(s)?;
        let fwd = model.forward(&s.history);
        let mut hq = DMatrix::<f64>::zeros(d, d);
        for (i, &p) in fwd.probs.iter().enumerate() {
            let e = model.emb(i);
            for a in 0..d {
                for c in 0..d {
                    hq[(a, c)] += p * e[a] * e[c];
                }
            }
        }
        for a in 0..d {
            for c in 0..d {
                hq[(a, c)] = 4.0 * (hq[(a, c)] - fwd.mean_emb[a] * fwd.mean_emb[c]);
            }
        }
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    for e in 0..d {
                        h[(a * d + b, c * d + e)] += hq[(a, c)] * fwd.u[b] * fwd.u[e];
                    }
                }
            }
        }
    }
    h /= samples.len() as f64;
    for i in 0..dim {
        h[(i, i)] += model.reg;
    }
    Ok(h)
}

/// Items by ascending distance (ties by ascending index), optionally with
/// the sample's history removed, truncated to `k`.
pub fn rank_top_k(
    model: &ModelState,
    sample: &Sample,
    k: usize,
    exclude_history: bool,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let (dist, _) = item_distribution(model, sample)?;
    Ok(rank_by_distance(&dist, &sample.history, k, exclude_history))
}

pub(crate) fn rank_by_distance(
    dist: &[f64],
    history: &[usize],
    k: usize,
    exclude_history: bool,
) -> Vec<usize> {
    let mut order: Vec<usize> = if exclude_history {
        let mut skip = vec![false; dist.len()];
        for &h in history {
            skip[h] = true;
        }
        (0..dist.len()).filter(|&i| !skip[i]).collect()
    } else {
        (0..dist.len()).collect()
    };
    let cmp = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Embedding width.
    pub d: usize,
    pub reg: f64,
    /// Scale of the random frozen embeddings (expected row norm).
    pub emb_scale: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once the full-batch gradient norm falls below this.
    pub grad_tol: f64,
    pub emb_init: EmbeddingInit,
}

/// How the frozen item embeddings are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    /// Seeded Gaussian rows, see [`ModelState::init`].
    #[default]
    Gaussian,
    /// Seeded spectral embedding of the training co-occurrence graph, see
    /// [`cooccurrence_embeddings`].
    Cooccurrence,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 8,
            reg: 1e-3,
            emb_scale: 2.0,
            epochs: 2000,
            learning_rate: 0.5,
            seed: 0,
            grad_tol: 1e-6,
            emb_init: EmbeddingInit::Gaussian,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
    /// Per-sample gradient evaluations spent.
    pub grad_evals: u64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ModelState,
    pub report: TrainReport,
}

/// Initializes embeddings from the seed, freezes them, and fits the adapter
/// by full-batch gradient descent.
pub fn train_backbone(samples: &SampleSet, item_count: usize, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let init = match cfg.emb_init {
        EmbeddingInit::Gaussian => ModelState::init(item_count, cfg.d, cfg.reg, cfg.emb_scale, cfg.seed)?,
        EmbeddingInit::Cooccurrence => {
            let emb = cooccurrence_embeddings(samples, item_count, cfg.d, cfg.emb_scale, cfg.seed)?;
            ModelState::new(cfg.d, item_count, cfg.reg, cfg.seed, Arc::new(emb), initial_adapter(cfg.d))?
        }
    };
    train_adapter(init, samples, cfg)
}

/// Item embeddings from the leading eigenvectors of the symmetrically
/// normalized co-occurrence matrix `D^-1/2 C D^-1/2`, where `C[h][t]` counts
/// history item `h` preceding target `t` (symmetrized, weighted by
/// `1/|history|`). The eigenvectors come from seeded subspace iteration;
/// each row is scaled by the eigenvalues, perturbed by seeded noise of
/// relative size 0.1, and rescaled to norm `emb_scale`.
pub fn cooccurrence_embeddings(
    samples: &SampleSet,
    item_count: usize,
    d: usize,
    emb_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(emb_scale > 0.0 && emb_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("emb_scale {emb_scale} must be > 0")));
    }
    if d < 2 || d > item_count {
        return Err(Error::InvalidArgument(format!(
            "embedding width {d} must lie in 2..={item_count}"
        )));
    }
    let n = item_count;
    let mut c = DMatrix::<f64>::zeros(n, n);
    for s in samples {
        let w = 1.0 / s.history.len().max(1) as f64;
        for &h in &s.history {
            c[(h, s.target)] += w;
            c[(s.target, h)] += w;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| c.row(i).sum() + 1.0).collect();
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] /= (deg[i] * deg[j]).sqrt();
        }
    }
    // Shift so every eigenvalue is non-negative and the leading ones dominate.
    for i in 0..n {
        c[(i, i)] += 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut x = DMatrix::<f64>::from_fn(n, d, |_, _| normal.sample(&mut rng));
    for _ in 0..200 {
        x = (&c * &x).qr().q();
    }
    let t = x.transpose() * &c * &x;
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let basis = &x * &eig.eigenvectors;
    let mut emb = vec![0.0; n * d];
    for i in 0..n {
        let row = &mut emb[i * d..(i + 1) * d];
        for (k, &col) in order.iter().enumerate() {
            row[k] = basis[(i, col)] * (eig.eigenvalues[col] - 1.0).max(0.0);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let noise = 0.1 * norm.max(1.0 / (n as f64).sqrt()) / (d as f64).sqrt();
        for v in row.iter_mut() {
            *v += noise * normal.sample(&mut rng);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v *= emb_scale / norm;
        }
    }
    Ok(emb)
}

/// Fits the adapter of `init` by full-batch gradient descent, keeping its
/// embeddings frozen.
pub fn train_adapter(init: ModelState, samples: &SampleSet, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training needs at least one sample".into()));
    }
    let mut model = init;
    model.reg = cfg.reg;
    let n = samples.len() as u64;
    let mut grad_evals = 0u64;
    let mut epochs_run = 0;
    let mut converged = false;
    for epoch in 1..=cfg.epochs {
        let (loss, grad) = risk_and_grad(&model, samples)?;
        grad_evals += n;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if grad.norm() < cfg.grad_tol {
            converged = true;
            break;
        }
        for (a, g) in model.adapter.iter_mut().zip(grad.iter()) {
            *a -= cfg.learning_rate * g;
        }
        epochs_run = epoch;
    }
    let (final_loss, grad) = risk_and_grad(&model, samples)?;
    grad_evals += n;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: epochs_run + 1 });
    }
    let final_grad_norm = grad.norm();
    converged |= final_grad_norm < cfg.grad_tol;
    log::debug!(
        "trained {} epochs, loss {final_loss:.6}, |grad| {final_grad_norm:.3e}",
        epochs_run
    );
    Ok(Trained {
        model,
        report: TrainReport {
            epochs_run,
            final_loss,
            final_grad_norm,
            converged,
            grad_evals,
        },
    })
}

const CKPT_MAGIC: &[u8; 8] = b"DBCKPT\0\0";
const CKPT_VERSION: u32 = 1;

impl ModelState {
    /// Little-endian binary checkpoint: magic, version, seed, d, item_count,
    /// reg, embeddings then adapter (both row-major).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * (self.item_emb.len() + self.adapter.len()));
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        out.extend_from_slice(&(self.item_count as u64).to_le_bytes());
        out.extend_from_slice(&self.reg.to_le_bytes());
        for v in self.item_emb.iter().chain(&self.adapter) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("checkpoint", m);
        if bytes.len() < 44 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(8) != CKPT_VERSION {
            return Err(bad("unsupported version"));
        }
        let seed = u64_at(12);
        let d = u64_at(20) as usize;
        let item_count = u64_at(28) as usize;
        let reg = f64::from_bits(u64_at(36));
        let body = &bytes[44..];
        let want = item_count
            .checked_add(d)
            .and_then(|x| x.checked_mul(d))
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| bad("size overflow"))?;
        if body.len() != want {
            return Err(bad("body length does not match header"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (emb, adapter) = vals.split_at(item_count * d);
        ModelState::new(d, item_count, reg, seed, Arc::new(emb.to_vec()), adapter.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelState::from_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
