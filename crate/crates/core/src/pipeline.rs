//! End-to-end orchestration: configuration, stages, cost accounting and
//! report files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    compute_popularity, load_interactions, sample_candidates, subsample, temporal_split,
    CandidateSet, GroupAssignment, IndexMap, PopularityConfig, PopularityCounting, PopularityTable,
    PopularityValue, SampleSet, SplitConfig,
};
use crate::error::{Error, Result};
use crate::fairness::{evaluate_model, rankings, write_metrics_csv, BiasKind, BiasSpec, EvalConfig, EvalReport};
use crate::influence::{
    cache_fingerprint, influence_scores, precompute_influence_vector, read_influence_csv,
    write_influence_csv, CgConfig, InfluenceCache,
};
use crate::maskopt::{
    lambda_grid, optimize_mask, read_selected_ids, select_unlearn_set, write_mask_csv, Lambdas,
    MaskOptConfig, MaskState,
};
use crate::recmodel::{train_backbone, EmbeddingInit, ModelState, TrainConfig};
use crate::unlearn::{
    apply_update, compute_delta, gap_report, retrain_oracle, write_gap_csv, EvalContext,
    UnlearnSummary,
};

/// Environment variable overriding `run.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DEBIAS_OUTPUT_DIR";

pub const METRICS_FILE: &str = "metrics.csv";
pub const INFLUENCE_FILE: &str = "influence.csv";
pub const MASK_FILE: &str = "mask.csv";
pub const UNLEARN_FILE: &str = "unlearn.json";
pub const GAP_FILE: &str = "gap.csv";
pub const DECILE_FILE: &str = "decile_report.csv";
pub const COST_FILE: &str = "cost.json";
pub const CONFIG_FILE: &str = "config.resolved";
pub const INDEX_MAP_FILE: &str = "index_map.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const DEBIASED_FILE: &str = "model_debiased.ckpt";
pub const GRID_FILE: &str = "grid.csv";
pub const FAILED_FILE: &str = "FAILED";

/// Every report file a full run writes, in a fixed order.
pub const REPORT_FILES: [&str; 8] = [
    METRICS_FILE,
    INFLUENCE_FILE,
    MASK_FILE,
    UNLEARN_FILE,
    GAP_FILE,
    DECILE_FILE,
    COST_FILE,
    CONFIG_FILE,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub interactions: PathBuf,
    pub attributes: Option<PathBuf>,
    pub periods: usize,
    pub train_periods: usize,
    pub valid_periods: usize,
    pub test_periods: usize,
    pub popularity_counting: PopularityCounting,
    pub popularity_value: PopularityValue,
    pub head_fraction: f64,
    /// Uniformly subsample the training split to at most this many samples.
    pub train_cap: Option<usize>,
    /// Same for the validation and test splits.
    pub eval_cap: Option<usize>,
    pub subsample_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let split = SplitConfig::default();
        let pop = PopularityConfig::default();
        DataSection {
            interactions: PathBuf::new(),
            attributes: None,
            periods: split.periods,
            train_periods: split.train_periods,
            valid_periods: split.valid_periods,
            test_periods: split.test_periods,
            popularity_counting: pop.counting,
            popularity_value: pop.value,
            head_fraction: pop.head_fraction,
            train_cap: None,
            eval_cap: None,
            subsample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub reg: f64,
    pub emb_scale: f64,
    pub emb_init: EmbeddingInit,
    pub max_history: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelSection {
            d: t.d,
            reg: t.reg,
            emb_scale: 1.0,
            emb_init: EmbeddingInit::Cooccurrence,
            max_history: SplitConfig::default().max_history,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub grad_tol: f64,
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            learning_rate: 5.0,
            seed: t.seed,
            grad_tol: t.grad_tol,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasName {
    #[default]
    Popularity,
    Attribute,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    #[default]
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSection {
    pub kind: BiasName,
    /// Weight of the popularity term for the combined kind.
    pub alpha: f64,
    /// Samples over which the bias functional is averaged.
    pub eval_split: SplitName,
}

impl Default for BiasSection {
    fn default() -> Self {
        BiasSection {
            kind: BiasName::Popularity,
            alpha: 0.5,
            eval_split: SplitName::Valid,
        }
    }
}

impl BiasSection {
    pub fn kind(&self) -> BiasKind {
        match self.kind {
            BiasName::Popularity => BiasKind::Popularity,
            BiasName::Attribute => BiasKind::Attribute,
            BiasName::Combined => BiasKind::Combined { alpha: self.alpha },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub lambda_fair: f64,
    pub lambda_acc: f64,
    pub lambda_spa: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub candidate_ratio: f64,
    pub seed: u64,
    pub init_logit: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        let l = Lambdas::default();
        let m = MaskOptConfig::default();
        MaskSection {
            lambda_fair: l.fair,
            lambda_acc: l.acc,
            lambda_spa: l.spa,
            learning_rate: m.learning_rate,
            iterations: m.iterations,
            candidate_ratio: 0.1,
            seed: m.seed,
            init_logit: m.init_logit,
        }
    }
}

impl MaskSection {
    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            fair: self.lambda_fair,
            acc: self.lambda_acc,
            spa: self.lambda_spa,
        }
    }

    pub fn opt_config(&self) -> MaskOptConfig {
        MaskOptConfig {
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            seed: self.seed,
            init_logit: self.init_logit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(flatten)]
    pub metrics: EvalConfig,
    /// K used by the decile report and by grid selection.
    pub report_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metrics: EvalConfig::default(),
            report_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    /// Retrain on the remain set and write `gap.csv` during `run-all`.
    pub gap_check: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            output_dir: PathBuf::from("out"),
            gap_check: true,
        }
    }
}

/// Full run configuration; every field has a default except the interaction
/// file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub bias: BiasSection,
    pub mask: MaskSection,
    pub cg: CgConfig,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative_to(base);
        }
        Ok(cfg)
    }

    /// Interprets relative data paths against `base` (a config file's folder).
    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.interactions);
        if let Some(p) = self.data.attributes.as_mut() {
            fix(p);
        }
        if let Some(p) = self.train.checkpoint.as_mut() {
            fix(p);
        }
    }

    /// Applies [`OUTPUT_DIR_ENV`] when set and non-empty.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.run.output_dir = PathBuf::from(dir);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            periods: self.data.periods,
            train_periods: self.data.train_periods,
            valid_periods: self.data.valid_periods,
            test_periods: self.data.test_periods,
            max_history: self.model.max_history,
        }
    }

    pub fn popularity_config(&self) -> PopularityConfig {
        PopularityConfig {
            counting: self.data.popularity_counting,
            value: self.data.popularity_value,
            head_fraction: self.data.head_fraction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            d: self.model.d,
            reg: self.model.reg,
            emb_scale: self.model.emb_scale,
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed,
            grad_tol: self.train.grad_tol,
            emb_init: self.model.emb_init,
        }
    }

    /// Checks value ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.data.interactions.as_os_str().is_empty() {
            return bad("data.interactions is required".into());
        }
        let mut files = vec![&self.data.interactions];
        files.extend(self.data.attributes.as_ref());
        files.extend(self.train.checkpoint.as_ref());
        for f in files {
            if !f.is_file() {
                return bad(format!("file {} does not exist", f.display()));
            }
        }
        self.eval.metrics.validate()?;
        self.cg.validate()?;
        if self.eval.report_k == 0 {
            return bad("eval.report_k must be >= 1".into());
        }
        if self.model.d < 2 {
            return bad(format!("model.d = {} must be >= 2", self.model.d));
        }
        if !(self.model.reg >= 0.0 && self.model.reg.is_finite()) {
            return bad(format!("model.reg = {} must be >= 0", self.model.reg));
        }
        if self.model.max_history == 0 {
            return bad("model.max_history must be >= 1".into());
        }
        if self.train.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.bias.eval_split == SplitName::Test {
            return bad("bias.eval_split must be train or valid; test data never drives debiasing".into());
        }
        if !(0.0..=1.0).contains(&self.bias.alpha) {
            return bad(format!("bias.alpha = {} outside [0, 1]", self.bias.alpha));
        }
        if self.bias.kind != BiasName::Popularity && self.data.attributes.is_none() {
            return bad("attribute and combined bias need data.attributes".into());
        }
        if !(self.mask.candidate_ratio > 0.0 && self.mask.candidate_ratio <= 1.0) {
            return bad(format!("mask.candidate_ratio = {} outside (0, 1]", self.mask.candidate_ratio));
        }
        if self.mask.iterations == 0 || !(self.mask.learning_rate > 0.0) {
            return bad("mask needs iterations >= 1 and learning_rate > 0".into());
        }
        for (name, v) in [
            ("lambda_fair", self.mask.lambda_fair),
            ("lambda_acc", self.mask.lambda_acc),
            ("lambda_spa", self.mask.lambda_spa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("mask.{name} = {v} must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Pipeline stage, used to tag errors and choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Train,
    Identify,
    Unlearn,
    Evaluate,
    GapCheck,
    Grid,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Train => "train",
            Stage::Identify => "identify",
            Stage::Unlearn => "unlearn",
            Stage::Evaluate => "evaluate",
            Stage::GapCheck => "gap-check",
            Stage::Grid => "grid",
            Stage::Report => "report",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Load => 3,
            Stage::Train => 4,
            Stage::Identify => 5,
            Stage::Unlearn => 6,
            Stage::Evaluate => 7,
            Stage::GapCheck => 8,
            Stage::Grid => 9,
            Stage::Report => 10,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {}: {source}", stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait Tag<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> Tag<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Gradient-evaluation accounting. One unit is a per-sample loss gradient, a
/// bias-functional gradient, or a full-batch Hessian-vector product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub grad_evals: u64,
    pub cg_iters_total: u64,
    pub n_c: u64,
    pub n_u: u64,
    pub n: u64,
    pub epochs: u64,
    pub train_grad_evals: u64,
    pub identify_grad_evals: u64,
    pub identify_cg_iters: u64,
    pub unlearn_grad_evals: u64,
    pub unlearn_cg_iters: u64,
}

impl CostCounters {
    fn add_train(&mut self, evals: u64, epochs: u64, n: u64) {
        self.train_grad_evals += evals;
        self.grad_evals += evals;
        self.epochs += epochs;
        self.n = n;
    }

    fn add_identify(&mut self, evals: u64, cg: u64, n_c: u64) {
        self.identify_grad_evals += evals;
        self.identify_cg_iters += cg;
        self.grad_evals += evals;
        self.cg_iters_total += cg;
        self.n_c += n_c;
    }

    fn add_unlearn(&mut self, evals: u64, cg: u64, n_u: u64) {
        self.unlearn_grad_evals += evals;
        self.unlearn_cg_iters += cg;
        self.grad_evals += evals;
        self.cg_iters_total += cg;
        self.n_u += n_u;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: String,
    pub measured: u64,
    /// `n_c + cg_iters` or `n_u + cg_iters`.
    pub bound_base: u64,
    pub predicted: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub counters: CostCounters,
    /// Least-squares fit of `measured ~ c * bound_base` over the stages.
    pub c: f64,
    pub stages: Vec<StageCost>,
}

/// Least-squares `c` for `measured ~ c * base`; 0 when every base is 0.
pub fn fit_cost_constant(pairs: &[(u64, u64)]) -> f64 {
    let (num, den) = pairs.iter().fold((0.0, 0.0), |(n, d), &(m, b)| {
        (n + m as f64 * b as f64, d + (b as f64) * (b as f64))
    });
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Predicted bounds per stage with a violation flag when the measured count
/// exceeds the bound by more than 10%.
pub fn cost_report(counters: &CostCounters) -> CostReport {
    let raw = [
        ("identify", counters.identify_grad_evals, counters.n_c + counters.identify_cg_iters),
        ("unlearn", counters.unlearn_grad_evals, counters.n_u + counters.unlearn_cg_iters),
    ];
    let c = fit_cost_constant(&raw.iter().map(|&(_, m, b)| (m, b)).collect::<Vec<_>>());
    let stages = raw
        .iter()
        .map(|&(stage, measured, base)| {
            let predicted = c * base as f64;
            StageCost {
                stage: stage.into(),
                measured,
                bound_base: base,
                predicted,
                violation: measured as f64 > 1.1 * predicted,
            }
        })
        .collect();
    CostReport {
        counters: *counters,
        c,
        stages,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    /// 0 holds the most popular items.
    pub decile: usize,
    pub item_count: usize,
    pub rec_share: f64,
    pub target_share: f64,
}

/// Exposure of each popularity decile in top-`k` lists versus its share of
/// test targets. Items are ranked by descending training count and cut into
/// ten contiguous buckets.
pub fn decile_report(
    model: &ModelState,
    test: &SampleSet,
    pop: &PopularityTable,
    k: usize,
    exclude_history: bool,
) -> Result<Vec<DecileRow>> {
    if test.is_empty() {
        return Err(Error::EmptyInput("decile report needs test samples".into()));
    }
    if pop.item_count() != model.item_count {
        return Err(Error::InvalidArgument("popularity table size mismatch".into()));
    }
    let n = pop.item_count();
    let mut decile_of = vec![0usize; n];
    for (pos, &item) in pop.rank_order.iter().enumerate() {
        decile_of[item] = pos * 10 / n;
    }
    let ranks = rankings(model, test, k, exclude_history)?;
    let mut slots = [0u64; 10];
    let mut targets = [0u64; 10];
    let mut sizes = [0usize; 10];
    for &dcl in &decile_of {
        sizes[dcl] += 1;
    }
    for r in &ranks {
        for &i in r {
            slots[decile_of[i]] += 1;
        }
    }
    for s in test {
        targets[decile_of[s.target]] += 1;
    }
    let total_slots: u64 = slots.iter().sum();
    Ok((0..10)
        .map(|dcl| DecileRow {
            decile: dcl,
            item_count: sizes[dcl],
            rec_share: if total_slots == 0 { 0.0 } else { slots[dcl] as f64 / total_slots as f64 },
            target_share: targets[dcl] as f64 / test.len() as f64,
        })
        .collect())
}

pub fn decile_csv(reports: &[(&str, &[DecileRow])]) -> String {
    let mut out = String::from("stage,decile,item_count,rec_share,target_share\n");
    for (stage, rows) in reports {
        for r in rows.iter() {
            let _ = writeln!(
                out,
                "{stage},{},{},{},{}",
                r.decile, r.item_count, r.rec_share, r.target_share
            );
        }
    }
    out
}

/// Loaded and split data shared by all stages.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: SampleSet,
    pub valid: SampleSet,
    pub test: SampleSet,
    pub item_count: usize,
    pub groups: GroupAssignment,
    pub has_groups: bool,
    pub pop: PopularityTable,
    pub index_map: IndexMap,
}

impl Prepared {
    pub fn split(&self, which: SplitName) -> &SampleSet {
        match which {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn groups(&self) -> Option<&GroupAssignment> {
        self.has_groups.then_some(&self.groups)
    }

    pub fn bias_spec<'a>(&'a self, cfg: &RunConfig) -> BiasSpec<'a> {
        let kind = cfg.bias.kind();
        BiasSpec {
            kind,
            eval_set: self.split(cfg.bias.eval_split),
            groups: if kind.needs_groups() { self.groups() } else { None },
            pop: if kind.needs_popularity() { Some(&self.pop) } else { None },
        }
    }

    pub fn eval_context<'a>(&'a self, cfg: &'a RunConfig) -> EvalContext<'a> {
        EvalContext {
            pop: &self.pop,
            groups: self.groups(),
            cfg: &cfg.eval.metrics,
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (log, groups) = load_interactions(&cfg.data.interactions, cfg.data.attributes.as_deref())?;
    let split = temporal_split(&log, &cfg.split_config())?;
    let seed = cfg.data.subsample_seed;
    let cap = |set: &SampleSet, c: Option<usize>, salt: u64| match c {
        Some(c) => subsample(set, c, seed.wrapping_add(salt)),
        None => set.clone(),
    };
    let train = cap(&split.train, cfg.data.train_cap, 0);
    let valid = cap(&split.valid, cfg.data.eval_cap, 1);
    let test = cap(&split.test, cfg.data.eval_cap, 2);
    if train.is_empty() || valid.is_empty() || test.is_empty() {
        return Err(Error::DegenerateSplit("a capped split is empty".into()));
    }
    let pop = compute_popularity(&train, split.item_count, &cfg.popularity_config())?;
    log::info!(
        "data: {} users, {} items, train/valid/test = {}/{}/{}",
        split.user_count,
        split.item_count,
        train.len(),
        valid.len(),
        test.len()
    );
    Ok(Prepared {
        train,
        valid,
        test,
        item_count: split.item_count,
        has_groups: cfg.data.attributes.is_some(),
        groups,
        pop,
        index_map: log.index_map(),
    })
}

/// Result of the identification stage.
#[derive(Debug, Clone)]
pub struct Identified {
    pub candidates: CandidateSet,
    pub cache: InfluenceCache,
    pub mask: MaskState,
    pub selected: Vec<usize>,
    pub bias_value: f64,
}

/// Result of the unlearning stage.
#[derive(Debug, Clone)]
pub struct Unlearned {
    pub model: ModelState,
    pub summary: UnlearnSummary,
}

/// A configured run rooted at its output directory.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub counters: CostCounters,
    out: PathBuf,
    prepared: Option<Prepared>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("out", &self.out).finish_non_exhaustive()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    write_text(path, &(json + "\n"))
}

impl Pipeline {
    /// Validates the configuration and creates the output directory.
    pub fn new(cfg: RunConfig) -> StageResult<Self> {
        cfg.validate().at(Stage::Config)?;
        let out = cfg.run.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).at(Stage::Config)?;
        let stale = out.join(FAILED_FILE);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e)).at(Stage::Config)?;
        }
        Ok(Pipeline {
            cfg,
            counters: CostCounters::default(),
            out,
            prepared: None,
        })
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes the `FAILED` marker for `err`.
    pub fn mark_failed(&self, err: &StageError) {
        let path = self.path(FAILED_FILE);
        if let Err(e) = fs::write(&path, format!("stage={}\nerror={}\n", err.stage.name(), err.source)) {
            log::error!("could not write {}: {e}", path.display());
        }
    }

    pub fn prepared(&mut self) -> StageResult<&Prepared> {
        if self.prepared.is_none() {
            self.prepared = Some(prepare(&self.cfg).at(Stage::Load)?);
        }
        Ok(self.prepared.as_ref().expect("prepared above"))
    }

    /// Echoes the effective configuration to `config.resolved`.
    pub fn write_resolved_config(&self) -> StageResult<()> {
        let mut cfg = self.cfg.clone();
        let abs = |p: &mut PathBuf| {
            if let Ok(c) = p.canonicalize() {
                *p = c;
            }
        };
        abs(&mut cfg.data.interactions);
        if let Some(p) = cfg.data.attributes.as_mut() {
            abs(p);
        }
        if let Some(p) = cfg.train.checkpoint.as_mut() {
            abs(p);
        }
        let text = cfg.to_toml_string().at(Stage::Report)?;
        write_text(&self.path(CONFIG_FILE), &text).at(Stage::Report)
    }

    /// Trains the backbone (or loads `train.checkpoint`) and writes
    /// `model.ckpt` and `index_map.json`.
    pub fn train(&mut self) -> StageResult<ModelState> {
        let tcfg = self.cfg.train_config();
        let ckpt = self.cfg.train.checkpoint.clone();
        let prep = self.prepared()?;
        let n = prep.train.len() as u64;
        let index_map = prep.index_map.clone();
        let (model, evals, epochs) = match ckpt {
            Some(path) => {
                let m = ModelState::load(&path).at(Stage::Train)?;
                if m.item_count != prep.item_count {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint has {} items, data has {}",
                        m.item_count, prep.item_count
                    )))
                    .at(Stage::Train);
                }
                (m, 0, 0)
            }
            None => {
                let t = train_backbone(&prep.train, prep.item_count, &tcfg).at(Stage::Train)?;
                log::info!(
                    "backbone: {} epochs, loss {:.6}, grad norm {:.3e}, converged {}",
                    t.report.epochs_run,
                    t.report.final_loss,
                    t.report.final_grad_norm,
                    t.report.converged
                );
                (t.model, t.report.grad_evals, t.report.epochs_run as u64)
            }
        };
        self.counters.add_train(evals, epochs, n);
        model.save(&self.path(MODEL_FILE)).at(Stage::Train)?;
        index_map.save(&self.path(INDEX_MAP_FILE)).at(Stage::Train)?;
        Ok(model)
    }

    /// Loads `model.ckpt` from the output directory.
    pub fn load_model(&self) -> StageResult<ModelState> {
        ModelState::load(&self.path(MODEL_FILE)).at(Stage::Load)
    }

    /// Influence scores, mask optimization and selection. Writes
    /// `influence.csv` and `mask.csv`; never touches the checkpoint.
    pub fn identify(&mut self, model: &ModelState) -> StageResult<Identified> {
        let lambdas = self.cfg.mask.lambdas();
        let mcfg = self.cfg.mask.opt_config();
        let (cache, candidates, bias_value) = self.influence(model)?;
        let mask = optimize_mask(&candidates, &cache, lambdas, &mcfg).at(Stage::Identify)?;
        let selected = select_unlearn_set(&mask);
        log::info!("selected {} of {} candidates", selected.len(), candidates.len());
        write_influence_csv(&self.path(INFLUENCE_FILE), &cache).at(Stage::Identify)?;
        write_mask_csv(&self.path(MASK_FILE), &mask, &cache).at(Stage::Identify)?;
        Ok(Identified {
            candidates,
            cache,
            mask,
            selected,
            bias_value,
        })
    }

    /// Candidate draw, influence vector and per-candidate scores.
    pub fn influence(&mut self, model: &ModelState) -> StageResult<(InfluenceCache, CandidateSet, f64)> {
        let cg = self.cfg.cg;
        let ratio = self.cfg.mask.candidate_ratio;
        let seed = self.cfg.mask.seed;
        let cfg = self.cfg.clone();
        let prep = self.prepared()?;
        let spec = prep.bias_spec(&cfg);
        spec.validate().at(Stage::Identify)?;
        let candidates = sample_candidates(&prep.train, ratio, seed).at(Stage::Identify)?;
        let iv = precompute_influence_vector(model, &prep.train, &spec, &cg).at(Stage::Identify)?;
        let fp = cache_fingerprint(model, &spec, &cg);
        let cache = influence_scores(model, &candidates, &prep.train, &iv.s, &fp).at(Stage::Identify)?;
        log::info!(
            "bias {:.6}, |grad B| {:.3e}, CG {} iterations (residual {:.2e})",
            iv.bias_value,
            iv.bias_grad_norm,
            iv.cg.iterations,
            iv.cg.residual
        );
        let n_c = candidates.len() as u64;
        self.counters.add_identify(
            n_c + 1 + iv.cg.operator_calls as u64,
            iv.cg.iterations as u64,
            n_c,
        );
        Ok((cache, candidates, iv.bias_value))
    }

    /// One-step unlearning of `selected`. Writes `model_debiased.ckpt` and
    /// `unlearn.json`; never touches the mask file.
    pub fn unlearn(&mut self, model: &ModelState, selected: &[usize]) -> StageResult<Unlearned> {
        let cg = self.cfg.cg;
        let prep = self.prepared()?;
        let outcome = compute_delta(model, &prep.train, selected, &cg).at(Stage::Unlearn)?;
        let debiased = apply_update(model, &outcome.delta).at(Stage::Unlearn)?;
        let (before, after) = if selected.is_empty() {
            (0.0, 0.0)
        } else {
            let remain = prep.train.without(selected);
            let b = crate::recmodel::risk_and_grad(model, &remain).at(Stage::Unlearn)?.1.norm();
            let a = crate::recmodel::risk_and_grad(&debiased, &remain).at(Stage::Unlearn)?.1.norm();
            (b, a)
        };
        let summary = UnlearnSummary {
            n: outcome.n,
            unlearn_count: outcome.unlearn_count,
            delta_norm: outcome.delta.norm(),
            cg_iterations: outcome.cg_iterations,
            cg_residual: outcome.cg_residual,
            cg_converged: outcome.cg_converged,
            damping: cg.damping,
            stationarity_before: before,
            stationarity_after: after,
        };
        self.counters.add_unlearn(
            outcome.grad_evals,
            outcome.cg_iterations as u64,
            selected.len() as u64,
        );
        debiased.save(&self.path(DEBIASED_FILE)).at(Stage::Unlearn)?;
        summary.write(&self.path(UNLEARN_FILE)).at(Stage::Unlearn)?;
        Ok(Unlearned {
            model: debiased,
            summary,
        })
    }

    /// Test metrics and decile exposure for the backbone and, when given,
    /// the debiased model. Writes `metrics.csv` and `decile_report.csv`.
    pub fn evaluate(
        &mut self,
        backbone: &ModelState,
        debiased: Option<&ModelState>,
    ) -> StageResult<(EvalReport, Option<EvalReport>)> {
        let cfg = self.cfg.clone();
        let prep = self.prepared()?;
        let ctx = prep.eval_context(&cfg);
        let base = ctx.evaluate(backbone, &prep.test).at(Stage::Evaluate)?;
        let deb = debiased.map(|m| ctx.evaluate(m, &prep.test)).transpose().at(Stage::Evaluate)?;
        let k = cfg.eval.report_k;
        let excl = cfg.eval.metrics.exclude_history;
        let base_dec = decile_report(backbone, &prep.test, &prep.pop, k, excl).at(Stage::Evaluate)?;
        let deb_dec = debiased
            .map(|m| decile_report(m, &prep.test, &prep.pop, k, excl))
            .transpose()
            .at(Stage::Evaluate)?;

        let mut reports = vec![("backbone", &base)];
        let mut deciles = vec![("backbone", base_dec.as_slice())];
        if let (Some(r), Some(d)) = (&deb, &deb_dec) {
            reports.push(("debiased", r));
            deciles.push(("debiased", d.as_slice()));
        }
        write_metrics_csv(&self.path(METRICS_FILE), &reports).at(Stage::Evaluate)?;
        write_text(&self.path(DECILE_FILE), &decile_csv(&deciles)).at(Stage::Evaluate)?;
        Ok((base, deb))
    }

    /// Retrains on the remain set and compares it with the updated model.
    /// Writes `gap.csv`.
    pub fn gap_check(
        &mut self,
        backbone: &ModelState,
        debiased: &ModelState,
        selected: &[usize],
    ) -> StageResult<crate::unlearn::GapReport> {
        let cfg = self.cfg.clone();
        let tcfg = cfg.train_config();
        let prep = self.prepared()?;
        let retrained = retrain_oracle(&prep.train, selected, backbone, &tcfg).at(Stage::GapCheck)?;
        let remain = prep.train.without(selected);
        let ctx = prep.eval_context(&cfg);
        let report = gap_report(debiased, &retrained.model, backbone, &remain, &prep.test, &ctx)
            .at(Stage::GapCheck)?;
        write_gap_csv(&self.path(GAP_FILE), &report).at(Stage::GapCheck)?;
        Ok(report)
    }

    /// Writes `cost.json`.
    pub fn write_cost(&self) -> StageResult<CostReport> {
        let report = cost_report(&self.counters);
        for s in report.stages.iter().filter(|s| s.violation) {
            log::warn!(
                "{} stage used {} gradient evaluations, above 1.1 x predicted {:.1}",
                s.stage,
                s.measured,
                s.predicted
            );
        }
        write_json(&self.path(COST_FILE), &report).at(Stage::Report)?;
        Ok(report)
    }

    /// Every stage in order, writing the full report bundle.
    pub fn run_all(&mut self) -> StageResult<RunOutcome> {
        self.write_resolved_config()?;
        let backbone = self.train()?;
        let ident = self.identify(&backbone)?;
        let unl = self.unlearn(&backbone, &ident.selected)?;
        let (base, deb) = self.evaluate(&backbone, Some(&unl.model))?;
        let gap = if self.cfg.run.gap_check {
            Some(self.gap_check(&backbone, &unl.model, &ident.selected)?)
        } else {
            None
        };
        let cost = self.write_cost()?;
        Ok(RunOutcome {
            backbone,
            debiased: unl.model,
            selected: ident.selected,
            backbone_metrics: base,
            debiased_metrics: deb.expect("debiased model evaluated"),
            gap,
            cost,
            unlearn: unl.summary,
        })
    }

    /// `identify` from the stored checkpoint.
    pub fn run_identify(&mut self) -> StageResult<Identified> {
        let model = self.load_model()?;
        self.identify(&model)
    }

    /// `unlearn` from the stored checkpoint and mask file.
    pub fn run_unlearn(&mut self) -> StageResult<Unlearned> {
        let model = self.load_model()?;
        let selected = read_selected_ids(&self.path(MASK_FILE)).at(Stage::Load)?;
        let out = self.unlearn(&model, &selected)?;
        self.write_cost()?;
        Ok(out)
    }

    /// `evaluate` from the stored checkpoints; the debiased model is optional.
    pub fn run_evaluate(&mut self) -> StageResult<(EvalReport, Option<EvalReport>)> {
        let model = self.load_model()?;
        let deb_path = self.path(DEBIASED_FILE);
        let deb = if deb_path.is_file() {
            Some(ModelState::load(&deb_path).at(Stage::Load)?)
        } else {
            None
        };
        self.evaluate(&model, deb.as_ref())
    }

    /// `gap-check` from the stored checkpoints and mask file.
    pub fn run_gap_check(&mut self) -> StageResult<crate::unlearn::GapReport> {
        let model = self.load_model()?;
        let deb = ModelState::load(&self.path(DEBIASED_FILE)).at(Stage::Load)?;
        let selected = read_selected_ids(&self.path(MASK_FILE)).at(Stage::Load)?;
        self.gap_check(&model, &deb, &selected)
    }

    /// Reads `influence.csv` back, checking it matches the current model.
    pub fn load_influence(&mut self, model: &ModelState) -> StageResult<InfluenceCache> {
        let cg = self.cfg.cg;
        let cfg = self.cfg.clone();
        let path = self.path(INFLUENCE_FILE);
        let prep = self.prepared()?;
        let cache = read_influence_csv(&path).at(Stage::Load)?;
        let expected = cache_fingerprint(model, &prep.bias_spec(&cfg), &cg);
        if cache.fingerprint != expected {
            return Err(Error::format("influence.csv", "fingerprint does not match the model and bias spec"))
                .at(Stage::Load);
        }
        Ok(cache)
    }

    /// Hyperparameter grid over `{10^i : i = -3..=2}` for the three
    /// lambdas, scored by the validation F-score at `eval.report_k`. Writes
    /// `grid.csv` and returns the best lambdas (earliest on ties).
    pub fn grid(&mut self, model: &ModelState) -> StageResult<GridOutcome> {
        let (cache, candidates, _) = self.influence(model)?;
        let cfg = self.cfg.clone();
        let mcfg = cfg.mask.opt_config();
        let prep = self.prepared.as_ref().expect("prepared by influence");
        let ctx = prep.eval_context(&cfg);
        let k = cfg.eval.report_k;
        let score = |m: &ModelState| -> Result<GridScore> {
            let kcfg = EvalConfig {
                ks: vec![k],
                ..cfg.eval.metrics.clone()
            };
            let r = evaluate_model(m, &prep.valid, ctx.pop, ctx.groups, &kcfg)?;
            let row = &r.rows[0];
            let f = match cfg.bias.kind() {
                BiasKind::Popularity => row.f_pop,
                BiasKind::Attribute => row.f_attr.ok_or_else(missing_groups)?,
                BiasKind::Combined { alpha } => {
                    alpha * row.f_pop + (1.0 - alpha) * row.f_attr.ok_or_else(missing_groups)?
                }
            };
            Ok(GridScore { hr: row.hr, apt: row.apt, f })
        };

        let solver = GridSolver::new(model, &prep.train, &candidates, &cfg.cg).at(Stage::Grid)?;
        let mut by_set: BTreeMap<Vec<usize>, GridScore> = BTreeMap::new();
        let mut rows = Vec::new();
        let grid = lambda_grid();
        for &fair in &grid {
            for &acc in &grid {
                for &spa in &grid {
                    let lambdas = Lambdas { fair, acc, spa };
                    let mask = optimize_mask(&candidates, &cache, lambdas, &mcfg).at(Stage::Grid)?;
                    let selected = select_unlearn_set(&mask);
                    let s = match by_set.get(&selected) {
                        Some(s) => *s,
                        None => {
                            let delta = solver.delta(model, &prep.train, &selected).at(Stage::Grid)?;
                            let m = apply_update(model, &delta).at(Stage::Grid)?;
                            let s = score(&m).at(Stage::Grid)?;
                            by_set.insert(selected.clone(), s);
                            s
                        }
                    };
                    rows.push(GridRow {
                        lambdas,
                        selected: selected.len(),
                        score: s,
                    });
                }
            }
        }
        let best = rows
            .iter()
            .fold(None::<&GridRow>, |b, r| match b {
                Some(b) if b.score.f >= r.score.f => Some(b),
                _ => Some(r),
            })
            .expect("grid is non-empty")
            .clone();
        log::info!(
            "grid: {} settings, {} distinct sets; best {:?} with F {:.6}",
            rows.len(),
            by_set.len(),
            best.lambdas,
            best.score.f
        );
        write_text(&self.path(GRID_FILE), &grid_csv(&rows)).at(Stage::Grid)?;
        Ok(GridOutcome { rows, best })
    }
}

/// Update solver for the grid search. The Hessian is shared by every
/// candidate set, so when it is small enough it is factored once and each
/// set costs one triangular solve; otherwise each set runs damped CG.
enum GridSolver {
    Dense {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        grads: BTreeMap<usize, Vec<f64>>,
        n: usize,
    },
    Cg(CgConfig),
}

impl GridSolver {
    fn new(model: &ModelState, train: &SampleSet, candidates: &CandidateSet, cg: &CgConfig) -> Result<Self> {
        if model.dim() > crate::recmodel::MAX_DENSE_DIM {
            return Ok(GridSolver::Cg(*cg));
        }
        let mut h = crate::recmodel::exact_hessian(model, train)?;
        for i in 0..h.nrows() {
            h[(i, i)] += cg.damping;
        }
        let Some(chol) = h.cholesky() else {
            return Ok(GridSolver::Cg(*cg));
        };
        let mut grads = BTreeMap::new();
        for &id in &candidates.sample_ids {
            let s = train
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("candidate {id} outside training set")))?;
            grads.insert(id, crate::recmodel::sample_loss_and_grad(model, s)?.1.into_inner());
        }
        Ok(GridSolver::Dense {
            chol,
            grads,
            n: train.len(),
        })
    }

    fn delta(&self, model: &ModelState, train: &SampleSet, selected: &[usize]) -> Result<Vec<f64>> {
        match self {
            GridSolver::Cg(cfg) => Ok(compute_delta(model, train, selected, cfg)?.delta.into_inner()),
            GridSolver::Dense { chol, grads, n } => {
                if selected.len() == *n && *n > 0 {
                    return Err(Error::DegenerateRemain);
                }
                let mut g = nalgebra::DVector::<f64>::zeros(model.dim());
                for id in selected {
                    let gk = grads
                        .get(id)
                        .ok_or_else(|| Error::InvalidArgument(format!("selected id {id} is not a candidate")))?;
                    for (a, b) in g.iter_mut().zip(gk) {
                        *a += b;
                    }
                }
                let x = chol.solve(&g);
                Ok(x.iter().map(|v| v / *n as f64).collect())
            }
        }
    }
}

fn missing_groups() -> Error {
    Error::GroupEmpty("validation split lacks one of the two user groups".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub hr: f64,
    pub apt: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub lambdas: Lambdas,
    pub selected: usize,
    pub score: GridScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best: GridRow,
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("lambda_fair,lambda_acc,lambda_spa,selected,valid_hr,valid_apt,valid_f\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.lambdas.fair, r.lambdas.acc, r.lambdas.spa, r.selected, r.score.hr, r.score.apt, r.score.f
        );
    }
    out
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub backbone: ModelState,
    pub debiased: ModelState,
    pub selected: Vec<usize>,
    pub backbone_metrics: EvalReport,
    pub debiased_metrics: EvalReport,
    pub gap: Option<crate::unlearn::GapReport>,
    pub cost: CostReport,
    pub unlearn: UnlearnSummary,
}

/// Runs every stage, writing the `FAILED` marker on error.
pub fn run_pipeline(cfg: RunConfig) -> StageResult<RunOutcome> {
    let mut p = Pipeline::new(cfg)?;
    p.run_all().inspect_err(|e| p.mark_failed(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.data.interactions = PathBuf::from("x.tsv");
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg = RunConfig::from_toml_str("[eval]\ntau = 3.0\n[cg]\ndamping = 0.5\n").unwrap();
        assert_eq!(cfg.eval.metrics.tau, 3.0);
        assert_eq!(cfg.eval.metrics.ks, vec![5, 10, 20]);
        assert_eq!(cfg.cg.damping, 0.5);
        assert_eq!(cfg.cg.max_iter, CgConfig::default().max_iter);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[mask]\nlambda_fiar = 1.0\n").is_err());
    }

    #[test]
    fn missing_file_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.data.interactions = PathBuf::from("/nonexistent/file.tsv");
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cost_fit_is_least_squares() {
        assert_eq!(fit_cost_constant(&[(0, 0)]), 0.0);
        assert!((fit_cost_constant(&[(20, 10), (40, 20)]) - 2.0).abs() < 1e-12);
        let r = cost_report(&CostCounters::default());
        assert!(r.stages.iter().all(|s| s.measured == 0 && !s.violation));
    }

    #[test]
    fn stage_codes_are_distinct() {
        let all = [
            Stage::Config,
            Stage::Load,
            Stage::Train,
            Stage::Identify,
            Stage::Unlearn,
            Stage::Evaluate,
            Stage::GapCheck,
            Stage::Grid,
            Stage::Report,
        ];
        let mut codes: Vec<i32> = all.iter().map(|s| s.exit_code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(codes.iter().all(|&c| c > 1));
    }
}
