//! Interaction logs, temporal splits, popularity statistics and candidate pools.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single timestamped interaction with dense user/item indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Raw interactions plus the id <-> index maps built at load time.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub events: Vec<Event>,
    /// `user_ids[idx]` is the original id of dense user `idx`.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionLog {
    /// Builds a log from `(user, item, timestamp)` triples, assigning dense
    /// indices in first-appearance order.
    pub fn from_triples<U, I>(rows: impl IntoIterator<Item = (U, I, i64)>) -> Result<Self>
    where
        U: AsRef<str>,
        I: AsRef<str>,
    {
        let mut builder = IndexBuilder::default();
        for (u, i, t) in rows {
            builder.push(u.as_ref(), i.as_ref(), t);
        }
        builder.finish()
    }

    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn index_map(&self) -> IndexMap {
        IndexMap {
            users: self.user_ids.clone(),
            items: self.item_ids.clone(),
        }
    }
}

#[derive(Default)]
struct IndexBuilder {
    users: HashMap<String, usize>,
    items: HashMap<String, usize>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    events: Vec<Event>,
}

impl IndexBuilder {
    fn intern(map: &mut HashMap<String, usize>, ids: &mut Vec<String>, key: &str) -> usize {
        if let Some(&idx) = map.get(key) {
            return idx;
        }
        let idx = ids.len();
        map.insert(key.to_string(), idx);
        ids.push(key.to_string());
        idx
    }

    fn push(&mut self, user: &str, item: &str, timestamp: i64) {
        let user = Self::intern(&mut self.users, &mut self.user_ids, user);
        let item = Self::intern(&mut self.items, &mut self.item_ids, item);
        self.events.push(Event {
            user,
            item,
            timestamp,
        });
    }

    fn finish(self) -> Result<InteractionLog> {
        if self.events.is_empty() {
            return Err(Error::EmptyInput("interaction log has no events".into()));
        }
        Ok(InteractionLog {
            events: self.events,
            user_ids: self.user_ids,
            item_ids: self.item_ids,
        })
    }
}

/// Persisted id <-> index sidecar (`index_map.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IndexMap {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("index map", e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("index map", e.to_string()))
    }
}

/// Sensitive-attribute group of a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    G0,
    G1,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub group_of: Vec<Group>,
}

impl GroupAssignment {
    pub fn unknown(user_count: usize) -> Self {
        GroupAssignment {
            group_of: vec![Group::Unknown; user_count],
        }
    }

    pub fn group(&self, user: usize) -> Group {
        self.group_of.get(user).copied().unwrap_or(Group::Unknown)
    }

    pub fn count(&self, g: Group) -> usize {
        self.group_of.iter().filter(|&&x| x == g).count()
    }

    /// Both labelled groups hold at least one user.
    pub fn has_both_groups(&self) -> bool {
        self.count(Group::G0) > 0 && self.count(Group::G1) > 0
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else if line.contains("::") {
        line.split("::").map(str::trim).collect()
    } else {
        line.split(',').map(str::trim).collect()
    }
}

fn parse_timestamp(field: &str) -> Option<i64> {
    if let Ok(t) = field.parse::<i64>() {
        return Some(t);
    }
    // Tolerate integral floats such as "978300760.0".
    match field.parse::<f64>() {
        Ok(f) if f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e18 => Some(f as i64),
        _ => None,
    }
}

/// Parses an interactions file (`user<TAB>item<TAB>timestamp[<TAB>rating]`,
/// comma- or `::`-separated also accepted, header optional).
pub fn parse_interactions(path: &Path, text: &str) -> Result<InteractionLog> {
    let mut builder = IndexBuilder::default();
    let mut seen_data = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = split_fields(line);
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        if fields.len() < 3 {
            return Err(parse_err(format!(
                "expected user, item, timestamp; found {} field(s)",
                fields.len()
            )));
        }
        // `user::item::rating::timestamp` is the MovieLens `.dat` layout.
        let ts_field = if line.contains("::") && fields.len() >= 4 {
            fields[3]
        } else {
            fields[2]
        };
        let ts = match parse_timestamp(ts_field) {
            Some(t) => t,
            None if !seen_data => {
                // First non-blank row with a non-numeric timestamp is a header.
                seen_data = true;
                continue;
            }
            None => return Err(parse_err(format!("invalid timestamp {ts_field:?}"))),
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        seen_data = true;
        builder.push(fields[0], fields[1], ts);
    }
    builder.finish()
}

fn parse_group_label(label: &str, dynamic: &mut Vec<String>) -> std::result::Result<Group, String> {
    let lower = label.to_ascii_lowercase();
    match lower.as_str() {
        "" | "unknown" | "?" | "na" | "none" => return Ok(Group::Unknown),
        "0" | "g0" => return Ok(Group::G0),
        "1" | "g1" => return Ok(Group::G1),
        _ => {}
    }
    if let Some(pos) = dynamic.iter().position(|l| l == label) {
        return Ok(if pos == 0 { Group::G0 } else { Group::G1 });
    }
    if dynamic.len() >= 2 {
        return Err(format!(
            "more than two group labels ({:?}, {:?}, {:?})",
            dynamic[0], dynamic[1], label
        ));
    }
    dynamic.push(label.to_string());
    Ok(if dynamic.len() == 1 { Group::G0 } else { Group::G1 })
}

/// Parses `user<TAB>group_label`. Labels `0`/`G0` and `1`/`G1` map directly;
/// any other two labels map to G0/G1 in first-appearance order. Users absent
/// from the file, or absent from the log, stay `Unknown`.
pub fn parse_attributes(path: &Path, text: &str, log: &InteractionLog) -> Result<GroupAssignment> {
    let index: HashMap<&str, usize> = log
        .user_ids
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();
    let mut groups = GroupAssignment::unknown(log.user_count());
    let mut labels = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected user, group_label".into(),
            });
        }
        if lineno == 0 && fields[0].eq_ignore_ascii_case("user") {
            continue;
        }
        let group = parse_group_label(fields[1], &mut labels).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        })?;
        if let Some(&u) = index.get(fields[0]) {
            groups.group_of[u] = group;
        }
    }
    Ok(groups)
}

/// Loads an interaction log and (optionally) its user attribute file.
pub fn load_interactions(
    path: &Path,
    attr_path: Option<&Path>,
) -> Result<(InteractionLog, GroupAssignment)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let log = parse_interactions(path, &text)?;
    let groups = match attr_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_attributes(p, &text, &log)?
        }
        None => GroupAssignment::unknown(log.user_count()),
    };
    Ok((log, groups))
}

/// A `(history, target)` training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Position of the sample in its owning [`SampleSet`].
    pub sample_id: usize,
    pub user: usize,
    /// Chronologically ordered history, most recent last.
    pub history: Vec<usize>,
    pub target: usize,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    /// Wraps samples, renumbering `sample_id` to match positions.
    pub fn new(mut samples: Vec<Sample>) -> Self {
        for (i, s) in samples.iter_mut().enumerate() {
            s.sample_id = i;
        }
        SampleSet { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn get(&self, id: usize) -> Option<&Sample> {
        self.samples.get(id)
    }

    /// Samples whose ids are not in `removed`, in original order and with
    /// their original ids kept.
    pub fn without(&self, removed: &[usize]) -> SampleSet {
        let mut drop = vec![false; self.samples.len()];
        for &id in removed {
            if id < drop.len() {
                drop[id] = true;
            }
        }
        SampleSet {
            samples: self
                .samples
                .iter()
                .filter(|s| !drop[s.sample_id])
                .cloned()
                .collect(),
        }
    }

    /// Subset by ids, in the order given, original ids kept.
    pub fn select(&self, ids: &[usize]) -> SampleSet {
        SampleSet {
            samples: ids.iter().filter_map(|&i| self.samples.get(i).cloned()).collect(),
        }
    }

    pub fn max_timestamp(&self) -> Option<i64> {
        self.samples.iter().map(|s| s.timestamp).max()
    }

    pub fn min_timestamp(&self) -> Option<i64> {
        self.samples.iter().map(|s| s.timestamp).min()
    }
}

impl<'a> IntoIterator for &'a SampleSet {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;
    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub periods: usize,
    pub train_periods: usize,
    pub valid_periods: usize,
    pub test_periods: usize,
    pub max_history: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            periods: 10,
            train_periods: 8,
            valid_periods: 1,
            test_periods: 1,
            max_history: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: SampleSet,
    pub valid: SampleSet,
    pub test: SampleSet,
    /// Inclusive upper timestamp of each period.
    pub period_boundaries: Vec<i64>,
    pub item_count: usize,
    pub user_count: usize,
}

/// Splits a log into train/valid/test by global timestamp quantiles.
///
/// An event belongs to the first period whose boundary is `>=` its timestamp.
/// Every event with at least one earlier event of the same user becomes a
/// sample whose history is the user's preceding items (capped at
/// `max_history`), regardless of which period those items fall in. The sample
/// is assigned to the split owning its target's period.
pub fn temporal_split(log: &InteractionLog, cfg: &SplitConfig) -> Result<SplitDataset> {
    if cfg.periods == 0 || cfg.train_periods + cfg.valid_periods + cfg.test_periods != cfg.periods {
        return Err(Error::InvalidArgument(format!(
            "periods ({}) must equal train+valid+test ({}+{}+{})",
            cfg.periods, cfg.train_periods, cfg.valid_periods, cfg.test_periods
        )));
    }
    if cfg.max_history == 0 {
        return Err(Error::InvalidArgument("max_history must be >= 1".into()));
    }
    if log.events.is_empty() {
        return Err(Error::EmptyInput("interaction log has no events".into()));
    }

    let mut ts: Vec<i64> = log.events.iter().map(|e| e.timestamp).collect();
    ts.sort_unstable();
    let m = ts.len();
    let boundaries: Vec<i64> = (1..=cfg.periods)
        .map(|j| {
            let pos = (j * m).div_ceil(cfg.periods);
            ts[pos.max(1) - 1]
        })
        .collect();
    let period_of = |t: i64| boundaries.partition_point(|&b| b < t);

    let mut by_user: Vec<Vec<(i64, usize, usize)>> = vec![Vec::new(); log.user_count()];
    for (order, e) in log.events.iter().enumerate() {
        by_user[e.user].push((e.timestamp, order, e.item));
    }

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let valid_start = cfg.train_periods;
    let test_start = cfg.train_periods + cfg.valid_periods;
    for (user, events) in by_user.iter_mut().enumerate() {
        events.sort_unstable();
        for j in 1..events.len() {
            let (t, _, target) = events[j];
            let lo = j.saturating_sub(cfg.max_history);
            let sample = Sample {
                sample_id: 0,
                user,
                history: events[lo..j].iter().map(|e| e.2).collect(),
                target,
                timestamp: t,
            };
            let p = period_of(t);
            if p < valid_start {
                train.push(sample);
            } else if p < test_start {
                valid.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    for (name, set) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if set.is_empty() {
            return Err(Error::DegenerateSplit(format!("{name} split received no samples")));
        }
    }
    let order = |v: &mut Vec<Sample>| v.sort_by_key(|s| (s.timestamp, s.user, s.history.len()));
    order(&mut train);
    order(&mut valid);
    order(&mut test);
    Ok(SplitDataset {
        train: SampleSet::new(train),
        valid: SampleSet::new(valid),
        test: SampleSet::new(test),
        period_boundaries: boundaries,
        item_count: log.item_count(),
        user_count: log.user_count(),
    })
}

/// Uniformly subsamples a set without replacement (order preserved), as done
/// when capping the training or test set size.
pub fn subsample(set: &SampleSet, cap: usize, seed: u64) -> SampleSet {
    if set.len() <= cap {
        return set.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, set.len(), cap).into_vec();
    ids.sort_unstable();
    SampleSet::new(ids.into_iter().map(|i| set.samples[i].clone()).collect())
}

/// Which interactions count toward item popularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityCounting {
    #[default]
    TargetsOnly,
    /// Targets plus every occurrence in histories.
    Occurrences,
}

/// Mapping from raw counts to popularity values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityValue {
    /// `ln(1 + count)`
    #[default]
    LogCount,
    RawCount,
    /// `count / max_count`
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopularityConfig {
    pub counting: PopularityCounting,
    pub value: PopularityValue,
    pub head_fraction: f64,
}

impl Default for PopularityConfig {
    fn default() -> Self {
        PopularityConfig {
            counting: PopularityCounting::TargetsOnly,
            value: PopularityValue::LogCount,
            head_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    pub count: Vec<u64>,
    pub v_pop: Vec<f64>,
    /// Head items sorted ascending.
    pub head_set: Vec<usize>,
    pub tail_set: Vec<usize>,
    pub is_head: Vec<bool>,
    /// Items ordered by descending count, ties by ascending index.
    pub rank_order: Vec<usize>,
}

impl PopularityTable {
    pub fn item_count(&self) -> usize {
        self.count.len()
    }

    pub fn is_tail(&self, item: usize) -> bool {
        !self.is_head[item]
    }
}

pub fn compute_popularity(
    train: &SampleSet,
    item_count: usize,
    cfg: &PopularityConfig,
) -> Result<PopularityTable> {
    if train.is_empty() {
        return Err(Error::EmptyInput("popularity needs training samples".into()));
    }
    if !(cfg.head_fraction > 0.0 && cfg.head_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "head_fraction {} outside (0, 1]",
            cfg.head_fraction
        )));
    }
    let mut count = vec![0u64; item_count];
    for s in train {
        count[s.target] += 1;
        if cfg.counting == PopularityCounting::Occurrences {
            for &h in &s.history {
                count[h] += 1;
            }
        }
    }
    let max = count.iter().copied().max().unwrap_or(0) as f64;
    let v_pop = count
        .iter()
        .map(|&c| match cfg.value {
            PopularityValue::LogCount => (c as f64).ln_1p(),
            PopularityValue::RawCount => c as f64,
            PopularityValue::Normalized if max > 0.0 => c as f64 / max,
            PopularityValue::Normalized => 0.0,
        })
        .collect();

    let mut rank_order: Vec<usize> = (0..item_count).collect();
    rank_order.sort_by(|&a, &b| count[b].cmp(&count[a]).then(a.cmp(&b)));
    let head_size = ceil_fraction(cfg.head_fraction, item_count);
    let mut is_head = vec![false; item_count];
    for &i in &rank_order[..head_size] {
        is_head[i] = true;
    }
    let head_set = (0..item_count).filter(|&i| is_head[i]).collect();
    let tail_set = (0..item_count).filter(|&i| !is_head[i]).collect();
    Ok(PopularityTable {
        count,
        v_pop,
        head_set,
        tail_set,
        is_head,
        rank_order,
    })
}

/// `ceil(fraction * n)`, robust to representation error such as `0.3 * 10`.
pub(crate) fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 * raw.abs().max(1.0) {
        rounded
    } else {
        raw.ceil()
    };
    (k as usize).min(n)
}

/// The uniformly drawn pool of removal candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    /// Sorted ascending.
    pub sample_ids: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Draws `ceil(ratio * |train|)` distinct training sample ids.
pub fn sample_candidates(train: &SampleSet, ratio: f64, seed: u64) -> Result<CandidateSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "candidate ratio {ratio} outside (0, 1]"
        )));
    }
    let n = train.len();
    let k = ceil_fraction(ratio, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(CandidateSet {
        sample_ids: ids,
        seed,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("fixture.tsv")
    }

    fn sample(target: usize) -> Sample {
        Sample {
            sample_id: 0,
            user: 0,
            history: vec![0],
            target,
            timestamp: 0,
        }
    }

    #[test]
    fn three_row_fixture() {
        let log = parse_interactions(&p(), "u1\ti1\t10\nu2\ti2\t11\nu1\ti2\t12\n").unwrap();
        assert_eq!(log.user_count(), 2);
        assert_eq!(log.item_count(), 2);
        assert_eq!(log.events.len(), 3);
        assert_eq!(log.events[2], Event { user: 0, item: 1, timestamp: 12 });
    }

    #[test]
    fn header_and_delimiters() {
        let csv = "user,item,timestamp,rating\na,x,1,5\nb,y,2,3\n";
        let log = parse_interactions(&p(), csv).unwrap();
        assert_eq!(log.events.len(), 2);
        let ml = "1::1193::5::978300760\n1::661::3::978302109\n";
        let log = parse_interactions(&p(), ml).unwrap();
        assert_eq!(log.events[0].timestamp, 978300760);
        assert_eq!(log.events[1].timestamp, 978302109);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_interactions(&p(), "a\tx\t1\nb\ty\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        let err = parse_interactions(&p(), "a\tx\t1\nb\ty\tnope\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            parse_interactions(&p(), "\n\n"),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            parse_interactions(&p(), "user\titem\ttimestamp\n"),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn missing_attribute_user_is_unknown() {
        let log = parse_interactions(&p(), "a\tx\t1\nb\ty\t2\nc\tx\t3\n").unwrap();
        let groups = parse_attributes(&p(), "a\tM\nb\tF\nzz\tM\n", &log).unwrap();
        assert_eq!(groups.group_of, vec![Group::G0, Group::G1, Group::Unknown]);
        let err = parse_attributes(&p(), "a\tM\nb\tF\nc\tX\n", &log).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn single_timestamp_is_degenerate() {
        let rows: Vec<_> = (0..30).map(|i| (format!("u{}", i % 3), format!("i{i}"), 7)).collect();
        let log = InteractionLog::from_triples(rows).unwrap();
        let err = temporal_split(&log, &SplitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateSplit(_)));
    }

    #[test]
    fn split_rejects_bad_period_counts() {
        let log = InteractionLog::from_triples([("a", "x", 1), ("a", "y", 2)]).unwrap();
        let cfg = SplitConfig { periods: 10, train_periods: 7, ..Default::default() };
        assert!(matches!(temporal_split(&log, &cfg), Err(Error::InvalidArgument(_))));
    }

    // Hand-enumerated 20-event fixture, 5 periods (3 train, 1 valid, 1 test).
    // Timestamps 1..=20 give boundaries at the 4th, 8th, ... smallest value:
    // [4, 8, 12, 16, 20]. Train targets have t <= 12, valid 13..=16, test 17..=20.
    #[test]
    fn twenty_event_fixture_membership() {
        let mut rows = Vec::new();
        // user a: items at t = 1, 5, 9, 13, 17
        // user b: items at t = 2, 6, 10, 14, 18
        // user c: items at t = 3, 7, 11, 15, 19
        // user d: items at t = 4, 8, 12, 16, 20
        for (k, u) in ["a", "b", "c", "d"].iter().enumerate() {
            for step in 0..5 {
                let t = (k + 1 + 4 * step) as i64;
                rows.push((u.to_string(), format!("{u}{step}"), t));
            }
        }
        let log = InteractionLog::from_triples(rows).unwrap();
        let cfg = SplitConfig {
            periods: 5,
            train_periods: 3,
            valid_periods: 1,
            test_periods: 1,
            max_history: 2,
        };
        let split = temporal_split(&log, &cfg).unwrap();
        assert_eq!(split.period_boundaries, vec![4, 8, 12, 16, 20]);
        let ts = |s: &SampleSet| s.iter().map(|x| x.timestamp).collect::<Vec<_>>();
        assert_eq!(ts(&split.train), vec![5, 6, 7, 8, 9, 10, 11, 12]);
        assert_eq!(ts(&split.valid), vec![13, 14, 15, 16]);
        assert_eq!(ts(&split.test), vec![17, 18, 19, 20]);
        // user a's test sample at t=17 has the two previous items as history.
        let a_test = &split.test.samples[0];
        let name = |i: usize| log.item_ids[i].clone();
        assert_eq!(a_test.history.iter().map(|&i| name(i)).collect::<Vec<_>>(), vec!["a2", "a3"]);
        assert_eq!(name(a_test.target), "a4");
        let a_train = &split.train.samples[0];
        assert_eq!(a_train.history.iter().map(|&i| name(i)).collect::<Vec<_>>(), vec!["a0"]);
    }

    #[test]
    fn uniform_timestamps_give_eight_one_one() {
        let mut rows = Vec::new();
        let mut t = 0i64;
        for u in 0..200 {
            for i in 0..20 {
                t += 1;
                rows.push((format!("u{u}"), format!("i{}", (u * 7 + i) % 50), (t * 7919) % 4000));
            }
        }
        let log = InteractionLog::from_triples(rows).unwrap();
        let split = temporal_split(&log, &SplitConfig::default()).unwrap();
        let total = (split.train.len() + split.valid.len() + split.test.len()) as f64;
        let frac = split.train.len() as f64 / total;
        assert!((frac - 0.8).abs() < 0.1, "train fraction {frac}");
        assert!(split.train.max_timestamp() < split.valid.min_timestamp());
        assert!(split.valid.max_timestamp() < split.test.min_timestamp());
    }

    #[test]
    fn popularity_head_of_five_items() {
        let mut samples = Vec::new();
        for (item, n) in [(0, 9), (1, 3), (2, 1)] {
            for _ in 0..n {
                samples.push(sample(item));
            }
        }
        let table = compute_popularity(&SampleSet::new(samples), 5, &PopularityConfig::default())
            .unwrap();
        assert_eq!(table.count, vec![9, 3, 1, 0, 0]);
        assert_eq!(table.head_set, vec![0]);
        assert_eq!(table.tail_set, vec![1, 2, 3, 4]);
        assert_eq!(table.v_pop[3], 0.0);
        assert!((table.v_pop[0] - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn popularity_ties_break_by_index() {
        let samples = vec![sample(3), sample(1), sample(4), sample(2)];
        let table = compute_popularity(&SampleSet::new(samples), 5, &PopularityConfig::default())
            .unwrap();
        assert_eq!(table.head_set, vec![1]);
        assert_eq!(table.rank_order, vec![1, 2, 3, 4, 0]);
    }

    #[test]
    fn popularity_occurrence_counting() {
        let s = Sample { sample_id: 0, user: 0, history: vec![2, 2, 1], target: 0, timestamp: 0 };
        let cfg = PopularityConfig { counting: PopularityCounting::Occurrences, ..Default::default() };
        let table = compute_popularity(&SampleSet::new(vec![s]), 3, &cfg).unwrap();
        assert_eq!(table.count, vec![1, 1, 2]);
    }

    #[test]
    fn candidate_counts() {
        let train = SampleSet::new((0..65_536).map(|_| sample(0)).collect());
        let c = sample_candidates(&train, 0.1, 3).unwrap();
        assert_eq!(c.len(), 6_554);
        let all = sample_candidates(&train, 1.0, 3).unwrap();
        assert_eq!(all.sample_ids, (0..65_536).collect::<Vec<_>>());
        assert_eq!(sample_candidates(&train, 0.1, 3).unwrap(), c);
        assert!(sample_candidates(&train, 0.0, 1).is_err());
        assert!(sample_candidates(&train, 1.5, 1).is_err());
    }

    #[test]
    fn ceil_fraction_handles_representation_error() {
        assert_eq!(ceil_fraction(0.3, 10), 3);
        assert_eq!(ceil_fraction(0.2, 5), 1);
        assert_eq!(ceil_fraction(0.2, 6), 2);
    }

    #[test]
    fn index_map_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let log = InteractionLog::from_triples([("a", "x", 1), ("b", "y", 2)]).unwrap();
        let path = dir.path().join("index_map.json");
        log.index_map().save(&path).unwrap();
        assert_eq!(IndexMap::load(&path).unwrap(), log.index_map());
    }
}
