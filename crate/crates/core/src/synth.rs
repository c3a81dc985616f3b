//! Synthetic interaction logs with a planted popularity bias.
//!
//! Every user has a home cluster of items and mostly consumes from it
//! uniformly. A fraction of clicks instead follows a global Zipf law over item
//! popularity; these "popularity clicks" are the planted bias. Late events can
//! use a different (usually lower) popularity-click rate so the evaluation
//! periods reflect preferences more than exposure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub events_per_user: usize,
    pub clusters: usize,
    pub zipf_exponent: f64,
    /// Probability that an early event is a popularity click.
    pub pop_click_rate: f64,
    /// Probability used for the last `late_fraction` of each user's events.
    pub late_pop_click_rate: f64,
    pub late_fraction: f64,
    /// Popularity-click rate multiplier for group-1 users.
    pub group1_pop_multiplier: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 200,
            events_per_user: 20,
            clusters: 10,
            zipf_exponent: 1.2,
            pop_click_rate: 0.5,
            late_pop_click_rate: 0.1,
            late_fraction: 0.2,
            group1_pop_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.users == 0 || self.items < 2 || self.events_per_user < 2 {
            return bad("need users >= 1, items >= 2, events_per_user >= 2");
        }
        if self.clusters == 0 || self.clusters > self.items {
            return bad("clusters must be in 1..=items");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be finite and >= 0");
        }
        for (name, p) in [
            ("pop_click_rate", self.pop_click_rate),
            ("late_pop_click_rate", self.late_pop_click_rate),
            ("late_fraction", self.late_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.group1_pop_multiplier.is_finite() && self.group1_pop_multiplier >= 0.0) {
            return bad("group1_pop_multiplier must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// `(user, item, timestamp)` rows in timestamp order.
    pub rows: Vec<(String, String, i64)>,
    /// `(user, group label)`; users alternate between groups 0 and 1.
    pub attributes: Vec<(String, u8)>,
    /// Whether each row was a popularity click.
    pub pop_click: Vec<bool>,
}

/// Item `i` has Zipf weight `1 / (i + 1)^s`, so item 0 is the most popular.
/// Clusters are assigned round-robin, which spreads head items across them.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = (0..cfg.items)
        .map(|i| ((i + 1) as f64).powf(-cfg.zipf_exponent))
        .collect();
    let zipf = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("synth: {e}")))?;
    let members: Vec<Vec<usize>> = (0..cfg.clusters)
        .map(|c| (c..cfg.items).step_by(cfg.clusters).collect())
        .collect();
    let late_start =
        cfg.events_per_user - ((cfg.late_fraction * cfg.events_per_user as f64).round() as usize);
    let home: Vec<usize> = (0..cfg.users).map(|_| rng.gen_range(0..cfg.clusters)).collect();

    let mut rows = Vec::with_capacity(cfg.users * cfg.events_per_user);
    let mut pop_click = Vec::with_capacity(rows.capacity());
    // Events are interleaved across users so every period contains every user.
    for j in 0..cfg.events_per_user {
        for u in 0..cfg.users {
            let base = if j >= late_start { cfg.late_pop_click_rate } else { cfg.pop_click_rate };
            let rate = if u % 2 == 1 { (base * cfg.group1_pop_multiplier).min(1.0) } else { base };
            let is_pop = rng.gen::<f64>() < rate;
            let item = if is_pop {
                zipf.sample(&mut rng)
            } else {
                let m = &members[home[u]];
                m[rng.gen_range(0..m.len())]
            };
            let ts = (j * cfg.users + u) as i64;
            rows.push((format!("u{u}"), format!("i{item}"), ts));
            pop_click.push(is_pop);
        }
    }
    let attributes = (0..cfg.users).map(|u| (format!("u{u}"), (u % 2) as u8)).collect();
    Ok(SynthData { rows, attributes, pop_click })
}

/// Paths written by [`write_synth`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub interactions: PathBuf,
    pub attributes: PathBuf,
}

pub fn write_synth(data: &SynthData, dir: &Path) -> Result<SynthFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut inter = String::from("user\titem\ttimestamp\n");
    for (u, i, t) in &data.rows {
        let _ = writeln!(inter, "{u}\t{i}\t{t}");
    }
    let mut attrs = String::from("user\tgroup\n");
    for (u, g) in &data.attributes {
        let _ = writeln!(attrs, "{u}\t{g}");
    }
    let files = SynthFiles {
        interactions: dir.join("interactions.tsv"),
        attributes: dir.join("attributes.tsv"),
    };
    fs::write(&files.interactions, inter).map_err(|e| Error::io(&files.interactions, e))?;
    fs::write(&files.attributes, attrs).map_err(|e| Error::io(&files.attributes, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_interactions, parse_interactions};

    fn small() -> SynthConfig {
        SynthConfig { users: 40, items: 30, clusters: 3, seed: 9, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 10, ..small() };
        assert_ne!(generate(&small()).unwrap().rows, generate(&other).unwrap().rows);
    }

    #[test]
    fn non_pop_clicks_stay_in_home_cluster() {
        let cfg = small();
        let data = generate(&cfg).unwrap();
        let mut home = std::collections::HashMap::new();
        for ((u, i, _), &p) in data.rows.iter().zip(&data.pop_click) {
            if p {
                continue;
            }
            let c = i[1..].parse::<usize>().unwrap() % cfg.clusters;
            assert_eq!(*home.entry(u.clone()).or_insert(c), c);
        }
    }

    #[test]
    fn pop_clicks_follow_the_head() {
        let cfg = SynthConfig { pop_click_rate: 1.0, late_pop_click_rate: 1.0, ..small() };
        let data = generate(&cfg).unwrap();
        let zero = data.rows.iter().filter(|r| r.1 == "i0").count() as f64;
        let last = data.rows.iter().filter(|r| r.1 == "i29").count() as f64;
        assert!(zero > 10.0 * last.max(1.0));
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small()).unwrap();
        let files = write_synth(&data, dir.path()).unwrap();
        let (log, groups) = load_interactions(&files.interactions, Some(&files.attributes)).unwrap();
        assert_eq!(log.events.len(), data.rows.len());
        assert!(groups.has_both_groups());
        let text = fs::read_to_string(&files.interactions).unwrap();
        assert_eq!(parse_interactions(&files.interactions, &text).unwrap().events.len(), 800);
    }

    #[test]
    fn rejects_bad_rates() {
        let cfg = SynthConfig { pop_click_rate: 1.5, ..small() };
        assert!(generate(&cfg).is_err());
    }
}
