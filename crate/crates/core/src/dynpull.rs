//! Dynamic pulling: per-tensor change norms, per-group thresholds and the
//! resulting transfer sets, plus exact bandwidth accounting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::scalar::Scalar;
use crate::tensor::{record_len, DeltaRecord, Group};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PullMode {
    /// Every tensor is exchanged.
    Full,
    /// Keep the most-changed tensors of each group.
    DpGreater,
    /// Keep the least-changed tensors of each group.
    DpLess,
    /// Keep a seeded uniform sample of the same size.
    Random,
}

impl PullMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PullMode::Full => "full",
            PullMode::DpGreater => "dp_greater",
            PullMode::DpLess => "dp_less",
            PullMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PullOnly,
    /// Filter both directions (bandwidth parity with fixed exchangeable layers).
    PushAndPull,
}

fn default_fraction() -> f64 {
    0.5
}

fn default_scope() -> Scope {
    Scope::PullOnly
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PullPolicy {
    pub mode: PullMode,
    #[serde(default = "default_fraction")]
    pub kept_fraction: f64,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PullPolicy {
    /// Full exchange; the fraction only matters once a selective mode is set.
    fn default() -> Self {
        PullPolicy {
            mode: PullMode::Full,
            kept_fraction: default_fraction(),
            scope: Scope::PullOnly,
            seed: 0,
        }
    }
}

impl PullPolicy {
    pub const CONTROLLERS_FRACTION: f64 = 1.0 / 3.0;

    pub fn full() -> Self {
        PullPolicy {
            mode: PullMode::Full,
            kept_fraction: 1.0,
            scope: Scope::PullOnly,
            seed: 0,
        }
    }

    pub fn new(mode: PullMode, kept_fraction: f64) -> Self {
        PullPolicy {
            mode,
            kept_fraction,
            scope: Scope::PullOnly,
            seed: 0,
        }
    }

    /// Push-and-pull filtering at one third of the tensors.
    pub fn controllers_parity(mode: PullMode) -> Self {
        PullPolicy {
            mode,
            kept_fraction: Self::CONTROLLERS_FRACTION,
            scope: Scope::PushAndPull,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Fraction actually applied; full mode always reports 1.0.
    pub fn effective_fraction(&self) -> f64 {
        match self.mode {
            PullMode::Full => 1.0,
            _ => self.kept_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.kept_fraction;
        if self.mode != PullMode::Full && !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidPolicy(format!("kept_fraction {f} outside (0, 1]")));
        }
        Ok(())
    }

    /// Canonical form: full mode records its fraction as 1.0.
    pub fn normalized(mut self) -> Self {
        if self.mode == PullMode::Full {
            self.kept_fraction = 1.0;
        }
        self
    }
}

/// `⌈fraction × total⌉`, robust to representation error in `fraction`.
pub fn kept_count(fraction: f64, total: usize) -> usize {
    if total == 0 {
        return 0;
    }
    let k = (fraction * total as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(total)
}

/// One [`DeltaRecord`] per tensor, sorted by (group, name).
pub fn tensor_deltas<T: Scalar>(current: &ModelState<T>, snapshot: &ModelState<T>) -> Result<Vec<DeltaRecord>> {
    let a: BTreeSet<&str> = current.names().collect();
    let b: BTreeSet<&str> = snapshot.names().collect();
    if a != b {
        return Err(Error::NameSetMismatch {
            only_left: a.difference(&b).map(|s| s.to_string()).collect(),
            only_right: b.difference(&a).map(|s| s.to_string()).collect(),
        });
    }
    let mut out = current
        .tensors()
        .map(|t| DeltaRecord::between(t, snapshot.get(t.name()).expect("same name set")))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|x, y| (x.group, &x.name).cmp(&(y.group, &y.name)));
    Ok(out)
}

/// Which end of the norm ordering a threshold keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keep {
    Greatest,
    Least,
}

/// Outcome of thresholding one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSelection {
    pub threshold: f64,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

/// Keeps exactly `⌈fraction × T⌉` records of one group by norm, ties broken by
/// ascending name. The threshold is the norm of the last kept record.
pub fn select_threshold(deltas: &[DeltaRecord], kept_fraction: f64, keep: Keep) -> Result<GroupSelection> {
    if deltas.is_empty() {
        return Err(Error::EmptyGroup("no delta records".into()));
    }
    if !(kept_fraction > 0.0 && kept_fraction <= 1.0) {
        return Err(Error::InvalidPolicy(format!("kept_fraction {kept_fraction} outside (0, 1]")));
    }
    let mut order: Vec<&DeltaRecord> = deltas.iter().collect();
    order.sort_by(|x, y| {
        let by_norm = match keep {
            Keep::Greatest => y.norm.total_cmp(&x.norm),
            Keep::Least => x.norm.total_cmp(&y.norm),
        };
        by_norm.then_with(|| x.name.cmp(&y.name))
    });
    let k = kept_count(kept_fraction, order.len());
    let threshold = order[k - 1].norm;
    let mut kept: Vec<String> = order[..k].iter().map(|d| d.name.clone()).collect();
    let mut dropped: Vec<String> = order[k..].iter().map(|d| d.name.clone()).collect();
    kept.sort();
    dropped.sort();
    Ok(GroupSelection {
        threshold,
        kept,
        dropped,
    })
}

/// Tensors chosen for transfer, with the evidence behind the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mode: PullMode,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
    pub thresholds: BTreeMap<Group, f64>,
    pub deltas: Vec<DeltaRecord>,
}

impl SelectionResult {
    /// Everything kept, e.g. for round 0 or full exchange.
    pub fn everything<'a>(names: impl IntoIterator<Item = &'a str>, deltas: Vec<DeltaRecord>) -> Self {
        let mut kept: Vec<String> = names.into_iter().map(str::to_string).collect();
        kept.sort();
        SelectionResult {
            mode: PullMode::Full,
            kept,
            dropped: Vec::new(),
            thresholds: BTreeMap::new(),
            deltas,
        }
    }

    pub fn kept_in(&self, group: Group) -> impl Iterator<Item = &str> {
        self.kept.iter().map(String::as_str).filter(move |n| Group::of(n) == group)
    }
}

fn random_group(names: &[String], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let k = kept_count(fraction, names.len());
    let mut pool: Vec<String> = names.to_vec();
    pool.sort();
    let (chosen, rest) = pool.partial_shuffle(rng, k);
    let mut kept = chosen.to_vec();
    let mut dropped = rest.to_vec();
    kept.sort();
    dropped.sort();
    (kept, dropped)
}

/// Applies `policy` to precomputed deltas, group by group.
pub fn select_from_deltas(deltas: Vec<DeltaRecord>, policy: &PullPolicy) -> Result<SelectionResult> {
    policy.validate()?;
    if policy.mode == PullMode::Full {
        let names: Vec<String> = deltas.iter().map(|d| d.name.clone()).collect();
        return Ok(SelectionResult::everything(names.iter().map(String::as_str), deltas));
    }
    let mut by_group: BTreeMap<Group, Vec<DeltaRecord>> = BTreeMap::new();
    for d in &deltas {
        by_group.entry(d.group).or_default().push(d.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    let mut thresholds = BTreeMap::new();
    for (group, records) in by_group {
        match policy.mode {
            PullMode::Random => {
                let names: Vec<String> = records.iter().map(|d| d.name.clone()).collect();
                let (k, d) = random_group(&names, policy.kept_fraction, &mut rng);
                kept.extend(k);
                dropped.extend(d);
            }
            PullMode::DpGreater | PullMode::DpLess => {
                let keep = if policy.mode == PullMode::DpGreater {
                    Keep::Greatest
                } else {
                    Keep::Least
                };
                let sel = select_threshold(&records, policy.kept_fraction, keep)?;
                thresholds.insert(group, sel.threshold);
                kept.extend(sel.kept);
                dropped.extend(sel.dropped);
            }
            PullMode::Full => unreachable!(),
        }
    }
    kept.sort();
    dropped.sort();
    Ok(SelectionResult {
        mode: policy.mode,
        kept,
        dropped,
        thresholds,
        deltas,
    })
}

/// Selection for one client given its previous-round snapshot.
pub fn select_dp<T: Scalar>(
    current: &ModelState<T>,
    snapshot: Option<&ModelState<T>>,
    policy: &PullPolicy,
) -> Result<SelectionResult> {
    policy.validate()?;
    match (snapshot, policy.mode) {
        (Some(prev), _) => select_from_deltas(tensor_deltas(current, prev)?, policy),
        (None, PullMode::Full) => Ok(SelectionResult::everything(current.names(), Vec::new())),
        (None, _) => Err(Error::NoPreviousRound),
    }
}

/// Name → shape lookup used for bandwidth accounting.
pub trait ParamCatalog {
    fn shape_of(&self, name: &str) -> Option<&[usize]>;
    fn all_shapes(&self) -> Vec<(&str, &[usize])>;
}

impl<T: Scalar> ParamCatalog for ModelState<T> {
    fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.get(name).map(|t| t.shape())
    }

    fn all_shapes(&self) -> Vec<(&str, &[usize])> {
        self.tensors().map(|t| (t.name(), t.shape())).collect()
    }
}

impl ParamCatalog for BTreeMap<String, Vec<usize>> {
    fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.get(name).map(Vec::as_slice)
    }

    fn all_shapes(&self) -> Vec<(&str, &[usize])> {
        self.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Pull,
    Push,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthRecord {
    pub direction: Direction,
    pub params_sent: u64,
    pub params_total: u64,
    /// Serialized tensor records actually sent (headers plus 4 bytes per value).
    pub bytes_sent: u64,
}

impl BandwidthRecord {
    pub fn ratio(&self) -> f64 {
        if self.params_total == 0 {
            0.0
        } else {
            self.params_sent as f64 / self.params_total as f64
        }
    }
}

/// Parameters and bytes needed to send `kept` out of `catalog`.
pub fn bandwidth<C: ParamCatalog + ?Sized>(kept: &[String], catalog: &C, direction: Direction) -> Result<BandwidthRecord> {
    let mut params_sent = 0u64;
    let mut bytes_sent = 0u64;
    for name in kept {
        let shape = catalog.shape_of(name).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        params_sent += shape.iter().product::<usize>() as u64;
        bytes_sent += record_len(name, shape) as u64;
    }
    let params_total = catalog
        .all_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum();
    Ok(BandwidthRecord {
        direction,
        params_sent,
        params_total,
        bytes_sent,
    })
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Jaccard overlap of consecutive kept sets, per group. `kept_by_round[r]` is
/// the kept list of round `r`; the result has one entry per consecutive pair.
pub fn cluster_persistence(kept_by_round: &[Vec<String>]) -> Result<Vec<BTreeMap<Group, f64>>> {
    if kept_by_round.len() < 2 {
        return Err(Error::NotEnoughRounds {
            needed: 2,
            got: kept_by_round.len(),
        });
    }
    fn split(kept: &[String]) -> BTreeMap<Group, BTreeSet<&str>> {
        let mut m: BTreeMap<Group, BTreeSet<&str>> = Group::ALL.iter().map(|&g| (g, BTreeSet::new())).collect();
        for n in kept {
            m.get_mut(&Group::of(n)).unwrap().insert(n.as_str());
        }
        m
    }
    let sets: Vec<_> = kept_by_round.iter().map(|k| split(k)).collect();
    Ok(sets
        .windows(2)
        .map(|w| Group::ALL.iter().map(|g| (*g, jaccard(&w[0][g], &w[1][g]))).collect())
        .collect())
}
