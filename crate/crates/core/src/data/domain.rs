use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{CONTENT_SYMBOLS, RESERVED};
use super::{Corpus, Pair};
use crate::error::{Error, Result};

/// The synthetic translation "domains".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Copy,
    Reverse,
    Sort,
    Shift3,
    SwapPairs,
}

impl DomainKind {
    pub const ALL: [DomainKind; 5] = [
        DomainKind::Copy,
        DomainKind::Reverse,
        DomainKind::Sort,
        DomainKind::Shift3,
        DomainKind::SwapPairs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainKind::Copy => "copy",
            DomainKind::Reverse => "reverse",
            DomainKind::Sort => "sort",
            DomainKind::Shift3 => "shift3",
            DomainKind::SwapPairs => "swap_pairs",
        }
    }

    fn ordinal(self) -> u32 {
        DomainKind::ALL.iter().position(|&k| k == self).unwrap() as u32
    }

    /// Maps a source sequence to its reference translation.
    pub fn transform(self, source: &[u32]) -> Vec<u32> {
        match self {
            DomainKind::Copy => source.to_vec(),
            DomainKind::Reverse => source.iter().rev().copied().collect(),
            DomainKind::Sort => {
                let mut t = source.to_vec();
                t.sort_unstable();
                t
            }
            DomainKind::Shift3 => source
                .iter()
                .map(|&id| {
                    if id >= RESERVED {
                        (id - RESERVED + 3) % CONTENT_SYMBOLS + RESERVED
                    } else {
                        id
                    }
                })
                .collect(),
            DomainKind::SwapPairs => {
                let mut t = source.to_vec();
                for pair in t.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
                t
            }
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownDomainKind(s.to_string()))
    }
}

fn default_skew() -> f64 {
    DomainSpec::DEFAULT_SKEW
}

/// Recipe for one synthetic domain.
///
/// Each kind prefers its own window of eight content symbols: a token is
/// drawn from that window with probability `vocab_skew`, otherwise uniformly
/// from all content symbols. The skew gives every domain a recognizable
/// vocabulary, the way real domains differ in their lexicon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub size: usize,
    pub seed: u64,
    #[serde(default = "default_skew")]
    pub vocab_skew: f64,
}

impl DomainSpec {
    pub const DEFAULT_SKEW: f64 = 0.75;
    pub const MIN_SIZE: usize = 30;

    pub fn new(kind: DomainKind, size: usize, seed: u64) -> Self {
        DomainSpec {
            kind,
            size,
            seed,
            vocab_skew: Self::DEFAULT_SKEW,
        }
    }

    /// copy=20000, reverse=20000, sort=2000, shift3=600, swap_pairs=200.
    pub fn default_profile(seed: u64) -> Vec<DomainSpec> {
        let sizes = [20_000, 20_000, 2_000, 600, 200];
        DomainKind::ALL
            .iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (&kind, size))| DomainSpec::new(kind, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < Self::MIN_SIZE {
            return Err(Error::InvalidDomain(format!(
                "{}: size {} below minimum {}",
                self.kind,
                self.size,
                Self::MIN_SIZE
            )));
        }
        if !(0.0..=1.0).contains(&self.vocab_skew) {
            return Err(Error::InvalidDomain(format!("{}: vocab_skew must lie in [0, 1]", self.kind)));
        }
        Ok(())
    }
}

/// Deterministic synthetic parallel corpus for `spec`.
pub fn generate_domain(spec: &DomainSpec, max_len: usize) -> Result<Corpus> {
    spec.validate()?;
    if max_len < 5 {
        return Err(Error::InvalidDomain(format!("max_len {max_len} leaves no room for length-3 sequences")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let window = 8.min(CONTENT_SYMBOLS);
    let home = RESERVED + (spec.kind.ordinal() * window) % CONTENT_SYMBOLS;
    let pairs = (0..spec.size)
        .map(|_| {
            let len = rng.gen_range(3..=max_len - 2);
            let source: Vec<u32> = (0..len)
                .map(|_| {
                    if rng.gen_bool(spec.vocab_skew) {
                        home + rng.gen_range(0..window)
                    } else {
                        RESERVED + rng.gen_range(0..CONTENT_SYMBOLS)
                    }
                })
                .collect();
            let target = spec.kind.transform(&source);
            Pair { source, target }
        })
        .collect();
    Corpus::new(spec.kind.as_str(), pairs)
}

/// Seeded disjoint `(train, dev, test)` split.
pub fn split(corpus: &Corpus, test_n: usize, dev_n: usize, seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let size = corpus.n_k();
    if test_n + dev_n >= size {
        return Err(Error::InfeasibleSplit { test_n, dev_n, size });
    }
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| corpus.pairs()[i].clone()).collect::<Vec<_>>();
    let test = take(&order[..test_n]);
    let dev = take(&order[test_n..test_n + dev_n]);
    let train = take(&order[test_n + dev_n..]);
    let name = corpus.domain();
    let build = |pairs: Vec<Pair>| Corpus::from_parts(name, pairs);
    Ok((build(train), build(dev), build(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms() {
        let (a, b, c) = (4, 5, 6);
        assert_eq!(DomainKind::Copy.transform(&[a, b, c]), vec![a, b, c]);
        assert_eq!(DomainKind::Reverse.transform(&[a, b, c]), vec![c, b, a]);
        assert_eq!(DomainKind::Shift3.transform(&[4, 41, 43]), vec![7, 4, 6]);
        assert_eq!(DomainKind::SwapPairs.transform(&[1, 2, 3, 4, 5]), vec![2, 1, 4, 3, 5]);
        assert_eq!(DomainKind::Sort.transform(&[9, 4, 7, 4]), vec![4, 4, 7, 9]);
    }

    #[test]
    fn unknown_kind() {
        assert!("copy".parse::<DomainKind>().is_ok());
        assert!(matches!("pivot".parse::<DomainKind>(), Err(Error::UnknownDomainKind(_))));
        assert!(serde_json::from_str::<DomainSpec>(r#"{"kind":"pivot","size":40,"seed":1}"#).is_err());
    }

    #[test]
    fn generation_is_pure() {
        let spec = DomainSpec::new(DomainKind::Sort, 300, 17);
        let a = generate_domain(&spec, 16).unwrap();
        let b = generate_domain(&spec, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_k(), 300);
        for p in a.pairs() {
            assert!((3..=14).contains(&p.source.len()));
            assert!(p.target.windows(2).all(|w| w[0] <= w[1]));
            let mut s = p.source.clone();
            s.sort_unstable();
            assert_eq!(s, p.target);
        }
    }

    #[test]
    fn too_small_domain_rejected() {
        assert!(generate_domain(&DomainSpec::new(DomainKind::Copy, 29, 1), 16).is_err());
    }

    #[test]
    fn default_profile_is_skewed() {
        let p = DomainSpec::default_profile(1);
        let max = p.iter().map(|s| s.size).max().unwrap();
        let min = p.iter().map(|s| s.size).min().unwrap();
        assert!(max / min >= 100);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = generate_domain(&DomainSpec::new(DomainKind::Copy, 100, 3), 16).unwrap();
        let (train, dev, test) = split(&c, 10, 10, 5).unwrap();
        assert_eq!((train.n_k(), dev.n_k(), test.n_k()), (80, 10, 10));
        assert_eq!(split(&c, 10, 10, 5).unwrap(), (train.clone(), dev.clone(), test.clone()));
        let mut all: Vec<_> = train.pairs().iter().chain(dev.pairs()).chain(test.pairs()).cloned().collect();
        let mut orig = c.pairs().to_vec();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(matches!(split(&c, 50, 50, 5), Err(Error::InfeasibleSplit { .. })));
    }

    #[test]
    fn default_profile_is_heterogeneous() {
        let sizes: Vec<usize> = DomainSpec::default_profile(1).iter().map(|d| d.size).collect();
        assert_eq!(sizes, vec![20_000, 20_000, 2_000, 600, 200]);
        assert!(sizes.iter().max().unwrap() / sizes.iter().min().unwrap() >= 100);
    }

    proptest::proptest! {
        #[test]
        fn sorted_targets_are_sorted_permutations(seed in proptest::prelude::any::<u64>(), skew in 0.0f64..=1.0) {
            let spec = DomainSpec { vocab_skew: skew, ..DomainSpec::new(DomainKind::Sort, 30, seed) };
            for p in generate_domain(&spec, 16).unwrap().pairs() {
                proptest::prop_assert!(p.target.windows(2).all(|w| w[0] <= w[1]));
                let mut s = p.source.clone();
                s.sort_unstable();
                proptest::prop_assert_eq!(&s, &p.target);
            }
        }
    }
}
