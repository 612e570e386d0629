//! Option permutations: enumeration, capped seeded sampling and the
//! content/position mapping.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full enumeration is only allowed up to this many options (4! = 24).
pub const FULL_ENUMERATION_MAX: usize = 4;
/// Default cap on sampled permutations.
pub const DEFAULT_PERM_CAP: usize = 24;
/// Largest option count an instance may have.
pub const MAX_OPTIONS: usize = 8;

/// `sigma[j]` is the content index displayed at position `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    sigma: Vec<usize>,
}

impl Permutation {
    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let n = sigma.len();
        let mut seen = vec![false; n];
        for &s in &sigma {
            if s >= n || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Range(format!("{sigma:?} is not a permutation of 0..{n}")));
            }
        }
        Ok(Self { sigma })
    }

    pub fn identity(n: usize) -> Self {
        Self { sigma: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    /// Content shown at `position`.
    pub fn content_at(&self, position: usize) -> usize {
        self.sigma[position]
    }

    /// Position `j` with `sigma[j] == content`.
    pub fn position_of_content(&self, content: usize) -> Result<usize> {
        self.sigma
            .iter()
            .position(|&c| c == content)
            .ok_or_else(|| Error::Range(format!("content {content} not in 0..{}", self.len())))
    }

    /// `positions()[c]` is where content `c` is displayed.
    pub fn positions(&self) -> Vec<usize> {
        let mut inv = vec![0; self.len()];
        for (j, &c) in self.sigma.iter().enumerate() {
            inv[c] = j;
        }
        inv
    }

    pub fn reverse(&self) -> Self {
        Self { sigma: self.sigma.iter().rev().copied().collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.sigma.iter().enumerate().all(|(j, &c)| j == c)
    }

    pub fn is_reverse(&self) -> bool {
        let n = self.len();
        self.sigma.iter().enumerate().all(|(j, &c)| c == n - 1 - j)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;
    fn try_from(sigma: Vec<usize>) -> Result<Self> {
        Self::new(sigma)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.sigma
    }
}

/// Ordered collection of distinct permutations over `n` options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSet {
    perms: Vec<Permutation>,
    n: usize,
    seed: Option<u64>,
}

impl PermutationSet {
    pub fn from_perms(n: usize, perms: Vec<Permutation>) -> Result<Self> {
        if perms.is_empty() {
            return Err(Error::Range("empty permutation set".into()));
        }
        let mut sorted: Vec<&Permutation> = perms.iter().collect();
        sorted.sort();
        if perms.iter().any(|p| p.len() != n) || sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Range(format!("permutations must be distinct and of size {n}")));
        }
        Ok(Self { perms, n, seed: None })
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    pub fn get(&self, i: usize) -> &Permutation {
        &self.perms[i]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn identity_index(&self) -> Option<usize> {
        self.perms.iter().position(Permutation::is_identity)
    }

    pub fn reverse_index(&self) -> Option<usize> {
        self.perms.iter().position(Permutation::is_reverse)
    }

    pub fn includes_identity(&self) -> bool {
        self.identity_index().is_some()
    }

    pub fn includes_reverse(&self) -> bool {
        self.reverse_index().is_some()
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// All permutations of `0..n` in lexicographic order (Heap-free, via next_permutation).
fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(factorial(n));
    loop {
        out.push(Permutation { sigma: cur.clone() });
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("successor exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

/// Every permutation of `n ≤ 4` options, lexicographic in `sigma`.
pub fn enumerate_permutations(n: usize) -> Result<PermutationSet> {
    if n == 0 {
        return Err(Error::Range("cannot enumerate permutations of 0 options".into()));
    }
    if n > FULL_ENUMERATION_MAX {
        return Err(Error::Guard(format!(
            "full enumeration is limited to n <= {FULL_ENUMERATION_MAX} (got {n}); use sample_permutations"
        )));
    }
    Ok(PermutationSet { perms: all_permutations(n), n, seed: None })
}

/// `m` distinct permutations under the default cap of 24.
pub fn sample_permutations(n: usize, m: usize, seed: u64) -> Result<PermutationSet> {
    sample_permutations_capped(n, m, seed, DEFAULT_PERM_CAP)
}

/// Identity first, reverse second, then `m − 2` further permutations drawn
/// uniformly without replacement from the rest.
pub fn sample_permutations_capped(n: usize, m: usize, seed: u64, cap: usize) -> Result<PermutationSet> {
    if !(2..=MAX_OPTIONS).contains(&n) {
        return Err(Error::Range(format!("sampling needs 2 <= n <= {MAX_OPTIONS}, got {n}")));
    }
    let total = factorial(n);
    if m < 2 || m > total || m > cap {
        return Err(Error::Range(format!("requested {m} permutations; need 2 <= m <= min(n! = {total}, cap = {cap})")));
    }
    let identity = Permutation::identity(n);
    let reverse = identity.reverse();
    let rest: Vec<Permutation> =
        all_permutations(n).into_iter().filter(|p| !p.is_identity() && !p.is_reverse()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perms = Vec::with_capacity(m);
    perms.push(identity);
    perms.push(reverse);
    perms.extend(index::sample(&mut rng, rest.len(), m - 2).into_iter().map(|i| rest[i].clone()));
    Ok(PermutationSet { perms, n, seed: Some(seed) })
}

/// The set a metric pipeline uses for an `n`-option question: the original
/// ordering alone when `cap = 1`, full enumeration when `n ≤ 4` and
/// `n! ≤ cap`, otherwise `min(cap, n!)` sampled permutations.
pub fn permutations_for(n: usize, cap: usize, seed: u64) -> Result<PermutationSet> {
    if cap == 0 {
        return Err(Error::Range("permutation cap must be at least 1".into()));
    }
    if cap == 1 {
        return PermutationSet::from_perms(n, vec![Permutation::identity(n)]);
    }
    if n <= FULL_ENUMERATION_MAX && (n == 1 || factorial(n) <= cap) {
        enumerate_permutations(n)
    } else {
        sample_permutations_capped(n, cap.min(factorial(n)), seed, cap)
    }
}

/// Deterministic per-instance seed derived from a run seed (SplitMix64 step).
pub fn instance_seed(run_seed: u64, index: usize) -> u64 {
    let mut z = run_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
