//! Seeded permutations, public record allocation and the round-count
//! formulas for the four eviction designs.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::group::PermSeed;
use crate::sym::{ctr_xor, BlockCipher, BLOCK};

/// The four eviction designs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Design {
    CascadeLayered,
    CascadeRebuild,
    ParallelLayered,
    ParallelRebuild,
}

impl Design {
    pub const ALL: [Design; 4] = [
        Design::CascadeLayered,
        Design::CascadeRebuild,
        Design::ParallelLayered,
        Design::ParallelRebuild,
    ];

    pub fn is_layered(self) -> bool {
        matches!(self, Design::CascadeLayered | Design::ParallelLayered)
    }

    pub fn is_parallel(self) -> bool {
        matches!(self, Design::ParallelLayered | Design::ParallelRebuild)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Design::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Design::CascadeLayered => "cascade-layered",
            Design::CascadeRebuild => "cascade-rebuild",
            Design::ParallelLayered => "parallel-layered",
            Design::ParallelRebuild => "parallel-rebuild",
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Design::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown design {s:?}")))
    }
}

/// Deterministic stream of pseudo-random words: AES in counter mode keyed
/// with the seed.
pub struct SeedPrg {
    cipher: BlockCipher,
    block: u64,
    buf: [u8; BLOCK],
    pos: usize,
}

impl SeedPrg {
    pub fn new(seed: &PermSeed) -> Self {
        SeedPrg {
            cipher: BlockCipher::from_bytes(seed.as_bytes()),
            block: 0,
            buf: [0; BLOCK],
            pos: BLOCK,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.pos == BLOCK {
            let mut ctr = [0u8; BLOCK];
            ctr[..8].copy_from_slice(&self.block.to_be_bytes());
            self.buf = [0; BLOCK];
            ctr_xor(&self.cipher, &ctr, &mut self.buf);
            self.block += 1;
            self.pos = 0;
        }
        let w = u64::from_be_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        w
    }

    /// Unbiased draw from `[0, bound)` by rejection.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % bound;
            }
        }
    }
}

/// A bijection on `[0, n)`. Item at position `i` moves to `mapping[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
    seed: Option<PermSeed>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
            seed: None,
        }
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &d in &mapping {
            if d >= mapping.len() || std::mem::replace(&mut seen[d], true) {
                return Err(Error::OutOfRange {
                    slot: d,
                    len: mapping.len(),
                });
            }
        }
        Ok(Permutation {
            mapping,
            seed: None,
        })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            mapping.swap(i, rng.gen_range(0..=i));
        }
        Permutation {
            mapping,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn seed(&self) -> Option<&PermSeed> {
        self.seed.as_ref()
    }

    /// New position of the item at `i`.
    pub fn map(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn invert(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &d) in self.mapping.iter().enumerate() {
            inv[d] = i;
        }
        Permutation {
            mapping: inv,
            seed: None,
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Permutation) -> Result<Permutation> {
        if self.len() != next.len() {
            return Err(Error::SizeMismatch {
                expected: self.len(),
                got: next.len(),
            });
        }
        Ok(Permutation {
            mapping: self.mapping.iter().map(|&d| next.mapping[d]).collect(),
            seed: None,
        })
    }
}

/// Fisher-Yates driven by [`SeedPrg`].
pub fn permutation_from_seed(seed: &PermSeed, n: usize) -> Permutation {
    let mut prg = SeedPrg::new(seed);
    let mut mapping: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = prg.below(i as u64 + 1) as usize;
        mapping.swap(i, j);
    }
    Permutation {
        mapping,
        seed: Some(seed.clone()),
    }
}

/// Moves `items[i]` to position `perm.map(i)`.
pub fn apply<T>(perm: &Permutation, items: Vec<T>) -> Result<Vec<T>> {
    if items.len() != perm.len() {
        return Err(Error::SizeMismatch {
            expected: perm.len(),
            got: items.len(),
        });
    }
    let mut out: Vec<Option<T>> = (0..items.len()).map(|_| None).collect();
    for (i, item) in items.into_iter().enumerate() {
        out[perm.mapping[i]] = Some(item);
    }
    Ok(out.into_iter().map(|x| x.unwrap()).collect())
}

pub fn invert(perm: &Permutation) -> Permutation {
    perm.invert()
}

/// Outgoing record slots of one mix for one round of public allocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allocation {
    /// `per_destination[d]` lists the slots this mix holds that go to mix
    /// `d`, in the order of their new positions.
    pub per_destination: Vec<Vec<usize>>,
    pub round: u16,
    pub epoch: u64,
}

/// Public record allocation for mix `idx`: permute `[0, n)`, cut into `m`
/// chunks of `n/m`, and keep from chunk `d` the indices that mix `idx`
/// currently holds.
pub fn public_allocation(
    seed: &PermSeed,
    n: usize,
    m: usize,
    idx: usize,
) -> Result<Allocation> {
    allocation_from_permutation(&permutation_from_seed(seed, n), m, idx)
}

pub fn allocation_from_permutation(perm: &Permutation, m: usize, idx: usize) -> Result<Allocation> {
    let n = perm.len();
    if m == 0 || !n.is_multiple_of(m) {
        return Err(Error::Indivisible { n, m });
    }
    if idx >= m {
        return Err(Error::OutOfRange { slot: idx, len: m });
    }
    let chunk = n / m;
    let held = idx * chunk..(idx + 1) * chunk;
    // records[t] is the slot that lands at position t
    let records = apply(perm, (0..n).collect())?;
    let per_destination = records
        .chunks(chunk)
        .map(|c| c.iter().copied().filter(|s| held.contains(s)).collect())
        .collect();
    Ok(Allocation {
        per_destination,
        round: 0,
        epoch: 0,
    })
}

/// Rounds for the parallel designs; cascade designs report their `m` hops.
pub fn round_count(design: Design, n: usize, s: usize, m: usize) -> usize {
    let r = match design {
        Design::CascadeLayered | Design::CascadeRebuild => return m,
        Design::ParallelLayered => (m as f64 / 2.0) * (n as f64 / s.max(1) as f64).ln(),
        Design::ParallelRebuild => 2.0 * m as f64 * (n as f64).ln(),
    };
    (r.ceil() as usize).max(1)
}

/// Upper bound on the expected k-RTS stopping time, `(2n/k) ln n`.
pub fn krts_bound(n: usize, k: usize) -> f64 {
    2.0 * n as f64 / k as f64 * (n as f64).ln()
}

/// Runs the marking process: each round picks `k` distinct positions, pairs
/// them up, transposes each pair on a coin toss and marks every picked card.
/// Returns the per-round count of marked cards; its length is the stopping
/// time.
pub fn krts_trace<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n || !k.is_multiple_of(2) {
        return Err(Error::ConfigMismatch(format!(
            "k-RTS needs an even 0 < k <= n (n = {n}, k = {k})"
        )));
    }
    let mut deck: Vec<usize> = (0..n).collect();
    let mut marked = vec![false; n];
    let mut count = 0;
    let mut trace = Vec::new();
    while count < n {
        let picks = sample(rng, n, k).into_vec();
        for pair in picks.chunks(2) {
            if rng.gen::<bool>() {
                deck.swap(pair[0], pair[1]);
            }
        }
        for &p in &picks {
            let card = deck[p];
            if !marked[card] {
                marked[card] = true;
                count += 1;
            }
        }
        trace.push(count);
    }
    Ok(trace)
}

/// Stopping time of one k-RTS marking run.
pub fn krts_simulate<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<usize> {
    Ok(krts_trace(n, k, rng)?.len())
}

/// Rounds for a k-oblivious merge of sets of size `n` and `s`,
/// `(n / 2k) ln(n/s)`.
pub fn merge_bound(n: usize, s: usize, k: usize) -> f64 {
    n as f64 / (2.0 * k as f64) * (n as f64 / s as f64).ln()
}

/// One round of the classic random transposition shuffle: two distinct
/// positions, swapped on a coin toss.
pub fn two_rts_round<T, R: Rng + ?Sized>(deck: &mut [T], rng: &mut R) {
    let picks = sample(rng, deck.len(), 2);
    if rng.gen::<bool>() {
        deck.swap(picks.index(0), picks.index(1));
    }
}

/// Sum of squared deviations from uniform.
pub fn phi_potential(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::NotAProbabilityVector(total));
    }
    let u = 1.0 / weights.len() as f64;
    Ok(weights.iter().map(|w| (w - u) * (w - u)).sum())
}

/// Closed-form expected potential after `t` rounds of the parallel shuffle
/// with `corrupted` of `m` mixes colluding: `(1 - (m-m_a)(k-1)/(n-1))^t`,
/// `k = n/m`.
pub fn phi_expected(n: usize, m: usize, corrupted: usize, t: usize) -> f64 {
    phi_decay_rate(n, m, corrupted).powi(t as i32)
}

pub fn phi_decay_rate(n: usize, m: usize, corrupted: usize) -> f64 {
    let k = (n / m) as f64;
    1.0 - (m - corrupted) as f64 * (k - 1.0) / (n as f64 - 1.0)
}

/// Round at which the potential is expected to fall below `1/n^2`,
/// `⌈2 · m/(m-m_a) · ln n⌉`.
pub fn phi_target_round(n: usize, m: usize, corrupted: usize) -> usize {
    (2.0 * m as f64 / (m - corrupted) as f64 * (n as f64).ln()).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::Kappa;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn seed(byte: u8) -> PermSeed {
        PermSeed::new(vec![byte; 16]).unwrap()
    }

    fn is_bijection(p: &Permutation) -> bool {
        let mut m = p.mapping().to_vec();
        m.sort_unstable();
        m == (0..p.len()).collect::<Vec<_>>()
    }

    #[test]
    fn single_element_is_identity() {
        assert_eq!(permutation_from_seed(&seed(1), 1), {
            let mut p = Permutation::identity(1);
            p.seed = Some(seed(1));
            p
        });
    }

    #[test]
    fn seeded_permutation_roundtrip() {
        let p = permutation_from_seed(&seed(7), 4);
        assert!(is_bijection(&p));
        let items = vec!['a', 'b', 'c', 'd'];
        let there = apply(&p, items.clone()).unwrap();
        assert_eq!(apply(&invert(&p), there).unwrap(), items);
        assert_eq!(permutation_from_seed(&seed(7), 4), p);
    }

    #[test]
    fn identity_roundtrip() {
        let id = Permutation::identity(5);
        assert_eq!(apply(&id, vec![1, 2, 3, 4, 5]).unwrap(), vec![1, 2, 3, 4, 5]);
        assert!(apply(&id, vec![1, 2]).is_err());
    }

    #[test]
    fn composition_is_associative_n8() {
        // brute force: compare positional application against composed maps
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Permutation::random(8, &mut rng);
            let b = Permutation::random(8, &mut rng);
            let c = Permutation::random(8, &mut rng);
            let left = a.then(&b).unwrap().then(&c).unwrap();
            let right = a.then(&b.then(&c).unwrap()).unwrap();
            assert_eq!(left, right);
            let items: Vec<u8> = (0..8).collect();
            let stepwise = apply(&c, apply(&b, apply(&a, items.clone()).unwrap()).unwrap()).unwrap();
            assert_eq!(apply(&left, items).unwrap(), stepwise);
        }
    }

    #[test]
    fn five_element_orderings_are_uniform() {
        // 10^5 random seeds over S_5: all 120 orderings, chi-squared p > 0.001
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut counts = std::collections::HashMap::new();
        let trials = 100_000;
        for _ in 0..trials {
            let s = PermSeed::random(Kappa::K128, &mut rng);
            *counts.entry(permutation_from_seed(&s, 5).mapping().to_vec()).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 120);
        let e = trials as f64 / 120.0;
        let stat: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(119.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 {stat} p {p}");
    }

    #[test]
    fn prg_rejection_is_in_range() {
        let mut prg = SeedPrg::new(&seed(9));
        for bound in [1u64, 2, 3, 7, 1000, u64::MAX] {
            for _ in 0..100 {
                assert!(prg.below(bound) < bound);
            }
        }
    }

    #[test]
    fn identity_allocation_keeps_chunks() {
        let a = allocation_from_permutation(&Permutation::identity(6), 3, 0).unwrap();
        assert_eq!(a.per_destination, vec![vec![0, 1], vec![], vec![]]);
    }

    #[test]
    fn reversal_allocation_hand_trace() {
        let rev = Permutation::from_mapping(vec![5, 4, 3, 2, 1, 0]).unwrap();
        let a = allocation_from_permutation(&rev, 3, 0).unwrap();
        assert_eq!(a.per_destination, vec![vec![], vec![], vec![1, 0]]);
    }

    #[test]
    fn allocations_partition_all_slots() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s = PermSeed::random(Kappa::K128, &mut rng);
            let mut all: Vec<usize> = (0..3)
                .flat_map(|i| public_allocation(&s, 12, 3, i).unwrap().per_destination.concat())
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn allocation_requires_divisibility() {
        assert!(matches!(
            public_allocation(&seed(1), 10, 3, 0),
            Err(Error::Indivisible { n: 10, m: 3 })
        ));
    }

    #[test]
    fn round_counts() {
        assert_eq!(round_count(Design::ParallelLayered, 1_000_000, 1000, 4), 14);
        assert_eq!(round_count(Design::ParallelRebuild, 16, 4, 4), 23);
        assert_eq!(round_count(Design::ParallelRebuild, 64, 8, 4), 34);
        assert_eq!(round_count(Design::ParallelLayered, 100, 99, 4), 1);
        assert_eq!(round_count(Design::CascadeLayered, 100, 10, 3), 3);
        assert_eq!(round_count(Design::CascadeRebuild, 100, 10, 5), 5);
    }

    #[test]
    fn krts_bounds() {
        assert!((krts_bound(64, 4) - 133.08).abs() < 0.01);
        assert!((krts_bound(52, 2) - 205.46).abs() < 0.01);
        assert!((krts_bound(10, 10) - 2.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn krts_two_cards_one_round() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..100 {
            assert_eq!(krts_simulate(2, 2, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn krts_marking_is_monotone() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let t = krts_trace(64, 4, &mut rng).unwrap();
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*t.last().unwrap(), 64);
        assert!(krts_simulate(5, 3, &mut rng).is_err());
    }

    #[test]
    fn krts_mean_below_bound_64_4() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let trials = 10_000;
        let mean = (0..trials)
            .map(|_| krts_simulate(64, 4, &mut rng).unwrap() as f64)
            .sum::<f64>()
            / trials as f64;
        assert!(mean < krts_bound(64, 4), "mean {mean}");
    }

    #[test]
    fn merge_bounds() {
        assert!((merge_bound(64, 8, 1) - 66.54).abs() < 0.01);
        assert_eq!(merge_bound(10, 10, 1), 0.0);
        assert!((merge_bound(6, 2, 1) - 3.2958).abs() < 1e-3);
    }

    #[test]
    fn phi_values() {
        let uniform = vec![1.0 / 16.0; 16];
        assert!(phi_potential(&uniform).unwrap().abs() < 1e-15);
        let mut point = vec![0.0; 16];
        point[3] = 1.0;
        assert!((phi_potential(&point).unwrap() - 0.9375).abs() < 1e-12);
        assert!((phi_expected(16, 4, 3, 10) - 0.8f64.powi(10)).abs() < 1e-12);
        assert!((phi_expected(16, 4, 3, 10) - 0.1074).abs() < 1e-4);
        assert!(matches!(
            phi_potential(&[0.5, 0.4]),
            Err(Error::NotAProbabilityVector(_))
        ));
        assert_eq!(phi_target_round(16, 4, 3), 23);
    }

    #[test]
    fn design_names_roundtrip() {
        for d in Design::ALL {
            assert_eq!(d.name().parse::<Design>().unwrap(), d);
            assert_eq!(Design::from_code(d.code()), Some(d));
        }
        assert!("mesh".parse::<Design>().is_err());
    }

    proptest! {
        #[test]
        fn prop_seeded_permutations_are_bijections(bytes in proptest::collection::vec(any::<u8>(), 16), n in 1usize..300) {
            let p = permutation_from_seed(&PermSeed::new(bytes).unwrap(), n);
            prop_assert!(is_bijection(&p));
            prop_assert_eq!(p.then(&p.invert()).unwrap(), Permutation::identity(n));
        }
    }
}
