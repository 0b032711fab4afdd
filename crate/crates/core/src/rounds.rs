//! Per-epoch key material and the record transformations each mix applies.
//!
//! Everything here is pure: the mix node state machine feeds batches
//! through these functions, and the client uses the very same functions to
//! preprocess the database and to predict where records end up.

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;

use crate::error::{Error, Result};
use crate::group::{
    client_alpha_schedule, client_public_schedule, mix_alpha_schedule, mix_public_schedule,
    DerivedSecrets, Kappa, PermSeed, Ristretto255,
};
use crate::shuffle::{allocation_from_permutation, permutation_from_seed, Design, Permutation};
use crate::sym::{ctr_layer_with, label_len, layered_unwrap_with, layered_wrap_with, BlockCipher, CtrDomain, LayeredRecord, PhaseTag};
use crate::wire::Batch;

/// Shape of one deployment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub design: Design,
    pub n: usize,
    pub m: usize,
    /// Parallel rounds `r`; equals `m` for cascades.
    pub rounds: usize,
    pub cell_len: usize,
    pub kappa: Kappa,
}

impl Geometry {
    pub fn new(design: Design, n: usize, m: usize, rounds: usize, cell_len: usize, kappa: Kappa) -> Result<Self> {
        if m == 0 || n == 0 || !n.is_multiple_of(m) {
            return Err(Error::Indivisible { n, m });
        }
        if m >= crate::wire::NodeId::STORAGE as usize {
            return Err(Error::ConfigMismatch(format!("{m} mixes exceed the address space")));
        }
        if rounds == 0 || rounds > u16::MAX as usize {
            return Err(Error::ConfigMismatch(format!("unsupported round count {rounds}")));
        }
        Ok(Geometry {
            design,
            n,
            m,
            rounds,
            cell_len,
            kappa,
        })
    }

    /// Records per mix chunk in the parallel designs.
    pub fn chunk(&self) -> usize {
        self.n / self.m
    }

    pub fn token_len(&self) -> usize {
        label_len(self.n)
    }

    /// Length of one mix's private chain.
    pub fn chain_len(&self) -> usize {
        if self.design.is_parallel() {
            self.rounds + 1
        } else {
            1
        }
    }

    /// Permutation domain of a mix's private permutation.
    pub fn local_size(&self) -> usize {
        if self.design.is_parallel() {
            self.chunk()
        } else {
            self.n
        }
    }

    /// Order in which the mixes apply their wrap layers.
    pub fn wrap_order(&self) -> Vec<usize> {
        match self.design {
            Design::CascadeRebuild => (0..self.m).rev().collect(),
            _ => (0..self.m).collect(),
        }
    }
}

/// One mix's private chain for one epoch, with ciphers and permutations
/// ready to use. Position 0 drives the cascade designs and the E/D layer
/// of the parallel rebuild; positions `1..=r` drive the parallel rounds.
#[derive(Clone)]
pub struct MixKeys {
    pub secrets: Vec<DerivedSecrets>,
    ciphers: Vec<BlockCipher>,
    perms: Vec<Permutation>,
    inverses: Vec<Permutation>,
}

impl MixKeys {
    pub fn build(secrets: Vec<DerivedSecrets>, geo: &Geometry) -> Self {
        let size = geo.local_size();
        let parallel = geo.design.is_parallel();
        let perms: Vec<Permutation> = secrets
            .iter()
            .enumerate()
            .map(|(j, s)| {
                if parallel && j == 0 {
                    Permutation::identity(0)
                } else {
                    permutation_from_seed(&s.perm_seed, size)
                }
            })
            .collect();
        MixKeys {
            ciphers: secrets.iter().map(|s| BlockCipher::new(&s.enc_key)).collect(),
            inverses: perms.iter().map(Permutation::invert).collect(),
            perms,
            secrets,
        }
    }

    /// Keys computed by the mix itself from `alpha_0` and its private key.
    pub fn for_mix(alpha: &RistrettoPoint, private: &Scalar, geo: &Geometry) -> Result<Self> {
        Ok(Self::build(
            mix_alpha_schedule::<Ristretto255>(alpha, private, geo.chain_len(), geo.kappa)?,
            geo,
        ))
    }

    /// The same keys reconstructed by the client.
    pub fn for_client(z: &Scalar, mix_public: &RistrettoPoint, geo: &Geometry) -> Self {
        Self::build(
            client_alpha_schedule::<Ristretto255>(z, mix_public, geo.chain_len(), geo.kappa),
            geo,
        )
    }

    pub fn cipher(&self, j: usize) -> &BlockCipher {
        &self.ciphers[j]
    }

    pub fn perm(&self, j: usize) -> &Permutation {
        &self.perms[j]
    }

    pub fn inverse(&self, j: usize) -> &Permutation {
        &self.inverses[j]
    }
}

/// Public permutations `P_1..P_r` shared by all mixes of a parallel
/// network. Index 0 is unused.
#[derive(Clone)]
pub struct PublicPerms {
    perms: Vec<Permutation>,
    inverses: Vec<Permutation>,
}

impl PublicPerms {
    pub fn from_seeds(seeds: &[PermSeed], n: usize) -> Self {
        let perms: Vec<Permutation> = seeds
            .iter()
            .enumerate()
            .map(|(j, s)| {
                if j == 0 {
                    Permutation::identity(0)
                } else {
                    permutation_from_seed(s, n)
                }
            })
            .collect();
        PublicPerms {
            inverses: perms.iter().map(Permutation::invert).collect(),
            perms,
        }
    }

    pub fn for_mix(
        beta: &RistrettoPoint,
        share: &Scalar,
        context: Option<&RistrettoPoint>,
        geo: &Geometry,
    ) -> Result<Self> {
        let seeds = mix_public_schedule::<Ristretto255>(beta, share, geo.rounds + 1, geo.kappa, context)?;
        Ok(Self::from_seeds(&seeds, geo.n))
    }

    pub fn for_client(share_product: &Scalar, context: Option<&RistrettoPoint>, geo: &Geometry) -> Self {
        let seeds = client_public_schedule::<Ristretto255>(share_product, geo.rounds + 1, geo.kappa, context);
        Self::from_seeds(&seeds, geo.n)
    }

    pub fn perm(&self, j: usize) -> &Permutation {
        &self.perms[j]
    }

    pub fn inverse(&self, j: usize) -> &Permutation {
        &self.inverses[j]
    }
}

/// All keys of one epoch, as known to the client.
#[derive(Clone)]
pub struct EpochView {
    pub epoch: u64,
    pub geo: Geometry,
    pub mixes: Vec<MixKeys>,
    pub public: Option<PublicPerms>,
}

/// Where a record was processed during one wrap step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hop {
    pub mix: usize,
    /// Chain position used (0 for cascades, the round for parallel).
    pub round: usize,
    /// Slot after the mix's private permutation; the counter of a rebuild
    /// wrap layer.
    pub slot: usize,
}

impl EpochView {
    /// Follows a slot through one whole wrap phase.
    pub fn forward(&self, mut slot: usize) -> (usize, Vec<Hop>) {
        let geo = &self.geo;
        let mut hops = Vec::with_capacity(geo.rounds);
        if geo.design.is_parallel() {
            let k = geo.chunk();
            let public = self.public.as_ref().expect("parallel view has public permutations");
            for j in 1..=geo.rounds {
                let c = slot / k;
                let after = c * k + self.mixes[c].perm(j).map(slot % k);
                hops.push(Hop {
                    mix: c,
                    round: j,
                    slot: after,
                });
                slot = public.perm(j).map(after);
            }
        } else {
            for i in geo.wrap_order() {
                slot = self.mixes[i].perm(0).map(slot);
                hops.push(Hop {
                    mix: i,
                    round: 0,
                    slot,
                });
            }
        }
        (slot, hops)
    }

    /// Inverse of [`forward`](Self::forward): the slot a record occupied at
    /// the start of the epoch, with the hops in reverse order.
    pub fn backward(&self, mut slot: usize) -> (usize, Vec<Hop>) {
        let geo = &self.geo;
        let mut hops = Vec::with_capacity(geo.rounds);
        if geo.design.is_parallel() {
            let k = geo.chunk();
            let public = self.public.as_ref().expect("parallel view has public permutations");
            for j in (1..=geo.rounds).rev() {
                let after = public.inverse(j).map(slot);
                let c = after / k;
                hops.push(Hop {
                    mix: c,
                    round: j,
                    slot: after,
                });
                slot = c * k + self.mixes[c].inverse(j).map(after % k);
            }
        } else {
            for i in geo.wrap_order().into_iter().rev() {
                hops.push(Hop {
                    mix: i,
                    round: 0,
                    slot,
                });
                slot = self.mixes[i].inverse(0).map(slot);
            }
        }
        (slot, hops)
    }
}

fn split_cell(cell: &[u8], token_len: usize) -> LayeredRecord {
    let (t, b) = cell.split_at(token_len);
    LayeredRecord {
        iv_token: t.to_vec(),
        body: b.to_vec(),
    }
}

pub fn layered_add(cell: &[u8], cipher: &BlockCipher, token_len: usize) -> Result<Vec<u8>> {
    Ok(layered_wrap_with(&split_cell(cell, token_len), cipher)?.to_cell())
}

pub fn layered_remove(cell: &[u8], cipher: &BlockCipher, token_len: usize) -> Result<Vec<u8>> {
    Ok(layered_unwrap_with(&split_cell(cell, token_len), cipher)?.to_cell())
}

fn local_slot(slot: u64, base: usize, perm: &Permutation) -> Result<usize> {
    let off = (slot as usize)
        .checked_sub(base)
        .filter(|o| *o < perm.len())
        .ok_or(Error::OutOfRange {
            slot: slot as usize,
            len: base + perm.len(),
        })?;
    Ok(base + perm.map(off))
}

fn check_cells(batch: &Batch, cell_len: usize) -> Result<()> {
    match batch.iter().find(|(_, c)| c.len() != cell_len) {
        Some((_, c)) => Err(Error::SizeMismatch {
            expected: cell_len,
            got: c.len(),
        }),
        None => Ok(()),
    }
}

/// Layered step: one CBC layer on every record, then the private
/// permutation of the block starting at `base`. Returns the cipher
/// operations performed.
pub fn layered_step(batch: &mut Batch, cipher: &BlockCipher, perm: &Permutation, base: usize, geo: &Geometry) -> Result<usize> {
    check_cells(batch, geo.cell_len)?;
    let t = geo.token_len();
    for (slot, cell) in batch.iter_mut() {
        *cell = layered_add(cell, cipher, t)?;
        *slot = local_slot(*slot, base, perm)? as u64;
    }
    batch.sort_unstable_by_key(|(s, _)| *s);
    Ok(batch.len())
}

/// Rebuild wrap step: permute, then add a counter-mode layer keyed to the
/// record's new slot.
pub fn wrap_step(batch: &mut Batch, cipher: &BlockCipher, perm: &Permutation, base: usize, epoch: u64, geo: &Geometry) -> Result<usize> {
    check_cells(batch, geo.cell_len)?;
    let dom = CtrDomain::new(epoch, PhaseTag::Wrap);
    for (slot, cell) in batch.iter_mut() {
        let to = local_slot(*slot, base, perm)?;
        ctr_layer_with(cell, cipher, dom, to as u64, geo.n)?;
        *slot = to as u64;
    }
    batch.sort_unstable_by_key(|(s, _)| *s);
    Ok(batch.len())
}

/// Rebuild unwrap step: strip the layer keyed to the current slot, then
/// undo the permutation (`inverse` is the inverse private permutation).
pub fn unwrap_step(batch: &mut Batch, cipher: &BlockCipher, inverse: &Permutation, base: usize, epoch: u64, geo: &Geometry) -> Result<usize> {
    check_cells(batch, geo.cell_len)?;
    let dom = CtrDomain::new(epoch, PhaseTag::Wrap);
    for (slot, cell) in batch.iter_mut() {
        ctr_layer_with(cell, cipher, dom, *slot, geo.n)?;
        *slot = local_slot(*slot, base, inverse)? as u64;
    }
    batch.sort_unstable_by_key(|(s, _)| *s);
    Ok(batch.len())
}

/// Swaps a mix's old E/D layer for a new one. Records sit at their virtual
/// index during this phase.
pub fn ed_step(
    batch: &mut Batch,
    old: &BlockCipher,
    old_epoch: u64,
    new: &BlockCipher,
    new_epoch: u64,
    geo: &Geometry,
) -> Result<usize> {
    check_cells(batch, geo.cell_len)?;
    let od = CtrDomain::new(old_epoch, PhaseTag::Ed);
    let nd = CtrDomain::new(new_epoch, PhaseTag::Ed);
    for (slot, cell) in batch.iter_mut() {
        ctr_layer_with(cell, old, od, *slot, geo.n)?;
        ctr_layer_with(cell, new, nd, *slot, geo.n)?;
    }
    Ok(2 * batch.len())
}

/// Splits the records held by mix `idx` into one batch per destination mix
/// according to the public permutation, relabelling each record with its
/// new slot.
pub fn dispatch(batch: Batch, perm: &Permutation, m: usize, idx: usize) -> Result<Vec<Batch>> {
    let n = perm.len();
    let k = n / m.max(1);
    let alloc = allocation_from_permutation(perm, m, idx)?;
    let base = idx * k;
    let mut held: Vec<Option<Vec<u8>>> = vec![None; k];
    let count = batch.len();
    for (slot, cell) in batch {
        let off = (slot as usize)
            .checked_sub(base)
            .filter(|o| *o < k)
            .ok_or(Error::OutOfRange { slot: slot as usize, len: n })?;
        held[off] = Some(cell);
    }
    let out: Vec<Batch> = alloc
        .per_destination
        .into_iter()
        .map(|slots| {
            slots
                .into_iter()
                .filter_map(|s| held[s - base].take().map(|c| (perm.map(s) as u64, c)))
                .collect()
        })
        .collect();
    let sent: usize = out.iter().map(Vec::len).sum();
    if sent != count || count != k {
        return Err(Error::SizeMismatch { expected: k, got: count });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{keygen, SymKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn geo(design: Design, n: usize, m: usize, r: usize) -> Geometry {
        Geometry::new(design, n, m, r, 40, Kappa::K128).unwrap()
    }

    fn view(design: Design, n: usize, m: usize, r: usize, seed: u64) -> EpochView {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let g = geo(design, n, m, r);
        let mixes = (0..m)
            .map(|_| {
                let (_, y) = keygen::<Ristretto255, _>(&mut rng);
                let (z, _) = keygen::<Ristretto255, _>(&mut rng);
                MixKeys::for_client(&z, &y, &g)
            })
            .collect();
        let public = design.is_parallel().then(|| {
            let (s, _) = keygen::<Ristretto255, _>(&mut rng);
            PublicPerms::for_client(&s, None, &g)
        });
        EpochView {
            epoch: 1,
            geo: g,
            mixes,
            public,
        }
    }

    #[test]
    fn mix_and_client_keys_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let g = geo(Design::ParallelRebuild, 16, 4, 5);
        let (x, y) = keygen::<Ristretto255, _>(&mut rng);
        let (z, alpha) = keygen::<Ristretto255, _>(&mut rng);
        let a = MixKeys::for_mix(&alpha, &x, &g).unwrap();
        let b = MixKeys::for_client(&z, &y, &g);
        assert_eq!(a.secrets, b.secrets);
        for j in 1..=5 {
            assert_eq!(a.perm(j), b.perm(j));
            assert_eq!(a.perm(j).len(), 4);
        }
    }

    #[test]
    fn forward_and_backward_are_inverse() {
        for design in Design::ALL {
            let v = view(design, 24, 3, 6, 2);
            let mut ends: Vec<usize> = (0..24).map(|s| v.forward(s).0).collect();
            for s in 0..24 {
                let (end, hops) = v.forward(s);
                let (start, back) = v.backward(end);
                assert_eq!(start, s);
                assert_eq!(hops.into_iter().rev().collect::<Vec<_>>(), back);
            }
            ends.sort_unstable();
            assert_eq!(ends, (0..24).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dispatch_matches_public_permutation() {
        let v = view(Design::ParallelLayered, 12, 3, 2, 3);
        let p = v.public.as_ref().unwrap().perm(1);
        let mut arrived: Vec<(u64, Vec<u8>)> = Vec::new();
        for idx in 0..3 {
            let batch: Batch = (idx * 4..idx * 4 + 4).map(|s| (s as u64, vec![s as u8])).collect();
            let out = dispatch(batch, p, 3, idx).unwrap();
            for (d, b) in out.into_iter().enumerate() {
                assert!(b.windows(2).all(|w| w[0].0 < w[1].0));
                for (slot, cell) in b {
                    assert_eq!(slot as usize / 4, d);
                    assert_eq!(p.map(cell[0] as usize), slot as usize);
                    arrived.push((slot, cell));
                }
            }
        }
        arrived.sort();
        assert_eq!(arrived.iter().map(|a| a.0).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
        assert!(dispatch(vec![(0, vec![0])], p, 3, 0).is_err());
    }

    #[test]
    fn wrap_then_unwrap_restores_batch() {
        let g = geo(Design::ParallelRebuild, 16, 4, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let key = SymKey::random(Kappa::K128, &mut rng);
        let c = BlockCipher::new(&key);
        let perm = Permutation::random(4, &mut rng);
        let original: Batch = (8..12u64)
            .map(|s| (s, (0..40).map(|_| rng.gen()).collect()))
            .collect();
        let mut b = original.clone();
        assert_eq!(wrap_step(&mut b, &c, &perm, 8, 3, &g).unwrap(), 4);
        assert_ne!(b, original);
        unwrap_step(&mut b, &c, &perm.invert(), 8, 3, &g).unwrap();
        assert_eq!(b, original);
        let mut outside = vec![(3u64, vec![0u8; 40])];
        assert!(wrap_step(&mut outside, &c, &perm, 8, 3, &g).is_err());
    }

    #[test]
    fn ed_step_swaps_layers() {
        let g = geo(Design::CascadeRebuild, 8, 2, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = BlockCipher::new(&SymKey::random(Kappa::K128, &mut rng));
        let b = BlockCipher::new(&SymKey::random(Kappa::K128, &mut rng));
        let plain: Batch = (0..8u64).map(|s| (s, vec![s as u8; 40])).collect();
        let mut x = plain.clone();
        for (s, cell) in x.iter_mut() {
            ctr_layer_with(cell, &a, CtrDomain::new(0, PhaseTag::Ed), *s, 8).unwrap();
        }
        assert_eq!(ed_step(&mut x, &a, 0, &b, 1, &g).unwrap(), 16);
        for (s, cell) in x.iter_mut() {
            ctr_layer_with(cell, &b, CtrDomain::new(1, PhaseTag::Ed), *s, 8).unwrap();
        }
        assert_eq!(x, plain);
    }
}
