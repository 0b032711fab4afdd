//! The ORAM client.
//!
//! The client keeps only small per-epoch secrets (plus the index table for
//! the layered designs); everything else it needs, including every mix key
//! and permutation, is re-derived on demand from those secrets and the mix
//! public keys.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;
use log::debug;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha512};

use crate::error::{Error, Result};
use crate::group::{keygen, Group, Kappa, Ristretto255, SymKey};
use crate::net::{SimNetwork, REGION_CACHE, REGION_DB};
use crate::rounds::{layered_add, layered_remove, EpochView, Geometry, MixKeys, PublicPerms};
use crate::shuffle::{round_count, Design, Permutation};
use crate::storage::{Actor, Region};
use crate::sym::{ctr_layer, layered_unwrap, layered_wrap, BlockCipher, CtrDomain, LayeredFormat, LayeredRecord, PhaseTag, BLOCK};
use crate::wire::{decode_batch, encode_batch, encode_fetch, Frame, FrameKind, MixInstruction, NodeId, Phase};

/// Deployment parameters chosen by the client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientConfig {
    pub design: Design,
    /// Number of records.
    pub n: usize,
    /// Payload bytes per record.
    pub payload_len: usize,
    /// Cache slots, i.e. accesses per epoch.
    pub s: usize,
    /// Number of mixes.
    pub m: usize,
    /// Records refreshed per access (the fetched one plus `d - 1` extras).
    pub d: usize,
    pub kappa: Kappa,
    pub rounds_override: Option<usize>,
}

impl ClientConfig {
    pub fn new(design: Design, n: usize, payload_len: usize, s: usize, m: usize) -> Self {
        ClientConfig {
            design,
            n,
            payload_len,
            s,
            m,
            d: 1,
            kappa: Kappa::K128,
            rounds_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigMismatch(m));
        if self.n < 2 || self.m == 0 || !self.n.is_multiple_of(self.m) {
            return Err(Error::Indivisible { n: self.n, m: self.m });
        }
        if self.payload_len < BLOCK || !self.payload_len.is_multiple_of(BLOCK) {
            return bad(format!("payload of {} bytes is not a positive multiple of {BLOCK}", self.payload_len));
        }
        if self.s == 0 || self.s >= self.n {
            return bad(format!("cache size {} must satisfy 0 < s < n = {}", self.s, self.n));
        }
        if self.d == 0 || self.s * self.d > self.n {
            return bad(format!("refresh count d = {} must satisfy 0 < s*d <= n", self.d));
        }
        Ok(())
    }

    /// Rounds of the parallel designs, or `m` for cascades.
    pub fn rounds(&self) -> usize {
        match (self.design.is_parallel(), self.rounds_override) {
            (true, Some(r)) => r,
            _ => round_count(self.design, self.n, self.s, self.m),
        }
    }

    pub fn cell_len(&self) -> usize {
        if self.design.is_layered() {
            LayeredFormat {
                label_len: crate::sym::label_len(self.n),
                payload_len: self.payload_len,
            }
            .cell_len()
        } else {
            self.payload_len
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.design, self.n, self.m, self.rounds(), self.cell_len(), self.kappa)
    }
}

/// How the client reaches the storage server and the mixes.
pub trait Backend {
    fn read(&mut self, region: Region, slot: usize) -> Result<Vec<u8>>;
    fn write(&mut self, region: Region, slot: usize, cell: Vec<u8>) -> Result<()>;
    /// Delivers the instructions and blocks until storage acknowledges the
    /// new epoch.
    fn evict(&mut self, epoch: u64, instructions: Vec<MixInstruction>) -> Result<()>;
}

/// In-process backend over a [`SimNetwork`].
impl Backend for SimNetwork {
    fn read(&mut self, region: Region, slot: usize) -> Result<Vec<u8>> {
        let server = self.storage.server();
        match region {
            Region::Db => server.db_read(slot, Actor::Client, 0),
            Region::Cache => Ok(server.cache_read(slot, Actor::Client)?.unwrap_or_default()),
        }
    }

    fn write(&mut self, region: Region, slot: usize, cell: Vec<u8>) -> Result<()> {
        let server = self.storage.server();
        match region {
            Region::Db => server.db_write(slot, cell, Actor::Client, 0),
            Region::Cache => server.cache_write(slot, cell, Actor::Client),
        }
    }

    fn evict(&mut self, epoch: u64, instructions: Vec<MixInstruction>) -> Result<()> {
        for ins in instructions {
            let to = NodeId::Mix(ins.mix_index);
            self.send(to, Frame::new(FrameKind::Instruction, epoch, Phase::Access, 0, NodeId::Client, ins.encode()));
        }
        self.run()?;
        let inbox = self.take_client_inbox();
        if inbox.iter().any(|f| f.kind == FrameKind::Ack && f.epoch == epoch) {
            Ok(())
        } else {
            Err(Error::Transport(format!("eviction of epoch {epoch} was not acknowledged")))
        }
    }
}

/// Backend speaking the wire protocol over TCP.
pub struct TcpBackend {
    pub link: crate::net::TcpLink,
    pub cell_len: usize,
}

impl TcpBackend {
    /// Sends a storage request and waits for storage's answer.
    fn request(&mut self, frame: Frame) -> Result<Frame> {
        self.link.send(NodeId::Storage, &frame)?;
        loop {
            let f = self.link.recv()?;
            if f.from == NodeId::Storage && f.phase == Phase::Access {
                return Ok(f);
            }
        }
    }

    fn region(region: Region) -> u16 {
        match region {
            Region::Db => REGION_DB,
            Region::Cache => REGION_CACHE,
        }
    }
}

impl Backend for TcpBackend {
    fn read(&mut self, region: Region, slot: usize) -> Result<Vec<u8>> {
        let payload = encode_fetch(&[slot as u64]);
        let f = self.request(Frame::new(FrameKind::DbFetch, 0, Phase::Access, Self::region(region), NodeId::Client, payload))?;
        let mut b = decode_batch(&f.payload, self.cell_len)?;
        b.pop().map(|(_, c)| c).ok_or_else(|| Error::Transport("empty fetch reply".into()))
    }

    fn write(&mut self, region: Region, slot: usize, cell: Vec<u8>) -> Result<()> {
        let payload = encode_batch(&[(slot as u64, cell)]);
        let f = self.request(Frame::new(FrameKind::DbStore, 0, Phase::Access, Self::region(region), NodeId::Client, payload))?;
        match f.kind {
            FrameKind::Ack => Ok(()),
            k => Err(Error::Transport(format!("unexpected {k:?} reply to a store"))),
        }
    }

    fn evict(&mut self, epoch: u64, instructions: Vec<MixInstruction>) -> Result<()> {
        for ins in instructions {
            let f = Frame::new(FrameKind::Instruction, epoch, Phase::Access, 0, NodeId::Client, ins.encode());
            self.link.send(NodeId::Mix(ins.mix_index), &f)?;
        }
        loop {
            let f = self.link.recv()?;
            if f.kind == FrameKind::Ack && f.from == NodeId::Storage && f.epoch == epoch {
                return Ok(());
            }
        }
    }
}

/// Client-held secrets of one epoch: a blinding exponent per mix and, for
/// the parallel designs, a seed from which the public-chain shares derive.
#[derive(Clone, Debug)]
pub struct EpochSecrets {
    pub epoch: u64,
    pub z: Vec<Scalar>,
    pub share_seed: Option<Vec<u8>>,
}

impl EpochSecrets {
    fn random<R: RngCore>(epoch: u64, m: usize, parallel: bool, kappa: Kappa, rng: &mut R) -> Self {
        EpochSecrets {
            epoch,
            z: (0..m).map(|_| Ristretto255::random_scalar(rng)).collect(),
            share_seed: parallel.then(|| {
                let mut s = vec![0u8; 2 * kappa.bytes()];
                rng.fill_bytes(&mut s);
                s
            }),
        }
    }

    /// Shares `m_i`, one per mix.
    pub fn shares(&self) -> Vec<Scalar> {
        let Some(seed) = &self.share_seed else {
            return Vec::new();
        };
        (0..self.z.len())
            .map(|i| {
                let mut ctr = 0u32;
                loop {
                    let h = Sha512::new()
                        .chain_update(b"mixoram/v1 share")
                        .chain_update(seed)
                        .chain_update((i as u32).to_be_bytes())
                        .chain_update(ctr.to_be_bytes())
                        .finalize();
                    let s = Scalar::from_bytes_mod_order_wide(&h.into());
                    if s != Scalar::ZERO {
                        break s;
                    }
                    ctr += 1;
                }
            })
            .collect()
    }

    pub fn share_product(&self) -> Option<Scalar> {
        self.share_seed
            .as_ref()
            .map(|_| self.shares().iter().fold(Scalar::ONE, |a, b| a * b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Read,
    Write,
}

/// Client-side work counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub accesses: u64,
    pub records_fetched: u64,
    /// Symmetric layers removed while decrypting fetched records.
    pub layers_removed: u64,
    /// Layered designs: epochs whose layers had to be peeled.
    pub epochs_peeled: u64,
    /// Slot positions evaluated while following permutations.
    pub lookup_steps: u64,
    /// The same for finding which record sits in a dummy-fetched slot.
    pub reverse_steps: u64,
}

/// A fetched record the client holds until the next eviction.
#[derive(Clone, Debug)]
struct Held {
    virt: usize,
    payload: Vec<u8>,
}

pub struct Client {
    cfg: ClientConfig,
    geo: Geometry,
    identity: (Scalar, RistrettoPoint),
    mixes: Vec<RistrettoPoint>,
    addresses: Vec<String>,
    db_address: String,
    client_key: SymKey,
    epoch: u64,
    /// Layered: secrets of every epoch since the last reinit. Rebuild: only
    /// the current epoch.
    history: BTreeMap<u64, EpochSecrets>,
    /// Layered designs: virtual index to slot.
    table: Vec<usize>,
    views: HashMap<u64, Arc<EpochView>>,
    /// Slots read this epoch and the records found there.
    fetched: BTreeMap<usize, Held>,
    /// Virtual index to slot for every record held this epoch.
    held: HashMap<usize, usize>,
    cache_fill: usize,
    stats: ClientStats,
    rng: ChaCha20Rng,
    /// Separate stream for dummy slots, so the access pattern never shifts
    /// the secrets drawn from `rng`.
    coins: ChaCha20Rng,
}

impl Client {
    /// Encrypts and shuffles the initial database. Returns the client and
    /// the `n` cells to upload.
    pub fn preprocess(
        cfg: ClientConfig,
        mixes: Vec<RistrettoPoint>,
        data: Vec<Vec<u8>>,
        seed: u64,
    ) -> Result<(Client, Vec<Vec<u8>>)> {
        cfg.validate()?;
        if mixes.len() != cfg.m {
            return Err(Error::ConfigMismatch(format!("{} mix keys for m = {}", mixes.len(), cfg.m)));
        }
        if data.len() != cfg.n {
            return Err(Error::SizeMismatch { expected: cfg.n, got: data.len() });
        }
        if mixes.iter().any(|y| *y == Ristretto255::identity()) {
            return Err(Error::IdentityElement);
        }
        let geo = cfg.geometry()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let coins = ChaCha20Rng::from_rng(&mut rng).expect("ChaCha never fails");
        let identity = keygen::<Ristretto255, _>(&mut rng);
        let client_key = SymKey::random(cfg.kappa, &mut rng);
        let mut client = Client {
            addresses: (0..cfg.m).map(|i| format!("mix{i}")).collect(),
            db_address: "storage".into(),
            geo,
            identity,
            mixes,
            client_key,
            epoch: 0,
            history: BTreeMap::new(),
            table: Vec::new(),
            views: HashMap::new(),
            fetched: BTreeMap::new(),
            held: HashMap::new(),
            cache_fill: 0,
            stats: ClientStats::default(),
            rng,
            coins,
            cfg,
        };
        let cells = client.encrypt_fresh(data)?;
        Ok((client, cells))
    }

    /// Builds the initial cells and resets the per-epoch secrets.
    fn encrypt_fresh(&mut self, data: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>> {
        let n = self.cfg.n;
        if let Some(bad) = data.iter().find(|d| d.len() != self.cfg.payload_len) {
            return Err(Error::SizeMismatch { expected: self.cfg.payload_len, got: bad.len() });
        }
        let mut cells = vec![Vec::new(); n];
        self.history.clear();
        self.views.clear();
        if self.cfg.design.is_layered() {
            let perm = Permutation::random(n, &mut self.rng);
            self.table = perm.mapping().to_vec();
            for (v, payload) in data.into_iter().enumerate() {
                cells[self.table[v]] = self.layered_client_cell(v, &payload)?;
            }
        } else {
            let secrets = EpochSecrets::random(self.epoch, self.cfg.m, self.cfg.design.is_parallel(), self.cfg.kappa, &mut self.rng);
            self.history.insert(self.epoch, secrets);
            for (v, payload) in data.into_iter().enumerate() {
                let (slot, cell) = self.rebuild_cell(v, payload)?;
                cells[slot] = cell;
            }
        }
        Ok(cells)
    }

    /// The long-term client key; exposed for leakage tests only.
    #[doc(hidden)]
    pub fn client_key(&self) -> &SymKey {
        &self.client_key
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geo
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = ClientStats::default();
    }

    pub fn cache_fill(&self) -> usize {
        self.cache_fill
    }

    pub fn public_key(&self) -> RistrettoPoint {
        self.identity.1
    }

    /// Names written into instructions; purely informational for the
    /// in-process network.
    pub fn set_addresses(&mut self, db: String, mixes: Vec<String>) -> Result<()> {
        if mixes.len() != self.cfg.m {
            return Err(Error::ConfigMismatch("one address per mix".into()));
        }
        self.db_address = db;
        self.addresses = mixes;
        Ok(())
    }

    /// IV token of the client layer for record `v` written during `epoch`.
    /// Deriving it instead of drawing it lets trial decryption check the
    /// token as well as the label.
    fn client_token(&self, v: usize, epoch: u64) -> Vec<u8> {
        let mut block = [0u8; BLOCK];
        block[..4].copy_from_slice(b"tokn");
        block[4..12].copy_from_slice(&(v as u64).to_be_bytes());
        block[12..].copy_from_slice(&(epoch as u32).to_be_bytes());
        self.cipher().encrypt_block(&mut block);
        block[..self.geo.token_len()].to_vec()
    }

    fn cipher(&self) -> BlockCipher {
        BlockCipher::new(&self.client_key)
    }

    fn format(&self) -> LayeredFormat {
        LayeredFormat {
            label_len: self.geo.token_len(),
            payload_len: self.cfg.payload_len,
        }
    }

    fn layered_client_cell(&mut self, v: usize, payload: &[u8]) -> Result<Vec<u8>> {
        let token = self.client_token(v, self.epoch);
        let rec = self.format().plaintext(v, payload, token)?;
        Ok(layered_wrap(&rec, &self.client_key)?.to_cell())
    }

    /// All keys of `epoch`, derived on first use.
    pub fn view(&mut self, epoch: u64) -> Result<Arc<EpochView>> {
        if let Some(v) = self.views.get(&epoch) {
            return Ok(v.clone());
        }
        let secrets = self
            .history
            .get(&epoch)
            .ok_or_else(|| Error::StaleState(format!("no secrets for epoch {epoch}")))?;
        let view = Arc::new(self.build_view(secrets));
        self.views.insert(epoch, view.clone());
        Ok(view)
    }

    fn build_view(&self, secrets: &EpochSecrets) -> EpochView {
        let geo = self.geo;
        let mixes = secrets
            .z
            .iter()
            .zip(&self.mixes)
            .map(|(z, y)| MixKeys::for_client(z, y, &geo))
            .collect();
        let public = secrets
            .share_product()
            .map(|p| PublicPerms::for_client(&p, self.public_context().as_ref(), &geo));
        EpochView {
            epoch: secrets.epoch,
            geo,
            mixes,
            public,
        }
    }

    fn public_context(&self) -> Option<RistrettoPoint> {
        (self.cfg.design == Design::ParallelRebuild).then_some(self.identity.1)
    }

    /// Fully encrypted rebuild cell for record `v` under the current epoch.
    fn rebuild_cell(&mut self, v: usize, mut body: Vec<u8>) -> Result<(usize, Vec<u8>)> {
        let n = self.cfg.n;
        let view = self.view(self.epoch)?;
        ctr_layer(&mut body, &self.client_key, CtrDomain::new(0, PhaseTag::Client), v as u64, n)?;
        let ed = CtrDomain::new(self.epoch, PhaseTag::Ed);
        for keys in &view.mixes {
            crate::sym::ctr_layer_with(&mut body, keys.cipher(0), ed, v as u64, n)?;
        }
        let (slot, hops) = view.forward(v);
        let wrap = CtrDomain::new(self.epoch, PhaseTag::Wrap);
        for h in hops {
            crate::sym::ctr_layer_with(&mut body, view.mixes[h.mix].cipher(h.round), wrap, h.slot as u64, n)?;
        }
        Ok((slot, body))
    }

    /// Current slot of virtual record `v`.
    pub fn lookup(&mut self, v: usize) -> Result<usize> {
        self.check_index(v)?;
        if self.cfg.design.is_layered() {
            self.stats.lookup_steps += 1;
            return Ok(self.table[v]);
        }
        let view = self.view(self.epoch)?;
        self.stats.lookup_steps += self.geo.rounds as u64;
        Ok(view.forward(v).0)
    }

    /// Virtual record stored at `slot`.
    pub fn reverse_lookup(&mut self, slot: usize) -> Result<usize> {
        self.check_index(slot)?;
        if self.cfg.design.is_layered() {
            // inverse table scan
            self.stats.reverse_steps += self.cfg.n as u64;
            return self
                .table
                .iter()
                .position(|s| *s == slot)
                .ok_or(Error::OutOfRange { slot, len: self.cfg.n });
        }
        let view = self.view(self.epoch)?;
        self.stats.reverse_steps += self.geo.rounds as u64;
        Ok(view.backward(slot).0)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.cfg.n {
            return Err(Error::OutOfRange { slot: i, len: self.cfg.n });
        }
        Ok(())
    }

    /// Layers a record is expected to carry right now, excluding the
    /// client layer: for rebuild `2m` (cascade) or `r + m` (parallel).
    pub fn max_layers(&self) -> usize {
        match self.cfg.design {
            Design::CascadeRebuild => 2 * self.cfg.m,
            Design::ParallelRebuild => self.geo.rounds + self.cfg.m,
            Design::CascadeLayered => self.cfg.m * self.history.len(),
            Design::ParallelLayered => self.geo.rounds * self.history.len(),
        }
    }

    /// Trial-and-error decryption of a layered cell found at `slot` that
    /// should hold record `v`: try the client key, and if the label does
    /// not match peel one more epoch of mix layers, newest first. Returns
    /// the payload and the number of epochs peeled.
    pub fn decrypt_layered(&mut self, cell: &[u8], slot: usize, v: usize) -> Result<(Vec<u8>, usize)> {
        let fmt = self.format();
        let t = fmt.token_len();
        let client = self.cipher();
        let mut rec = fmt.split(cell)?;
        let mut attempt = layered_unwrap(&rec, &self.client_key)?;
        self.stats.layers_removed += 1;
        // a record peeled back `depth` epochs was written during epoch
        // `self.epoch - depth`
        let genuine = |c: &Client, a: &LayeredRecord, depth: usize| {
            a.label() == v as u64 && a.iv_token == c.client_token(v, c.epoch - depth as u64)
        };
        if genuine(self, &attempt, 0) {
            return Ok((attempt.payload().to_vec(), 0));
        }
        let epochs: Vec<u64> = self.history.keys().rev().copied().collect();
        let mut at = slot;
        for (depth, e) in epochs.into_iter().enumerate() {
            // put the client layer back before peeling the next epoch
            let mut c = layered_add(&attempt.to_cell(), &client, t)?;
            let view = self.view(e)?;
            let (prev, hops) = view.backward(at);
            self.stats.lookup_steps += hops.len() as u64;
            for h in hops {
                c = layered_remove(&c, view.mixes[h.mix].cipher(h.round), t)?;
                self.stats.layers_removed += 1;
            }
            at = prev;
            rec = fmt.split(&c)?;
            attempt = layered_unwrap(&rec, &self.client_key)?;
            self.stats.layers_removed += 1;
            self.stats.epochs_peeled += 1;
            if genuine(self, &attempt, depth + 1) {
                return Ok((attempt.payload().to_vec(), depth + 1));
            }
        }
        Err(Error::ExhaustedHistory(v))
    }

    /// Strips every layer of a rebuild cell found at `slot` holding `v`.
    pub fn decrypt_rebuild(&mut self, cell: &[u8], slot: usize, v: usize) -> Result<Vec<u8>> {
        let n = self.cfg.n;
        if cell.len() != self.cfg.payload_len {
            return Err(Error::SizeMismatch { expected: self.cfg.payload_len, got: cell.len() });
        }
        let view = self.view(self.epoch)?;
        let (start, hops) = view.backward(slot);
        if start != v {
            return Err(Error::StaleState(format!("slot {slot} does not hold record {v}")));
        }
        let mut body = cell.to_vec();
        let wrap = CtrDomain::new(self.epoch, PhaseTag::Wrap);
        for h in &hops {
            crate::sym::ctr_layer_with(&mut body, view.mixes[h.mix].cipher(h.round), wrap, h.slot as u64, n)?;
        }
        let ed = CtrDomain::new(self.epoch, PhaseTag::Ed);
        for keys in &view.mixes {
            crate::sym::ctr_layer_with(&mut body, keys.cipher(0), ed, v as u64, n)?;
        }
        ctr_layer(&mut body, &self.client_key, CtrDomain::new(0, PhaseTag::Client), v as u64, n)?;
        self.stats.layers_removed += (hops.len() + view.mixes.len() + 1) as u64;
        self.stats.lookup_steps += hops.len() as u64;
        Ok(body)
    }

    /// Reads record `v` straight from its current slot, bypassing the
    /// access protocol. The server learns `v`, so this is for verification
    /// only.
    pub fn inspect(&mut self, backend: &mut dyn Backend, v: usize) -> Result<Vec<u8>> {
        if let Some(slot) = self.held.get(&v) {
            return Ok(self.fetched[slot].payload.clone());
        }
        let slot = self.lookup(v)?;
        let cell = backend.read(Region::Db, slot)?;
        if self.cfg.design.is_layered() {
            Ok(self.decrypt_layered(&cell, slot, v)?.0)
        } else {
            self.decrypt_rebuild(&cell, slot, v)
        }
    }

    /// Reads the cell at `slot`, decrypts it and remembers the record.
    fn fetch(&mut self, backend: &mut dyn Backend, slot: usize, v: Option<usize>) -> Result<(usize, Vec<u8>)> {
        let cell = backend.read(Region::Db, slot)?;
        let v = match v {
            Some(v) => v,
            None => self.reverse_lookup(slot)?,
        };
        let payload = if self.cfg.design.is_layered() {
            self.decrypt_layered(&cell, slot, v)?.0
        } else {
            self.decrypt_rebuild(&cell, slot, v)?
        };
        self.stats.records_fetched += 1;
        self.fetched.insert(slot, Held { virt: v, payload });
        self.held.insert(v, slot);
        Ok((v, cell))
    }

    fn random_unread_slot(&mut self) -> usize {
        loop {
            let s = self.coins.gen_range(0..self.cfg.n);
            if !self.fetched.contains_key(&s) {
                return s;
            }
        }
    }

    /// One ORAM access. Every call reads `d` database slots, none read
    /// before this epoch, and writes one cache slot.
    pub fn access(&mut self, backend: &mut dyn Backend, op: Op, v: usize, data: Option<Vec<u8>>) -> Result<Vec<u8>> {
        self.check_index(v)?;
        if self.cache_fill >= self.cfg.s {
            return Err(Error::CacheFull);
        }
        match (&op, &data) {
            (Op::Write, Some(d)) if d.len() != self.cfg.payload_len => {
                return Err(Error::SizeMismatch { expected: self.cfg.payload_len, got: d.len() })
            }
            (Op::Write, None) => return Err(Error::ConfigMismatch("write without data".into())),
            _ => {}
        }
        let (slot, known) = match self.held.get(&v) {
            Some(_) => (self.random_unread_slot(), None),
            None => (self.lookup(v)?, Some(v)),
        };
        let (_, cell) = self.fetch(backend, slot, known)?;
        let cache_cell = self.cache_cell(cell, self.cache_fill)?;
        backend.write(Region::Cache, self.cache_fill, cache_cell)?;
        self.cache_fill += 1;
        for _ in 1..self.cfg.d {
            let extra = self.random_unread_slot();
            self.fetch(backend, extra, None)?;
        }
        let at = self.held[&v];
        let held = self.fetched.get_mut(&at).expect("held records are fetched");
        let out = held.payload.clone();
        if let Some(d) = data.filter(|_| op == Op::Write) {
            held.payload = d;
        }
        self.stats.accesses += 1;
        Ok(out)
    }

    pub fn read(&mut self, backend: &mut dyn Backend, v: usize) -> Result<Vec<u8>> {
        self.access(backend, Op::Read, v, None)
    }

    pub fn write(&mut self, backend: &mut dyn Backend, v: usize, data: Vec<u8>) -> Result<Vec<u8>> {
        self.access(backend, Op::Write, v, Some(data))
    }

    /// Re-encryption of a fetched cell for the server cache.
    fn cache_cell(&mut self, cell: Vec<u8>, idx: usize) -> Result<Vec<u8>> {
        if self.cfg.design.is_layered() {
            layered_add(&cell, &self.cipher(), self.geo.token_len())
        } else {
            let mut c = cell;
            ctr_layer(&mut c, &self.client_key, CtrDomain::new(self.epoch, PhaseTag::Cache), idx as u64, self.cfg.n)?;
            Ok(c)
        }
    }

    /// Instructions for the next eviction plus the secrets they commit to.
    pub fn make_instructions(&mut self) -> Result<(Vec<MixInstruction>, EpochSecrets)> {
        let next_epoch = self.epoch + 1;
        if next_epoch > u32::MAX as u64 {
            return Err(Error::StaleState("epoch counter exhausted".into()));
        }
        let cfg = &self.cfg;
        let m = cfg.m;
        let next = EpochSecrets::random(next_epoch, m, cfg.design.is_parallel(), cfg.kappa, &mut self.rng);
        let prev = (!cfg.design.is_layered()).then(|| self.history.get(&self.epoch).cloned()).flatten();
        if !cfg.design.is_layered() && prev.is_none() {
            return Err(Error::StaleState("missing current epoch secrets".into()));
        }
        let shares = next.shares();
        let prev_shares = prev.as_ref().map(EpochSecrets::shares).unwrap_or_default();
        let beta = |shares: &[Scalar], i: usize| -> Option<(RistrettoPoint, Scalar)> {
            (!shares.is_empty()).then(|| {
                let others = shares
                    .iter()
                    .enumerate()
                    .filter(|(l, _)| *l != i)
                    .fold(Scalar::ONE, |a, (_, s)| a * s);
                (Ristretto255::base_exp(&others), shares[i])
            })
        };
        let rebuild_public = cfg.design == Design::ParallelRebuild;
        let instructions = (0..m)
            .map(|i| {
                let new_public = beta(&shares, i);
                let old_public = if rebuild_public { beta(&prev_shares, i) } else { None };
                MixInstruction {
                    design: cfg.design,
                    epoch: next_epoch,
                    mix_index: i as u8,
                    kappa: cfg.kappa,
                    n: cfg.n as u64,
                    rounds: if cfg.design.is_parallel() { self.geo.rounds as u32 } else { 0 },
                    cell_len: self.geo.cell_len as u32,
                    db: self.db_address.clone(),
                    mixes: self.addresses.clone(),
                    alpha: Ristretto255::base_exp(&next.z[i]),
                    old_alpha: prev.as_ref().map(|p| Ristretto255::base_exp(&p.z[i])),
                    beta: new_public.map(|b| b.0),
                    share: new_public.map(|b| b.1),
                    old_beta: old_public.map(|b| b.0),
                    old_share: old_public.map(|b| b.1),
                    client_public: rebuild_public.then_some(self.identity.1),
                }
            })
            .collect();
        Ok((instructions, next))
    }

    /// Writes refreshed records home, runs the eviction, and moves to the
    /// next epoch.
    pub fn evict(&mut self, backend: &mut dyn Backend) -> Result<()> {
        let fetched = std::mem::take(&mut self.fetched);
        for (slot, h) in &fetched {
            let cell = if self.cfg.design.is_layered() {
                self.layered_client_cell(h.virt, &h.payload)?
            } else {
                let (at, cell) = self.rebuild_cell(h.virt, h.payload.clone())?;
                debug_assert_eq!(at, *slot);
                cell
            };
            backend.write(Region::Db, *slot, cell)?;
        }
        let (instructions, next) = self.make_instructions()?;
        let epoch = next.epoch;
        if let Err(e) = backend.evict(epoch, instructions) {
            self.fetched = fetched;
            return Err(e);
        }
        self.commit(next)?;
        debug!("client: now at epoch {epoch}");
        Ok(())
    }

    fn commit(&mut self, next: EpochSecrets) -> Result<()> {
        let epoch = next.epoch;
        if !self.cfg.design.is_layered() {
            self.history.clear();
            self.views.clear();
        }
        self.history.insert(epoch, next);
        self.epoch = epoch;
        if self.cfg.design.is_layered() {
            let view = self.view(epoch)?;
            for s in self.table.iter_mut() {
                *s = view.forward(*s).0;
            }
        }
        self.fetched.clear();
        self.held.clear();
        self.cache_fill = 0;
        Ok(())
    }

    /// Layered designs: downloads and re-encrypts the whole database under
    /// a fresh client key, discarding the key history. Only valid right
    /// after an eviction.
    pub fn reinit(&mut self, backend: &mut dyn Backend) -> Result<()> {
        if !self.cfg.design.is_layered() {
            return Err(Error::ConfigMismatch("only layered designs accumulate history".into()));
        }
        if self.cache_fill > 0 {
            return Err(Error::StaleState("reinit needs an empty cache".into()));
        }
        let mut data = vec![Vec::new(); self.cfg.n];
        for slot in 0..self.cfg.n {
            let cell = backend.read(Region::Db, slot)?;
            let v = self.reverse_lookup(slot)?;
            data[v] = self.decrypt_layered(&cell, slot, v)?.0;
        }
        self.client_key = SymKey::random(self.cfg.kappa, &mut self.rng);
        let cells = self.encrypt_fresh(data)?;
        for (slot, c) in cells.into_iter().enumerate() {
            backend.write(Region::Db, slot, c)?;
        }
        Ok(())
    }

    /// Bits of long-term client state, counting `2κ` per stored scalar or
    /// seed and `⌈log2 n⌉` per table entry. The fixed client key and key
    /// pair are excluded.
    pub fn storage_bits(&self) -> u64 {
        let kappa = self.cfg.kappa.bits() as u64;
        let per_epoch: u64 = self
            .history
            .values()
            .map(|e| 2 * kappa * (e.z.len() as u64 + e.share_seed.is_some() as u64))
            .sum();
        let table = if self.cfg.design.is_layered() {
            self.cfg.n as u64 * (self.cfg.n as f64).log2().ceil() as u64
        } else {
            0
        };
        per_epoch + table
    }

    /// Epochs whose secrets are retained.
    pub fn history_len(&self) -> usize {
        self.history.len()
    }
}

/// `H_n = 1 + 1/2 + ... + 1/n`.
pub fn harmonic(n: u64) -> f64 {
    // summing small terms first keeps the error down for large n
    (1..=n).rev().map(|i| 1.0 / i as f64).sum()
}

/// Coupon-collector estimate of how much history a layered client must
/// peel. `e_all` is the expected number of epochs until every record has
/// been refreshed at least once when each epoch refreshes `s * d` records;
/// `e_per_record` is the per-record estimate in layers, for `r` layers per
/// epoch.
pub fn expected_layers(n: u64, s: u64, d: u64, r: u64) -> (f64, f64) {
    let h = harmonic(n);
    let sd = (s * d) as f64;
    let e_all = n as f64 / sd * h;
    let e_rec = r as f64 / sd * ((n as f64 + 1.0) / 2.0 * (h - 0.5) + 0.5);
    (e_all, e_rec)
}
