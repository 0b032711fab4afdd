//! Mix node: a transport-agnostic state machine that turns incoming frames
//! into outgoing frames.

use std::collections::BTreeMap;

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;
use log::{debug, trace};

use crate::error::{Error, Result};
use crate::rounds::{dispatch, ed_step, layered_step, unwrap_step, wrap_step, Geometry, MixKeys, PublicPerms};
use crate::shuffle::Design;
use crate::sym::{ctr_layer_with, CtrDomain, PhaseTag};
use crate::wire::{decode_batch, encode_batch, encode_fetch, Batch, Frame, FrameKind, MixInstruction, NodeId, Phase};

/// Work done by one mix, for the cost audit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostCounters {
    /// Record-layer cipher operations; adding and removing a layer each
    /// count once.
    pub encryptions: u64,
    /// Permutations applied, sorting of merged batches included.
    pub permutations: u64,
    /// Elements moved by those permutations.
    pub permuted_elements: u64,
    /// Cell bytes sent in record batches and database stores.
    pub bytes_sent: u64,
    pub batches_sent: u64,
}

impl CostCounters {
    pub fn add(&mut self, o: &CostCounters) {
        self.encryptions += o.encryptions;
        self.permutations += o.permutations;
        self.permuted_elements += o.permuted_elements;
        self.bytes_sent += o.bytes_sent;
        self.batches_sent += o.batches_sent;
    }

    fn permuted(&mut self, len: usize) {
        self.permutations += 1;
        self.permuted_elements += len as u64;
    }
}

/// Input the mix waits for next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Step {
    phase: Phase,
    round: u16,
    /// Number of batches that complete the step.
    batches: usize,
}

/// Everything a mix derives for one eviction.
struct Eviction {
    ins: MixInstruction,
    geo: Geometry,
    idx: usize,
    new: MixKeys,
    old: Option<MixKeys>,
    public: Option<PublicPerms>,
    old_public: Option<PublicPerms>,
    steps: Vec<Step>,
    cursor: usize,
    inbox: BTreeMap<(Phase, u16), Vec<(NodeId, Batch)>>,
}

pub struct MixNode {
    index: u8,
    private: Scalar,
    public: RistrettoPoint,
    eviction: Option<Eviction>,
    completed_epoch: u64,
    costs: CostCounters,
    skip_ed: bool,
    /// Batches that overtook their epoch's instruction on another link.
    early: Vec<Frame>,
}

/// Most batches held back while waiting for an instruction.
const MAX_EARLY: usize = 1024;

type Out = Vec<(NodeId, Frame)>;

impl MixNode {
    pub fn new(index: u8, private: Scalar, public: RistrettoPoint) -> Self {
        MixNode {
            index,
            private,
            public,
            eviction: None,
            completed_epoch: 0,
            costs: CostCounters::default(),
            skip_ed: false,
            early: Vec::new(),
        }
    }

    /// Test hook: strip the old E/D layer without adding the new one.
    #[doc(hidden)]
    pub fn set_skip_ed(&mut self, skip: bool) {
        self.skip_ed = skip;
    }

    /// When an eviction is stuck, the first batch the mix is still
    /// waiting for.
    pub fn missing_batch(&self) -> Option<Error> {
        let ev = self.eviction.as_ref()?;
        let step = ev.steps[ev.cursor];
        let got: Vec<NodeId> = ev
            .inbox
            .get(&(step.phase, step.round))
            .map(|v| v.iter().map(|(f, _)| *f).collect())
            .unwrap_or_default();
        let from = if step.batches > 1 {
            (0..ev.geo.m as u8).map(NodeId::Mix).find(|f| !got.contains(f))?
        } else {
            expected_sender(&ev.geo, ev.idx, step)
        };
        Some(Error::MissingBatch {
            round: step.round,
            from: from.to_u8(),
        })
    }

    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn public_key(&self) -> RistrettoPoint {
        self.public
    }

    pub fn costs(&self) -> CostCounters {
        self.costs
    }

    pub fn reset_costs(&mut self) {
        self.costs = CostCounters::default();
    }

    /// True when no eviction is in progress.
    pub fn is_idle(&self) -> bool {
        self.eviction.is_none()
    }

    pub fn handle(&mut self, frame: Frame) -> Result<Out> {
        match frame.kind {
            FrameKind::Instruction => {
                let mut out = self.bootstrap(&frame)?;
                let epoch = frame.epoch;
                let (now, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.early).into_iter().partition(|f| f.epoch == epoch);
                self.early = later;
                for f in now {
                    out.extend(self.on_batch(f)?);
                }
                Ok(out)
            }
            FrameKind::RecordBatch => self.on_batch(frame),
            FrameKind::Ack => Ok(Vec::new()),
            k => Err(Error::Frame(format!("mix cannot handle {k:?}"))),
        }
    }

    fn bootstrap(&mut self, frame: &Frame) -> Result<Out> {
        let ins = MixInstruction::decode(&frame.payload)?;
        if ins.mix_index != self.index {
            return Err(Error::BadInstruction(format!(
                "instruction for mix {} delivered to mix {}",
                ins.mix_index, self.index
            )));
        }
        if ins.epoch != frame.epoch {
            return Err(Error::BadInstruction("frame and instruction epochs differ".into()));
        }
        if ins.epoch <= self.completed_epoch || self.eviction.is_some() {
            return Err(Error::StaleState(format!(
                "mix {} asked to run epoch {} after {}",
                self.index, ins.epoch, self.completed_epoch
            )));
        }
        let m = ins.mixes.len();
        let rounds = if ins.design.is_parallel() { ins.rounds as usize } else { m };
        let geo = Geometry::new(ins.design, ins.n as usize, m, rounds, ins.cell_len as usize, ins.kappa)?;
        let new = MixKeys::for_mix(&ins.alpha, &self.private, &geo)?;
        let old = ins
            .old_alpha
            .map(|a| MixKeys::for_mix(&a, &self.private, &geo))
            .transpose()?;
        let context = ins.client_public;
        let public = match (ins.beta, ins.share) {
            (Some(b), Some(s)) => Some(PublicPerms::for_mix(&b, &s, context.as_ref(), &geo)?),
            _ => None,
        };
        let old_public = match (ins.old_beta, ins.old_share) {
            (Some(b), Some(s)) => Some(PublicPerms::for_mix(&b, &s, context.as_ref(), &geo)?),
            _ => None,
        };
        let idx = self.index as usize;
        let steps = plan(&geo, idx);
        debug!("mix {idx}: epoch {} {} with {} steps", ins.epoch, ins.design, steps.len());
        let first = steps[0];
        let epoch = ins.epoch;
        self.eviction = Some(Eviction {
            ins,
            geo,
            idx,
            new,
            old,
            public,
            old_public,
            steps,
            cursor: 0,
            inbox: BTreeMap::new(),
        });
        // whoever starts the pipeline pulls its records from storage
        let fetch = if geo.design.is_parallel() {
            let k = geo.chunk();
            Some((idx * k..(idx + 1) * k).map(|s| s as u64).collect::<Vec<_>>())
        } else if idx == 0 {
            Some((0..geo.n as u64).collect())
        } else {
            None
        };
        Ok(fetch
            .map(|slots| {
                vec![(
                    NodeId::Storage,
                    Frame::new(FrameKind::DbFetch, epoch, first.phase, 0, NodeId::Mix(self.index), encode_fetch(&slots)),
                )]
            })
            .unwrap_or_default())
    }

    fn on_batch(&mut self, frame: Frame) -> Result<Out> {
        if self.eviction.is_none() && frame.epoch > self.completed_epoch && self.early.len() < MAX_EARLY {
            self.early.push(frame);
            return Ok(Vec::new());
        }
        let ev = self
            .eviction
            .as_mut()
            .ok_or_else(|| Error::StaleState(format!("mix {} has no eviction in progress", self.index)))?;
        if frame.epoch != ev.ins.epoch {
            return Err(Error::StaleState(format!(
                "batch for epoch {} during epoch {}",
                frame.epoch, ev.ins.epoch
            )));
        }
        let label = (frame.phase, frame.round);
        let pos = ev.steps.iter().position(|s| (s.phase, s.round) == label);
        let current = ev.steps[ev.cursor];
        let expected = format!("{:?} round {}", current.phase, current.round);
        let got = format!("{:?} round {}", frame.phase, frame.round);
        match pos {
            Some(p) if p == ev.cursor => {}
            // parallel peers may run one step ahead; hold their batches
            Some(p) if p > ev.cursor && ev.geo.design.is_parallel() => {}
            _ => return Err(Error::PhaseOrderViolation { expected, got }),
        }
        let batch = decode_batch(&frame.payload, ev.geo.cell_len)?;
        let slot = ev.inbox.entry(label).or_default();
        if slot.iter().any(|(f, _)| *f == frame.from) {
            return Err(Error::Frame(format!("duplicate batch from {:?} for {got}", frame.from)));
        }
        trace!("mix {}: {} records from {:?} for {got}", ev.idx, batch.len(), frame.from);
        slot.push((frame.from, batch));
        let mut out = Vec::new();
        loop {
            let ev = self.eviction.as_mut().unwrap();
            let step = ev.steps[ev.cursor];
            let key = (step.phase, step.round);
            if ev.inbox.get(&key).map_or(0, Vec::len) < step.batches {
                break;
            }
            let parts = ev.inbox.remove(&key).unwrap();
            let done = self.run_step(step, parts, &mut out)?;
            if done {
                let ev = self.eviction.take().unwrap();
                self.completed_epoch = ev.ins.epoch;
                debug!("mix {}: epoch {} done", ev.idx, ev.ins.epoch);
                break;
            }
            self.eviction.as_mut().unwrap().cursor += 1;
        }
        Ok(out)
    }

    /// Runs one step; returns true once the mix has nothing left to do.
    fn run_step(&mut self, step: Step, parts: Vec<(NodeId, Batch)>, out: &mut Out) -> Result<bool> {
        let ev = self.eviction.as_ref().unwrap();
        let merged = parts.len() > 1;
        let mut batch: Batch = parts.into_iter().flat_map(|(_, b)| b).collect();
        let geo = ev.geo;
        let mut em = Emitter {
            skip_ed: self.skip_ed,
            costs: &mut self.costs,
            out,
            epoch: ev.ins.epoch,
            me: NodeId::Mix(ev.idx as u8),
            cell_len: geo.cell_len,
        };
        if merged {
            batch.sort_unstable_by_key(|(s, _)| *s);
            em.costs.permuted(batch.len());
        }
        match geo.design {
            Design::CascadeLayered => cascade_layered(ev, batch, &mut em),
            Design::CascadeRebuild => cascade_rebuild(ev, step, batch, &mut em),
            Design::ParallelLayered | Design::ParallelRebuild => parallel(ev, step, batch, &mut em),
        }
    }
}

struct Emitter<'a> {
    skip_ed: bool,
    costs: &'a mut CostCounters,
    out: &'a mut Out,
    epoch: u64,
    me: NodeId,
    cell_len: usize,
}

impl Emitter<'_> {
    fn send(&mut self, to: NodeId, kind: FrameKind, phase: Phase, round: u16, b: &Batch) {
        self.costs.bytes_sent += (b.len() * self.cell_len) as u64;
        self.costs.batches_sent += 1;
        self.out
            .push((to, Frame::new(kind, self.epoch, phase, round, self.me, encode_batch(b))));
    }

    fn forward(&mut self, to: usize, phase: Phase, round: u16, b: &Batch) {
        self.send(NodeId::Mix(to as u8), FrameKind::RecordBatch, phase, round, b);
    }

    fn store(&mut self, round: u16, b: &Batch) {
        self.send(NodeId::Storage, FrameKind::DbStore, Phase::Wrap, round, b);
    }

    fn work(&mut self, ops: usize, perms: usize, len: usize) {
        self.costs.encryptions += ops as u64;
        for _ in 0..perms {
            self.costs.permuted(len);
        }
    }
}

fn cascade_layered(ev: &Eviction, mut batch: Batch, em: &mut Emitter) -> Result<bool> {
    let (i, m) = (ev.idx, ev.geo.m);
    let ops = layered_step(&mut batch, ev.new.cipher(0), ev.new.perm(0), 0, &ev.geo)?;
    em.work(ops, 1, batch.len());
    if i + 1 < m {
        em.forward(i + 1, Phase::Wrap, i as u16 + 1, &batch);
    } else {
        em.store(m as u16, &batch);
    }
    Ok(true)
}

/// Unwrap runs forward along the cascade, E/D runs backward from the last
/// mix, and wrap runs backward again starting at the last mix so that the
/// first mix ends up storing.
fn cascade_rebuild(ev: &Eviction, step: Step, mut batch: Batch, em: &mut Emitter) -> Result<bool> {
    let (i, m, geo, epoch) = (ev.idx, ev.geo.m, &ev.geo, ev.ins.epoch);
    let old = ev.old.as_ref().expect("rebuild carries old keys");
    let len = batch.len();
    if step.phase == Phase::Wrap {
        let ops = wrap_step(&mut batch, ev.new.cipher(0), ev.new.perm(0), 0, epoch, geo)?;
        em.work(ops, 1, len);
        if i > 0 {
            em.forward(i - 1, Phase::Wrap, i as u16 - 1, &batch);
        } else {
            em.store(0, &batch);
        }
        return Ok(true);
    }
    if step.phase == Phase::Unwrap {
        let ops = unwrap_step(&mut batch, old.cipher(0), old.inverse(0), 0, epoch - 1, geo)?;
        em.work(ops, 1, len);
        if i + 1 < m {
            em.forward(i + 1, Phase::Unwrap, i as u16 + 1, &batch);
            return Ok(false);
        }
    }
    let ops = swap_ed(ev, &mut batch, em)?;
    em.work(ops, 0, len);
    if i > 0 {
        em.forward(i - 1, Phase::Ed, i as u16 - 1, &batch);
    } else {
        em.forward(m - 1, Phase::Wrap, m as u16 - 1, &batch);
    }
    Ok(false)
}

fn swap_ed(ev: &Eviction, batch: &mut Batch, em: &Emitter) -> Result<usize> {
    let old = ev.old.as_ref().expect("rebuild carries old keys");
    let epoch = ev.ins.epoch;
    if em.skip_ed {
        let od = CtrDomain::new(epoch - 1, PhaseTag::Ed);
        for (slot, cell) in batch.iter_mut() {
            ctr_layer_with(cell, old.cipher(0), od, *slot, ev.geo.n)?;
        }
        return Ok(batch.len());
    }
    ed_step(batch, old.cipher(0), epoch - 1, ev.new.cipher(0), epoch, &ev.geo)
}

/// Local wrap of round `j` followed by its public dispatch.
fn wrap_round(ev: &Eviction, mut batch: Batch, j: usize, em: &mut Emitter) -> Result<()> {
    let geo = &ev.geo;
    let base = ev.idx * geo.chunk();
    let len = batch.len();
    let ops = if geo.design.is_layered() {
        layered_step(&mut batch, ev.new.cipher(j), ev.new.perm(j), base, geo)?
    } else {
        wrap_step(&mut batch, ev.new.cipher(j), ev.new.perm(j), base, ev.ins.epoch, geo)?
    };
    em.work(ops, 1, len);
    let public = ev.public.as_ref().expect("parallel eviction has public permutations");
    for (d, b) in dispatch(batch, public.perm(j), geo.m, ev.idx)?.iter().enumerate() {
        em.forward(d, Phase::Wrap, j as u16, b);
    }
    Ok(())
}

fn parallel(ev: &Eviction, step: Step, mut batch: Batch, em: &mut Emitter) -> Result<bool> {
    let geo = &ev.geo;
    let (i, m, r, epoch) = (ev.idx, geo.m, geo.rounds, ev.ins.epoch);
    let base = i * geo.chunk();
    let len = batch.len();
    let round = step.round as usize;
    match step.phase {
        // round 0 is the fetch from storage
        Phase::Wrap if round < r => wrap_round(ev, batch, round + 1, em)?,
        Phase::Wrap => {
            em.store(r as u16, &batch);
            return Ok(true);
        }
        Phase::Unwrap => {
            let old = ev.old.as_ref().expect("rebuild carries old keys");
            let old_public = ev.old_public.as_ref().expect("rebuild carries the old public chain");
            if round > 0 {
                let ops = unwrap_step(&mut batch, old.cipher(round), old.inverse(round), base, epoch - 1, geo)?;
                em.work(ops, 1, len);
            }
            if round != 1 {
                // undo the public permutation of the round below
                let next = if round == 0 { r } else { round - 1 };
                for (d, b) in dispatch(batch, old_public.inverse(next), m, i)?.iter().enumerate() {
                    em.forward(d, Phase::Unwrap, next as u16, b);
                }
            } else {
                // fully unwrapped: send the own chunk around the E/D ring
                let ops = swap_ed(ev, &mut batch, em)?;
                em.work(ops, 0, len);
                em.forward((i + 1) % m, Phase::Ed, 1, &batch);
            }
        }
        Phase::Ed if round < m => {
            let ops = swap_ed(ev, &mut batch, em)?;
            em.work(ops, 0, len);
            em.forward((i + 1) % m, Phase::Ed, step.round + 1, &batch);
        }
        // own chunk is back carrying every mix's fresh E/D layer
        Phase::Ed => wrap_round(ev, batch, 1, em)?,
        Phase::Access => unreachable!("plans never wait for access traffic"),
    }
    Ok(false)
}

fn expected_sender(geo: &Geometry, i: usize, step: Step) -> NodeId {
    let m = geo.m;
    let r = step.round as usize;
    match (geo.design, step.phase) {
        (Design::ParallelLayered | Design::ParallelRebuild, Phase::Ed) => NodeId::Mix(((i + m - 1) % m) as u8),
        (Design::ParallelLayered | Design::ParallelRebuild, _) => NodeId::Storage,
        (_, Phase::Unwrap) | (Design::CascadeLayered, _) if r == 0 => NodeId::Storage,
        (_, Phase::Unwrap) | (Design::CascadeLayered, _) => NodeId::Mix(i as u8 - 1),
        (_, Phase::Wrap) if i + 1 == m => NodeId::Mix(0),
        _ => NodeId::Mix(i as u8 + 1),
    }
}

/// The ordered inputs mix `i` consumes during one eviction.
fn plan(geo: &Geometry, i: usize) -> Vec<Step> {
    let m = geo.m;
    let one = |phase, round: usize| Step {
        phase,
        round: round as u16,
        batches: 1,
    };
    let all = |phase, round: usize| Step {
        phase,
        round: round as u16,
        batches: m,
    };
    let r = geo.rounds;
    match geo.design {
        Design::CascadeLayered => vec![one(Phase::Wrap, i)],
        Design::CascadeRebuild => {
            let mut v = vec![one(Phase::Unwrap, i)];
            if i + 1 < m {
                v.push(one(Phase::Ed, i));
            }
            v.push(one(Phase::Wrap, i));
            v
        }
        Design::ParallelLayered => {
            let mut v = vec![one(Phase::Wrap, 0)];
            v.extend((1..=r).map(|j| all(Phase::Wrap, j)));
            v
        }
        Design::ParallelRebuild => {
            let mut v = vec![one(Phase::Unwrap, 0)];
            v.extend((1..=r).rev().map(|j| all(Phase::Unwrap, j)));
            v.extend((1..=m).map(|h| one(Phase::Ed, h)));
            v.extend((1..=r).map(|j| all(Phase::Wrap, j)));
            v
        }
    }
}
