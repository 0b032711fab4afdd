//! Binary wire format shared by the in-process simulator and the TCP
//! transport.
//!
//! A frame is `[len u32][type u8][epoch u64][phase u8][round u16][from u8]
//! [payload]`, big-endian, where `len` counts every byte after itself.

use std::io::{Read, Write};

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;

use crate::error::{Error, Result};
use crate::group::{Group, Kappa, Ristretto255};
use crate::shuffle::Design;

/// Frame header size after the length prefix.
pub const HEADER_LEN: usize = 1 + 8 + 1 + 2 + 1;
/// Refuse to allocate for frames larger than this.
pub const MAX_FRAME: usize = 1 << 30;

/// Network address of a protocol participant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Mix(u8),
    Storage,
    Client,
}

impl NodeId {
    pub const STORAGE: u8 = 0xFE;
    pub const CLIENT: u8 = 0xFF;

    pub fn to_u8(self) -> u8 {
        match self {
            NodeId::Mix(i) => i,
            NodeId::Storage => Self::STORAGE,
            NodeId::Client => Self::CLIENT,
        }
    }

    pub fn from_u8(b: u8) -> Self {
        match b {
            Self::STORAGE => NodeId::Storage,
            Self::CLIENT => NodeId::Client,
            i => NodeId::Mix(i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Instruction = 0x01,
    RecordBatch = 0x02,
    Ack = 0x03,
    DbFetch = 0x04,
    DbStore = 0x05,
}

impl FrameKind {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => FrameKind::Instruction,
            0x02 => FrameKind::RecordBatch,
            0x03 => FrameKind::Ack,
            0x04 => FrameKind::DbFetch,
            0x05 => FrameKind::DbStore,
            _ => return Err(Error::Frame(format!("unknown frame type {b:#04x}"))),
        })
    }
}

/// Eviction phase carried in the frame header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Phase {
    /// Client traffic outside an eviction.
    Access = 0,
    Unwrap = 1,
    Ed = 2,
    Wrap = 3,
}

impl Phase {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Phase::Access,
            1 => Phase::Unwrap,
            2 => Phase::Ed,
            3 => Phase::Wrap,
            _ => return Err(Error::Frame(format!("unknown phase {b}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub epoch: u64,
    pub phase: Phase,
    pub round: u16,
    pub from: NodeId,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, epoch: u64, phase: Phase, round: u16, from: NodeId, payload: Vec<u8>) -> Self {
        Frame {
            kind,
            epoch,
            phase,
            round,
            from,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + HEADER_LEN + self.payload.len());
        out.extend_from_slice(&((HEADER_LEN + self.payload.len()) as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.push(self.phase as u8);
        out.extend_from_slice(&self.round.to_be_bytes());
        out.push(self.from.to_u8());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize)> {
        if bytes.len() < 4 {
            return Err(Error::Frame("truncated length".into()));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if !(HEADER_LEN..=MAX_FRAME).contains(&len) {
            return Err(Error::Frame(format!("bad frame length {len}")));
        }
        let body = bytes
            .get(4..4 + len)
            .ok_or_else(|| Error::Frame("truncated frame".into()))?;
        Ok((Self::decode_body(body)?, 4 + len))
    }

    fn decode_body(body: &[u8]) -> Result<Frame> {
        Ok(Frame {
            kind: FrameKind::from_u8(body[0])?,
            epoch: u64::from_be_bytes(body[1..9].try_into().unwrap()),
            phase: Phase::from_u8(body[9])?,
            round: u16::from_be_bytes(body[10..12].try_into().unwrap()),
            from: NodeId::from_u8(body[12]),
            payload: body[HEADER_LEN..].to_vec(),
        })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_be_bytes(len) as usize;
        if !(HEADER_LEN..=MAX_FRAME).contains(&len) {
            return Err(Error::Frame(format!("bad frame length {len}")));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Self::decode_body(&body)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }
}

/// Cells tagged with the slot they belong to.
pub type Batch = Vec<(u64, Vec<u8>)>;

/// `count u32` then `count` pairs of `slot u64 ‖ cell`. Cell length is
/// fixed per deployment and not repeated on the wire.
pub fn encode_batch(batch: &[(u64, Vec<u8>)]) -> Vec<u8> {
    let cell = batch.first().map_or(0, |(_, c)| c.len());
    let mut out = Vec::with_capacity(4 + batch.len() * (8 + cell));
    out.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    for (slot, c) in batch {
        out.extend_from_slice(&slot.to_be_bytes());
        out.extend_from_slice(c);
    }
    out
}

pub fn decode_batch(payload: &[u8], cell_len: usize) -> Result<Batch> {
    if payload.len() < 4 {
        return Err(Error::Frame("truncated batch count".into()));
    }
    let count = u32::from_be_bytes(payload[..4].try_into().unwrap()) as usize;
    let entry = 8 + cell_len;
    let rest = &payload[4..];
    if Some(rest.len()) != count.checked_mul(entry) {
        return Err(Error::Frame(format!(
            "batch of {count} cells of {cell_len} bytes cannot fill {} bytes",
            rest.len()
        )));
    }
    Ok(rest
        .chunks(entry)
        .map(|e| (u64::from_be_bytes(e[..8].try_into().unwrap()), e[8..].to_vec()))
        .collect())
}

/// Fetch request: `count u32` then `count` slot numbers.
pub fn encode_fetch(slots: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * slots.len());
    out.extend_from_slice(&(slots.len() as u32).to_be_bytes());
    for s in slots {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn decode_fetch(payload: &[u8]) -> Result<Vec<u64>> {
    if payload.len() < 4 {
        return Err(Error::Frame("truncated fetch count".into()));
    }
    let count = u32::from_be_bytes(payload[..4].try_into().unwrap()) as usize;
    if Some(payload.len() - 4) != count.checked_mul(8) {
        return Err(Error::Frame("fetch length mismatch".into()));
    }
    Ok(payload[4..]
        .chunks(8)
        .map(|c| u64::from_be_bytes(c.try_into().unwrap()))
        .collect())
}

/// Everything a mix needs to run its part of one eviction.
///
/// `alpha` and `beta` start the private and public chains for the epoch
/// being written; the `old_` fields reconstruct the previous epoch's
/// chains for the unwrap phase of the rebuild designs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixInstruction {
    pub design: Design,
    pub epoch: u64,
    pub mix_index: u8,
    pub kappa: Kappa,
    pub n: u64,
    /// Parallel rounds; zero for cascades.
    pub rounds: u32,
    pub cell_len: u32,
    pub db: String,
    /// Mix addresses in network order.
    pub mixes: Vec<String>,
    pub alpha: RistrettoPoint,
    pub old_alpha: Option<RistrettoPoint>,
    pub beta: Option<RistrettoPoint>,
    pub share: Option<Scalar>,
    pub old_beta: Option<RistrettoPoint>,
    pub old_share: Option<Scalar>,
    /// Client public key, bound into the public chain of the
    /// parallel-rebuild design.
    pub client_public: Option<RistrettoPoint>,
}

const F_OLD_ALPHA: u8 = 1;
const F_BETA: u8 = 2;
const F_SHARE: u8 = 4;
const F_OLD_BETA: u8 = 8;
const F_OLD_SHARE: u8 = 16;
const F_CLIENT: u8 = 32;

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::BadInstruction("truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::BadInstruction("address is not UTF-8".into()))
    }

    fn point(&mut self) -> Result<RistrettoPoint> {
        Ristretto255::decode(self.take(32)?)
    }

    fn scalar(&mut self) -> Result<Scalar> {
        Ristretto255::decode_scalar(self.take(32)?)
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl MixInstruction {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(self.design.code());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.push(self.mix_index);
        out.extend_from_slice(&(self.kappa.bits() as u16).to_be_bytes());
        out.extend_from_slice(&self.n.to_be_bytes());
        out.extend_from_slice(&self.rounds.to_be_bytes());
        out.extend_from_slice(&self.cell_len.to_be_bytes());
        put_string(&mut out, &self.db);
        out.push(self.mixes.len() as u8);
        for m in &self.mixes {
            put_string(&mut out, m);
        }
        let mut flags = 0;
        for (present, f) in [
            (self.old_alpha.is_some(), F_OLD_ALPHA),
            (self.beta.is_some(), F_BETA),
            (self.share.is_some(), F_SHARE),
            (self.old_beta.is_some(), F_OLD_BETA),
            (self.old_share.is_some(), F_OLD_SHARE),
            (self.client_public.is_some(), F_CLIENT),
        ] {
            if present {
                flags |= f;
            }
        }
        out.push(flags);
        out.extend_from_slice(&Ristretto255::encode(&self.alpha));
        let points = [&self.old_alpha, &self.beta];
        for p in points.into_iter().flatten() {
            out.extend_from_slice(&Ristretto255::encode(p));
        }
        if let Some(s) = &self.share {
            out.extend_from_slice(&Ristretto255::encode_scalar(s));
        }
        if let Some(p) = &self.old_beta {
            out.extend_from_slice(&Ristretto255::encode(p));
        }
        if let Some(s) = &self.old_share {
            out.extend_from_slice(&Ristretto255::encode_scalar(s));
        }
        if let Some(p) = &self.client_public {
            out.extend_from_slice(&Ristretto255::encode(p));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        let design = Design::from_code(r.u8()?)
            .ok_or_else(|| Error::BadInstruction("unknown design".into()))?;
        let epoch = r.u64()?;
        let mix_index = r.u8()?;
        let kappa = Kappa::from_bits(r.u16()? as u32)
            .map_err(|e| Error::BadInstruction(e.to_string()))?;
        let n = r.u64()?;
        let rounds = r.u32()?;
        let cell_len = r.u32()?;
        let db = r.string()?;
        let count = r.u8()?;
        let mixes = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let flags = r.u8()?;
        if flags & !(F_OLD_ALPHA | F_BETA | F_SHARE | F_OLD_BETA | F_OLD_SHARE | F_CLIENT) != 0 {
            return Err(Error::BadInstruction("unknown flags".into()));
        }
        let has = |f: u8| flags & f != 0;
        let alpha = r.point()?;
        let old_alpha = has(F_OLD_ALPHA).then(|| r.point()).transpose()?;
        let beta = has(F_BETA).then(|| r.point()).transpose()?;
        let share = has(F_SHARE).then(|| r.scalar()).transpose()?;
        let old_beta = has(F_OLD_BETA).then(|| r.point()).transpose()?;
        let old_share = has(F_OLD_SHARE).then(|| r.scalar()).transpose()?;
        let client_public = has(F_CLIENT).then(|| r.point()).transpose()?;
        if !r.buf.is_empty() {
            return Err(Error::BadInstruction("trailing bytes".into()));
        }
        let ins = MixInstruction {
            design,
            epoch,
            mix_index,
            kappa,
            n,
            rounds,
            cell_len,
            db,
            mixes,
            alpha,
            old_alpha,
            beta,
            share,
            old_beta,
            old_share,
            client_public,
        };
        ins.validate()?;
        Ok(ins)
    }

    /// Checks that exactly the fields the design needs are present.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadInstruction(m.to_string()));
        let m = self.mixes.len();
        if m == 0 || self.mix_index as usize >= m {
            return bad("mix index outside the mix list");
        }
        if m > NodeId::STORAGE as usize {
            return bad("too many mixes");
        }
        if self.n == 0 || !self.n.is_multiple_of(m as u64) {
            return bad("mixes must evenly divide the database");
        }
        if self.cell_len == 0 {
            return bad("zero cell length");
        }
        if self.epoch == 0 || self.epoch > u32::MAX as u64 {
            return bad("epoch out of range");
        }
        let rebuild = !self.design.is_layered();
        if rebuild != self.old_alpha.is_some() {
            return bad("previous private element present iff rebuilding");
        }
        let parallel = self.design.is_parallel();
        if parallel != (self.rounds > 0) {
            return bad("round count present iff parallel");
        }
        if parallel != (self.beta.is_some() && self.share.is_some()) {
            return bad("public element and share present iff parallel");
        }
        let needs_old_public = self.design == Design::ParallelRebuild;
        if needs_old_public != (self.old_beta.is_some() && self.old_share.is_some()) {
            return bad("previous public element present iff parallel rebuild");
        }
        if needs_old_public != self.client_public.is_some() {
            return bad("client key present iff parallel rebuild");
        }
        let identity = Ristretto255::identity();
        let points = [Some(&self.alpha), self.old_alpha.as_ref(), self.beta.as_ref(), self.old_beta.as_ref()];
        if points.into_iter().flatten().any(|p| *p == identity) {
            return bad("identity element");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::keygen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn instruction(design: Design) -> MixInstruction {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut p = || keygen::<Ristretto255, _>(&mut rng);
        let (s1, a) = p();
        let (s2, b) = p();
        let (_, c) = p();
        let (_, d) = p();
        let (_, e) = p();
        let parallel = design.is_parallel();
        let pr = design == Design::ParallelRebuild;
        MixInstruction {
            design,
            epoch: 3,
            mix_index: 1,
            kappa: Kappa::K128,
            n: 12,
            rounds: if parallel { 7 } else { 0 },
            cell_len: 40,
            db: "storage".into(),
            mixes: vec!["m0".into(), "m1".into(), "m2".into()],
            alpha: a,
            old_alpha: (!design.is_layered()).then_some(b),
            beta: parallel.then_some(c),
            share: parallel.then_some(s1),
            old_beta: pr.then_some(d),
            old_share: pr.then_some(s2),
            client_public: pr.then_some(e),
        }
    }

    #[test]
    fn frame_roundtrip() {
        let f = Frame::new(FrameKind::RecordBatch, 7, Phase::Wrap, 3, NodeId::Mix(2), vec![1, 2, 3]);
        let enc = f.encode();
        assert_eq!(&enc[..4], &(HEADER_LEN as u32 + 3).to_be_bytes());
        let (g, used) = Frame::decode(&enc).unwrap();
        assert_eq!(g, f);
        assert_eq!(used, enc.len());
        assert_eq!(Frame::read_from(&mut enc.as_slice()).unwrap(), f);
    }

    #[test]
    fn frame_rejects_damage() {
        let enc = Frame::new(FrameKind::Ack, 0, Phase::Access, 0, NodeId::Storage, vec![]).encode();
        assert!(Frame::decode(&enc[..enc.len() - 1]).is_err());
        let mut bad = enc.clone();
        bad[4] = 0x09;
        assert!(Frame::decode(&bad).is_err());
        let mut bad = enc.clone();
        bad[13] = 7;
        assert!(Frame::decode(&bad).is_err());
        let mut bad = enc;
        bad[..4].copy_from_slice(&3u32.to_be_bytes());
        assert!(Frame::decode(&bad).is_err());
    }

    #[test]
    fn node_ids() {
        for id in [NodeId::Mix(0), NodeId::Mix(17), NodeId::Storage, NodeId::Client] {
            assert_eq!(NodeId::from_u8(id.to_u8()), id);
        }
    }

    #[test]
    fn batch_roundtrip() {
        let b: Batch = vec![(3, vec![1; 5]), (0, vec![2; 5])];
        assert_eq!(decode_batch(&encode_batch(&b), 5).unwrap(), b);
        assert_eq!(decode_batch(&encode_batch(&[]), 5).unwrap(), vec![]);
        assert!(decode_batch(&encode_batch(&b), 4).is_err());
        let mut huge = encode_batch(&b);
        huge[..4].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(decode_batch(&huge, 5).is_err());
    }

    #[test]
    fn fetch_roundtrip() {
        assert_eq!(decode_fetch(&encode_fetch(&[4, 1, 9])).unwrap(), vec![4, 1, 9]);
        assert!(decode_fetch(&[0, 0, 0, 1, 0]).is_err());
    }

    #[test]
    fn instruction_roundtrip_every_design() {
        for d in Design::ALL {
            let ins = instruction(d);
            ins.validate().unwrap();
            assert_eq!(MixInstruction::decode(&ins.encode()).unwrap(), ins);
        }
    }

    #[test]
    fn instruction_validation() {
        let mut ins = instruction(Design::CascadeLayered);
        ins.old_alpha = Some(ins.alpha);
        assert!(ins.validate().is_err());
        let mut ins = instruction(Design::ParallelLayered);
        ins.rounds = 0;
        assert!(ins.validate().is_err());
        let mut ins = instruction(Design::CascadeRebuild);
        ins.mix_index = 3;
        assert!(ins.validate().is_err());
        let mut ins = instruction(Design::CascadeRebuild);
        ins.n = 13;
        assert!(ins.validate().is_err());
        let enc = instruction(Design::ParallelRebuild).encode();
        assert!(MixInstruction::decode(&enc[..enc.len() - 1]).is_err());
        let mut longer = enc.clone();
        longer.push(0);
        assert!(MixInstruction::decode(&longer).is_err());
    }
}
