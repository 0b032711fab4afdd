//! The untrusted storage server: a database of `n` fixed-size cells, a
//! cache of `s` cells and a log of every access, which is exactly what an
//! honest-but-curious server gets to see.

use std::io::{Read, Write};
use std::sync::{Mutex, RwLock};

use crate::error::{Error, Result};

/// Who issued an access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Actor {
    Client,
    Mix(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessOp {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Db,
    Cache,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessEvent {
    pub op: AccessOp,
    pub region: Region,
    pub slot: usize,
    pub actor: Actor,
    pub epoch: u64,
    pub round: u16,
    pub size: usize,
}

impl AccessEvent {
    /// The event with the slot erased; two transcripts of equal shape are
    /// indistinguishable up to slot values.
    pub fn shape(&self) -> (AccessOp, Region, Actor, u64, u16, usize) {
        (self.op, self.region, self.actor, self.epoch, self.round, self.size)
    }
}

/// Append-only access log, safe to share between threads.
#[derive(Debug, Default)]
pub struct AccessLog(Mutex<Vec<AccessEvent>>);

impl AccessLog {
    pub fn append(&self, e: AccessEvent) {
        self.0.lock().unwrap().push(e);
    }

    pub fn snapshot(&self) -> Vec<AccessEvent> {
        self.0.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().clear();
    }
}

#[derive(Debug)]
struct Database {
    cells: Vec<Vec<u8>>,
    epoch: u64,
}

#[derive(Debug)]
struct Cache {
    cells: Vec<Option<Vec<u8>>>,
}

/// Storage server state. All operations take `&self`.
#[derive(Debug)]
pub struct Server {
    cell_len: usize,
    db: RwLock<Database>,
    cache: Mutex<Cache>,
    log: AccessLog,
}

impl Server {
    /// Builds a server holding the preprocessed database.
    pub fn new(cells: Vec<Vec<u8>>, cell_len: usize, cache_slots: usize) -> Result<Self> {
        Self::with_epoch(cells, cell_len, cache_slots, 0)
    }

    fn with_epoch(cells: Vec<Vec<u8>>, cell_len: usize, cache_slots: usize, epoch: u64) -> Result<Self> {
        if let Some(bad) = cells.iter().find(|c| c.len() != cell_len) {
            return Err(Error::SizeMismatch {
                expected: cell_len,
                got: bad.len(),
            });
        }
        Ok(Server {
            cell_len,
            db: RwLock::new(Database { cells, epoch }),
            cache: Mutex::new(Cache {
                cells: vec![None; cache_slots],
            }),
            log: AccessLog::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.db.read().unwrap().cells.len()
    }

    pub fn cell_len(&self) -> usize {
        self.cell_len
    }

    pub fn cache_slots(&self) -> usize {
        self.cache.lock().unwrap().cells.len()
    }

    pub fn epoch(&self) -> u64 {
        self.db.read().unwrap().epoch
    }

    fn log(&self, op: AccessOp, region: Region, slot: usize, actor: Actor, round: u16) {
        self.log.append(AccessEvent {
            op,
            region,
            slot,
            actor,
            epoch: self.epoch(),
            round,
            size: self.cell_len,
        });
    }

    pub fn db_read(&self, slot: usize, actor: Actor, round: u16) -> Result<Vec<u8>> {
        let cell = {
            let db = self.db.read().unwrap();
            db.cells
                .get(slot)
                .cloned()
                .ok_or(Error::OutOfRange {
                    slot,
                    len: db.cells.len(),
                })?
        };
        self.log(AccessOp::Read, Region::Db, slot, actor, round);
        Ok(cell)
    }

    pub fn db_write(&self, slot: usize, cell: Vec<u8>, actor: Actor, round: u16) -> Result<()> {
        self.check_len(&cell)?;
        {
            let mut db = self.db.write().unwrap();
            let len = db.cells.len();
            *db.cells.get_mut(slot).ok_or(Error::OutOfRange { slot, len })? = cell;
        }
        self.log(AccessOp::Write, Region::Db, slot, actor, round);
        Ok(())
    }

    pub fn cache_read(&self, slot: usize, actor: Actor) -> Result<Option<Vec<u8>>> {
        let cell = {
            let cache = self.cache.lock().unwrap();
            cache.cells.get(slot).cloned().ok_or(Error::OutOfRange {
                slot,
                len: cache.cells.len(),
            })?
        };
        self.log(AccessOp::Read, Region::Cache, slot, actor, 0);
        Ok(cell)
    }

    pub fn cache_write(&self, slot: usize, cell: Vec<u8>, actor: Actor) -> Result<()> {
        self.check_len(&cell)?;
        {
            let mut cache = self.cache.lock().unwrap();
            let len = cache.cells.len();
            *cache.cells.get_mut(slot).ok_or(Error::OutOfRange { slot, len })? = Some(cell);
        }
        self.log(AccessOp::Write, Region::Cache, slot, actor, 0);
        Ok(())
    }

    /// Number of occupied cache slots.
    pub fn cache_fill(&self) -> usize {
        self.cache.lock().unwrap().cells.iter().filter(|c| c.is_some()).count()
    }

    /// Ends an eviction: the cache is emptied and the epoch advanced.
    pub fn finish_epoch(&self, epoch: u64) {
        self.cache.lock().unwrap().cells.iter_mut().for_each(|c| *c = None);
        self.db.write().unwrap().epoch = epoch;
    }

    /// Copy of the whole database without logging; for tests and snapshots.
    pub fn cells(&self) -> Vec<Vec<u8>> {
        self.db.read().unwrap().cells.clone()
    }

    /// Everything the server has observed so far.
    pub fn export_view(&self) -> Vec<AccessEvent> {
        self.log.snapshot()
    }

    pub fn access_log(&self) -> &AccessLog {
        &self.log
    }

    fn check_len(&self, cell: &[u8]) -> Result<()> {
        if cell.len() != self.cell_len {
            return Err(Error::SizeMismatch {
                expected: self.cell_len,
                got: cell.len(),
            });
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        let db = self.db.read().unwrap();
        Snapshot {
            cell_len: self.cell_len,
            cache_slots: self.cache_slots(),
            epoch: db.epoch,
            cells: db.cells.clone(),
        }
    }

    pub fn from_snapshot(snap: Snapshot) -> Result<Self> {
        Self::with_epoch(snap.cells, snap.cell_len, snap.cache_slots, snap.epoch)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        self.snapshot().write_to(w)
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_snapshot(Snapshot::decode(&bytes)?)
    }
}

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"MXOR";
pub const SNAPSHOT_VERSION: u16 = 1;
const SNAPSHOT_HEADER: usize = 4 + 2 + 8 + 4 + 4 + 8;

/// On-disk image of the database: a big-endian header followed by the `n`
/// cells back to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub cell_len: usize,
    pub cache_slots: usize,
    pub epoch: u64,
    pub cells: Vec<Vec<u8>>,
}

impl Snapshot {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SNAPSHOT_HEADER + self.cells.len() * self.cell_len);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_be_bytes());
        out.extend_from_slice(&(self.cells.len() as u64).to_be_bytes());
        out.extend_from_slice(&(self.cell_len as u32).to_be_bytes());
        out.extend_from_slice(&(self.cache_slots as u32).to_be_bytes());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        for c in &self.cells {
            out.extend_from_slice(c);
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Snapshot(m.to_string());
        if bytes.len() < SNAPSHOT_HEADER {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_be_bytes(bytes[4..6].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let n = u64::from_be_bytes(bytes[6..14].try_into().unwrap());
        let cell_len = u32::from_be_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let cache_slots = u32::from_be_bytes(bytes[18..22].try_into().unwrap()) as usize;
        let epoch = u64::from_be_bytes(bytes[22..30].try_into().unwrap());
        let body = &bytes[SNAPSHOT_HEADER..];
        let expected = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(cell_len))
            .ok_or_else(|| bad("size overflow"))?;
        if body.len() != expected {
            return Err(Error::Snapshot(format!(
                "expected {expected} body bytes, found {}",
                body.len()
            )));
        }
        if cell_len == 0 {
            return Err(bad("zero cell length"));
        }
        Ok(Snapshot {
            cell_len,
            cache_slots,
            epoch,
            cells: body.chunks(cell_len).map(<[u8]>::to_vec).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> Server {
        Server::new((0..4u8).map(|i| vec![i; 8]).collect(), 8, 2).unwrap()
    }

    #[test]
    fn unwritten_slot_returns_initial_cell() {
        let s = server();
        assert_eq!(s.db_read(2, Actor::Client, 0).unwrap(), vec![2; 8]);
    }

    #[test]
    fn write_then_read_and_log() {
        let s = server();
        s.db_write(1, vec![9; 8], Actor::Mix(0), 3).unwrap();
        assert_eq!(s.db_read(1, Actor::Client, 0).unwrap(), vec![9; 8]);
        let log = s.export_view();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].op, AccessOp::Write);
        assert_eq!(log[0].actor, Actor::Mix(0));
        assert_eq!(log[0].round, 3);
        assert_eq!(log[1].slot, 1);
    }

    #[test]
    fn bounds_and_sizes_are_checked() {
        let s = server();
        assert!(matches!(s.db_read(4, Actor::Client, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(
            s.db_write(0, vec![0; 7], Actor::Client, 0),
            Err(Error::SizeMismatch { .. })
        ));
        assert!(s.cache_write(2, vec![0; 8], Actor::Client).is_err());
        assert!(s.export_view().is_empty());
    }

    #[test]
    fn cache_is_flushed_with_the_epoch() {
        let s = server();
        s.cache_write(0, vec![1; 8], Actor::Client).unwrap();
        assert_eq!(s.cache_fill(), 1);
        s.finish_epoch(1);
        assert_eq!(s.cache_fill(), 0);
        assert_eq!(s.epoch(), 1);
        assert_eq!(s.cache_read(0, Actor::Client).unwrap(), None);
    }

    #[test]
    fn concurrent_reads_and_writes() {
        let s = std::sync::Arc::new(server());
        let handles: Vec<_> = (0..4u8)
            .map(|i| {
                let s = s.clone();
                std::thread::spawn(move || {
                    for _ in 0..100 {
                        s.db_write(i as usize, vec![i + 10; 8], Actor::Mix(i), 0).unwrap();
                        s.db_read((i as usize + 1) % 4, Actor::Mix(i), 0).unwrap();
                    }
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(s.access_log().len(), 800);
        assert_eq!(s.cells()[3], vec![13; 8]);
    }

    #[test]
    fn snapshot_roundtrip() {
        let s = server();
        s.db_write(0, vec![7; 8], Actor::Client, 0).unwrap();
        s.finish_epoch(5);
        let mut buf = Vec::new();
        s.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MXOR");
        assert_eq!(buf.len(), SNAPSHOT_HEADER + 32);
        let t = Server::load(buf.as_slice()).unwrap();
        assert_eq!(t.cells(), s.cells());
        assert_eq!(t.epoch(), 5);
        assert_eq!(t.cache_slots(), 2);
    }

    #[test]
    fn snapshot_rejects_damage() {
        let enc = server().snapshot().encode();
        assert!(Snapshot::decode(&enc[..enc.len() - 1]).is_err());
        let mut bad = enc.clone();
        bad[0] = b'X';
        assert!(Snapshot::decode(&bad).is_err());
        let mut bad = enc.clone();
        bad[5] = 9;
        assert!(Snapshot::decode(&bad).is_err());
        let mut huge = enc.clone();
        huge[6..14].copy_from_slice(&u64::MAX.to_be_bytes());
        assert!(Snapshot::decode(&huge).is_err());
        assert!(Snapshot::decode(&enc[..10]).is_err());
    }
}
