//! Transports: a deterministic in-process network and a TCP runtime. Both
//! drive the same node state machines.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::mixnode::MixNode;
use crate::storage::{Actor, Server};
use crate::wire::{decode_batch, decode_fetch, encode_batch, Frame, FrameKind, NodeId, Phase};

/// Client requests use the round field to pick the storage region.
pub const REGION_DB: u16 = 0;
pub const REGION_CACHE: u16 = 1;

fn actor(id: NodeId) -> Actor {
    match id {
        NodeId::Mix(i) => Actor::Mix(i),
        _ => Actor::Client,
    }
}

/// Storage server wrapped as a protocol node.
pub struct StorageNode {
    server: Arc<Server>,
    stored: BTreeMap<u64, usize>,
    bytes_sent: u64,
}

impl StorageNode {
    pub fn new(server: Arc<Server>) -> Self {
        StorageNode {
            server,
            stored: BTreeMap::new(),
            bytes_sent: 0,
        }
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    /// Cell bytes returned to mixes in fetch replies.
    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn reset_costs(&mut self) {
        self.bytes_sent = 0;
    }

    pub fn handle(&mut self, frame: Frame) -> Result<Vec<(NodeId, Frame)>> {
        let from = frame.from;
        let who = actor(from);
        let reply = |kind, payload| Frame::new(kind, frame.epoch, frame.phase, frame.round, NodeId::Storage, payload);
        match frame.kind {
            FrameKind::DbFetch => {
                let slots = decode_fetch(&frame.payload)?;
                let mut cells = Vec::with_capacity(slots.len());
                for s in slots {
                    let cell = if from == NodeId::Client && frame.round == REGION_CACHE {
                        self.server.cache_read(s as usize, who)?.unwrap_or_default()
                    } else {
                        self.server.db_read(s as usize, who, frame.round)?
                    };
                    cells.push((s, cell));
                }
                if matches!(from, NodeId::Mix(_)) {
                    self.bytes_sent += cells.iter().map(|(_, c)| c.len() as u64).sum::<u64>();
                }
                Ok(vec![(from, reply(FrameKind::RecordBatch, encode_batch(&cells)))])
            }
            FrameKind::DbStore => {
                let batch = decode_batch(&frame.payload, self.server.cell_len())?;
                let count = batch.len();
                for (s, cell) in batch {
                    if from == NodeId::Client && frame.round == REGION_CACHE {
                        self.server.cache_write(s as usize, cell, who)?;
                    } else {
                        self.server.db_write(s as usize, cell, who, frame.round)?;
                    }
                }
                if from == NodeId::Client {
                    return Ok(vec![(from, reply(FrameKind::Ack, Vec::new()))]);
                }
                let total = self.stored.entry(frame.epoch).or_default();
                *total += count;
                if *total > self.server.n() {
                    return Err(Error::Frame(format!("epoch {} stored more than n cells", frame.epoch)));
                }
                if *total == self.server.n() {
                    self.stored.remove(&frame.epoch);
                    self.server.finish_epoch(frame.epoch);
                    debug!("storage: epoch {} complete", frame.epoch);
                    let ack = Frame::new(FrameKind::Ack, frame.epoch, Phase::Wrap, 0, NodeId::Storage, Vec::new());
                    return Ok(vec![(NodeId::Client, ack)]);
                }
                Ok(Vec::new())
            }
            k => Err(Error::Frame(format!("storage cannot handle {k:?}"))),
        }
    }
}

/// Metadata of one frame as an observer of the network would see it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: FrameKind,
    pub epoch: u64,
    pub phase: Phase,
    pub round: u16,
    pub len: usize,
}

type Observer = Box<dyn FnMut(&TraceEvent, &Frame) + Send>;

/// Deterministic single-threaded network. Frames are delivered in FIFO
/// order; frames a node sends to itself go through the queue as well.
pub struct SimNetwork {
    pub mixes: Vec<MixNode>,
    pub storage: StorageNode,
    queue: VecDeque<(NodeId, Frame)>,
    client_inbox: Vec<Frame>,
    trace: Vec<TraceEvent>,
    /// Invoked on every delivered record batch; for test instrumentation.
    observer: Option<Observer>,
}

impl SimNetwork {
    pub fn new(mixes: Vec<MixNode>, storage: StorageNode) -> Self {
        SimNetwork {
            mixes,
            storage,
            queue: VecDeque::new(),
            client_inbox: Vec::new(),
            trace: Vec::new(),
            observer: None,
        }
    }

    pub fn set_observer(&mut self, f: impl FnMut(&TraceEvent, &Frame) + Send + 'static) {
        self.observer = Some(Box::new(f));
    }

    pub fn send(&mut self, to: NodeId, frame: Frame) {
        self.queue.push_back((to, frame));
    }

    /// Delivers the next queued frame; returns false when the queue is empty.
    pub fn step(&mut self) -> Result<bool> {
        let Some((to, frame)) = self.queue.pop_front() else {
            return Ok(false);
        };
        let ev = TraceEvent {
            from: frame.from,
            to,
            kind: frame.kind,
            epoch: frame.epoch,
            phase: frame.phase,
            round: frame.round,
            len: frame.payload.len(),
        };
        if let Some(obs) = self.observer.as_mut() {
            obs(&ev, &frame);
        }
        self.trace.push(ev);
        let out = match to {
            NodeId::Client => {
                self.client_inbox.push(frame);
                return Ok(true);
            }
            NodeId::Storage => self.storage.handle(frame)?,
            NodeId::Mix(i) => self
                .mixes
                .get_mut(i as usize)
                .ok_or_else(|| Error::Transport(format!("no mix {i}")))?
                .handle(frame)?,
        };
        self.queue.extend(out);
        Ok(true)
    }

    /// Delivers frames until the network is quiet, then reports a mix left
    /// waiting for input.
    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        for mix in &self.mixes {
            if let Some(e) = mix.missing_batch() {
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn queued(&self) -> impl Iterator<Item = &(NodeId, Frame)> {
        self.queue.iter()
    }

    /// Drops every queued frame; used to simulate a lost message.
    pub fn drop_where(&mut self, mut pred: impl FnMut(NodeId, &Frame) -> bool) -> usize {
        let before = self.queue.len();
        self.queue.retain(|(to, f)| !pred(*to, f));
        before - self.queue.len()
    }

    pub fn take_client_inbox(&mut self) -> Vec<Frame> {
        std::mem::take(&mut self.client_inbox)
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn clear_trace(&mut self) {
        self.trace.clear();
    }

    pub fn reset_costs(&mut self) {
        self.mixes.iter_mut().for_each(MixNode::reset_costs);
        self.storage.reset_costs();
    }
}

/// A node that can be served over TCP.
pub trait Node: Send {
    fn id(&self) -> NodeId;
    fn handle(&mut self, frame: Frame) -> Result<Vec<(NodeId, Frame)>>;
}

impl Node for MixNode {
    fn id(&self) -> NodeId {
        NodeId::Mix(self.index())
    }

    fn handle(&mut self, frame: Frame) -> Result<Vec<(NodeId, Frame)>> {
        MixNode::handle(self, frame)
    }
}

impl Node for StorageNode {
    fn id(&self) -> NodeId {
        NodeId::Storage
    }

    fn handle(&mut self, frame: Frame) -> Result<Vec<(NodeId, Frame)>> {
        StorageNode::handle(self, frame)
    }
}

/// Address book of a TCP deployment.
pub type Peers = HashMap<NodeId, SocketAddr>;

/// Parses `name=host:port` entries separated by commas, where a name is
/// `storage`, `client` or `mix<i>`.
pub fn parse_peers(list: &str) -> Result<Peers> {
    let mut peers = Peers::new();
    for entry in list.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let (name, addr) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("peer {entry:?} is not name=address")))?;
        let id = match name.trim() {
            "storage" => NodeId::Storage,
            "client" => NodeId::Client,
            other => {
                let i = other
                    .strip_prefix("mix")
                    .and_then(|i| i.parse::<u8>().ok())
                    .filter(|i| *i < NodeId::STORAGE)
                    .ok_or_else(|| Error::Config(format!("unknown peer name {other:?}")))?;
                NodeId::Mix(i)
            }
        };
        let addr: SocketAddr = addr
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad address {addr:?} for {name}")))?;
        if peers.insert(id, addr).is_some() {
            return Err(Error::Config(format!("peer {name} listed twice")));
        }
    }
    Ok(peers)
}

fn connect(addr: SocketAddr, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() < deadline => {
                debug!("connect {addr}: {e}, retrying");
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(Error::Transport(format!("connect {addr}: {e}"))),
        }
    }
}

/// Outgoing side: one persistent connection per peer, so frames between
/// two nodes stay in order.
pub struct Outbox {
    peers: Peers,
    conns: HashMap<NodeId, BufWriter<TcpStream>>,
    timeout: Duration,
}

impl Outbox {
    pub fn new(peers: Peers, timeout: Duration) -> Self {
        Outbox {
            peers,
            conns: HashMap::new(),
            timeout,
        }
    }

    pub fn send(&mut self, to: NodeId, frame: &Frame) -> Result<()> {
        if !self.conns.contains_key(&to) {
            let addr = *self
                .peers
                .get(&to)
                .ok_or_else(|| Error::Transport(format!("no address for {to:?}")))?;
            self.conns.insert(to, BufWriter::new(connect(addr, self.timeout)?));
        }
        let w = self.conns.get_mut(&to).unwrap();
        frame.write_to(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Accepts connections on `listener` and funnels every decoded frame into
/// one channel.
pub fn spawn_listener(listener: TcpListener) -> Receiver<Frame> {
    let (tx, rx) = channel();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let tx: Sender<Frame> = tx.clone();
            thread::spawn(move || {
                let mut r = BufReader::new(stream);
                while let Ok(f) = Frame::read_from(&mut r) {
                    if tx.send(f).is_err() {
                        break;
                    }
                }
            });
        }
    });
    rx
}

/// Serves `node` until `stop` returns true after a handled frame, or until
/// `idle` passes without traffic.
pub fn serve<N: Node>(
    mut node: N,
    listener: TcpListener,
    peers: Peers,
    idle: Option<Duration>,
    mut stop: impl FnMut(&N) -> bool,
) -> Result<N> {
    let rx = spawn_listener(listener);
    let mut outbox = Outbox::new(peers, Duration::from_secs(10));
    loop {
        let frame = match idle {
            Some(t) => match rx.recv_timeout(t) {
                Ok(f) => f,
                Err(RecvTimeoutError::Timeout) => return Ok(node),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Transport("listener closed".into())),
            },
            None => rx.recv().map_err(|_| Error::Transport("listener closed".into()))?,
        };
        match node.handle(frame) {
            Ok(out) => {
                for (to, f) in out {
                    outbox.send(to, &f)?;
                }
            }
            Err(e) => warn!("{:?}: dropping frame: {e}", node.id()),
        }
        if stop(&node) {
            return Ok(node);
        }
    }
}

/// Client end of a TCP deployment: sends frames and waits for replies.
pub struct TcpLink {
    outbox: Outbox,
    inbox: Receiver<Frame>,
    timeout: Duration,
}

impl TcpLink {
    pub fn new(listener: TcpListener, peers: Peers, timeout: Duration) -> Self {
        TcpLink {
            outbox: Outbox::new(peers, timeout),
            inbox: spawn_listener(listener),
            timeout,
        }
    }

    pub fn send(&mut self, to: NodeId, frame: &Frame) -> Result<()> {
        self.outbox.send(to, frame)
    }

    pub fn recv(&mut self) -> Result<Frame> {
        self.inbox
            .recv_timeout(self.timeout)
            .map_err(|e| Error::Transport(format!("waiting for reply: {e}")))
    }
}
