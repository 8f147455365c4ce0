//! Message passing between simulated ranks.
//!
//! Every frame on the wire is `u32 length | u8 kind | u32 sender | payload`,
//! little-endian, where `length` counts the bytes after the prefix. The
//! in-memory transport really encodes and decodes these frames, so the
//! format is exercised on every message.

use std::cell::{Cell, RefCell};
use std::collections::VecDeque;
use std::ops::Range;
use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Gather = 1,
    Points = 2,
    Queries = 3,
    Requests = 4,
    Responses = 5,
    Abort = 255,
}

impl MessageKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Self::Gather,
            2 => Self::Points,
            3 => Self::Queries,
            4 => Self::Requests,
            5 => Self::Responses,
            255 => Self::Abort,
            other => return Err(Error::Format(format!("unknown message kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageKind,
    pub sender: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(5 + self.payload.len() as u32);
        w.u8(self.kind as u8);
        w.u32(self.sender);
        w.bytes(&self.payload);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let len = r.u32()? as usize;
        if len != r.remaining() || len < 5 {
            return Err(Error::Format(format!(
                "frame length {len} disagrees with {} bytes",
                r.remaining()
            )));
        }
        let kind = MessageKind::from_u8(r.u8()?)?;
        let sender = r.u32()?;
        let payload = r.take(len - 5)?.to_vec();
        Ok(Self {
            kind,
            sender,
            payload,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TransportStats {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    /// Time spent blocked waiting for frames.
    pub wait: Duration,
}

/// Reliable, per-pair FIFO message passing among `rank_count` ranks.
///
/// Collectives operate on a contiguous group of ranks that must include the
/// caller; every member must make the same sequence of collective calls.
pub trait Transport {
    fn rank(&self) -> usize;
    fn rank_count(&self) -> usize;
    fn send(&self, to: usize, kind: MessageKind, payload: Vec<u8>) -> Result<()>;
    /// Next frame from any sender.
    fn receive(&self) -> Result<Frame>;
    /// Next frame from `from`, in that sender's send order.
    fn receive_from(&self, from: usize) -> Result<Frame>;
    fn stats(&self) -> TransportStats;

    /// Payload of the next `kind` frame from `from`. Frames of other kinds
    /// stay queued, so interleaved exchanges never steal each other's
    /// messages; order within one (sender, kind) stream is preserved.
    fn receive_kind(&self, from: usize, kind: MessageKind) -> Result<Vec<u8>>;

    /// Sends `outgoing[i]` to `group.start + i`, skipping the caller's own slot.
    fn scatter(
        &self,
        group: Range<usize>,
        kind: MessageKind,
        outgoing: &mut [Vec<u8>],
    ) -> Result<()> {
        debug_assert_eq!(outgoing.len(), group.len());
        for (i, to) in group.enumerate() {
            if to != self.rank() {
                self.send(to, kind, std::mem::take(&mut outgoing[i]))?;
            }
        }
        Ok(())
    }

    /// Receives one frame from every other group member, in rank order.
    /// The caller's slot is filled with `own`.
    fn collect(
        &self,
        group: Range<usize>,
        kind: MessageKind,
        own: Vec<u8>,
    ) -> Result<Vec<Vec<u8>>> {
        let mut own = Some(own);
        group
            .map(|from| {
                if from == self.rank() {
                    Ok(own.take().unwrap_or_default())
                } else {
                    self.receive_kind(from, kind)
                }
            })
            .collect()
    }

    fn all_to_all(
        &self,
        group: Range<usize>,
        kind: MessageKind,
        mut outgoing: Vec<Vec<u8>>,
    ) -> Result<Vec<Vec<u8>>> {
        let me = self.rank() - group.start;
        let own = std::mem::take(&mut outgoing[me]);
        self.scatter(group.clone(), kind, &mut outgoing)?;
        self.collect(group, kind, own)
    }

    fn all_gather(&self, group: Range<usize>, bytes: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let mut outgoing = vec![bytes.clone(); group.len()];
        self.scatter(group.clone(), MessageKind::Gather, &mut outgoing)?;
        self.collect(group, MessageKind::Gather, bytes)
    }

    fn barrier(&self, group: Range<usize>) -> Result<()> {
        self.all_gather(group, Vec::new()).map(|_| ())
    }

    /// Elementwise sum of equal-length count arrays across the group.
    fn sum_reduce(&self, group: Range<usize>, counts: &[u64]) -> Result<Vec<u64>> {
        let mut w = Writer::new();
        for &c in counts {
            w.u64(c);
        }
        let mut total = vec![0u64; counts.len()];
        for part in self.all_gather(group, w.finish())? {
            if part.len() != 8 * counts.len() {
                return Err(Error::Transport("sum_reduce length mismatch".into()));
            }
            let mut r = Reader::new(&part);
            for t in total.iter_mut() {
                *t += r.u64()?;
            }
        }
        Ok(total)
    }
}

/// One rank's endpoint of an in-process transport.
pub struct InMemoryTransport {
    rank: usize,
    peers: Vec<Sender<Vec<u8>>>,
    inbox: Receiver<Vec<u8>>,
    pending: RefCell<Vec<VecDeque<Frame>>>,
    frames_sent: Cell<u64>,
    bytes_sent: Cell<u64>,
    wait: Cell<Duration>,
}

impl InMemoryTransport {
    /// Fully connected endpoints for `ranks` ranks.
    pub fn mesh(ranks: usize) -> Vec<InMemoryTransport> {
        let (senders, receivers): (Vec<_>, Vec<_>) = (0..ranks).map(|_| mpsc::channel()).unzip();
        receivers
            .into_iter()
            .enumerate()
            .map(|(rank, inbox)| InMemoryTransport {
                rank,
                peers: senders.clone(),
                inbox,
                pending: RefCell::new(vec![VecDeque::new(); ranks]),
                frames_sent: Cell::new(0),
                bytes_sent: Cell::new(0),
                wait: Cell::new(Duration::ZERO),
            })
            .collect()
    }

    /// Tells every other rank to give up; their pending receives fail.
    pub fn abort(&self) {
        for to in 0..self.peers.len() {
            if to != self.rank {
                let _ = self.send(to, MessageKind::Abort, Vec::new());
            }
        }
    }

    fn pull(&self) -> Result<Frame> {
        let started = Instant::now();
        let bytes = self
            .inbox
            .recv()
            .map_err(|_| Error::Transport(format!("rank {} inbox closed", self.rank)))?;
        self.wait.set(self.wait.get() + started.elapsed());
        let frame = Frame::decode(&bytes)?;
        if frame.kind == MessageKind::Abort {
            return Err(Error::Transport(format!("rank {} aborted", frame.sender)));
        }
        Ok(frame)
    }
}

impl Transport for InMemoryTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn rank_count(&self) -> usize {
        self.peers.len()
    }

    fn send(&self, to: usize, kind: MessageKind, payload: Vec<u8>) -> Result<()> {
        let frame = Frame {
            kind,
            sender: self.rank as u32,
            payload,
        }
        .encode();
        self.frames_sent.set(self.frames_sent.get() + 1);
        self.bytes_sent
            .set(self.bytes_sent.get() + frame.len() as u64);
        self.peers
            .get(to)
            .ok_or_else(|| Error::Transport(format!("no rank {to}")))?
            .send(frame)
            .map_err(|_| Error::Transport(format!("rank {to} is gone")))
    }

    fn receive(&self) -> Result<Frame> {
        if let Some(f) = self
            .pending
            .borrow_mut()
            .iter_mut()
            .find_map(|q| q.pop_front())
        {
            return Ok(f);
        }
        self.pull()
    }

    fn receive_from(&self, from: usize) -> Result<Frame> {
        if let Some(f) = self.pending.borrow_mut()[from].pop_front() {
            return Ok(f);
        }
        loop {
            let f = self.pull()?;
            if f.sender as usize == from {
                return Ok(f);
            }
            self.pending.borrow_mut()[f.sender as usize].push_back(f);
        }
    }

    fn receive_kind(&self, from: usize, kind: MessageKind) -> Result<Vec<u8>> {
        {
            let mut pending = self.pending.borrow_mut();
            let queue = pending
                .get_mut(from)
                .ok_or_else(|| Error::Transport(format!("no rank {from}")))?;
            if let Some(pos) = queue.iter().position(|f| f.kind == kind) {
                return Ok(queue.remove(pos).expect("position is in range").payload);
            }
        }
        loop {
            let f = self.pull()?;
            if f.sender as usize == from && f.kind == kind {
                return Ok(f.payload);
            }
            self.pending.borrow_mut()[f.sender as usize].push_back(f);
        }
    }

    fn stats(&self) -> TransportStats {
        TransportStats {
            frames_sent: self.frames_sent.get(),
            bytes_sent: self.bytes_sent.get(),
            wait: self.wait.get(),
        }
    }
}

/// Runs `body` once per rank on its own thread and returns the per-rank
/// outputs in rank order. A failing or panicking rank aborts the others;
/// the reported error is the first one that is not such an abort.
pub fn run_ranks<T, F>(ranks: usize, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&InMemoryTransport) -> Result<T> + Sync,
{
    let endpoints = InMemoryTransport::mesh(ranks);
    let outcomes: Vec<thread::Result<Result<T>>> = thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let body = &body;
                s.spawn(move || {
                    let out = panic::catch_unwind(AssertUnwindSafe(|| body(&ep)));
                    if !matches!(out, Ok(Ok(_))) {
                        ep.abort();
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().and_then(|r| r))
            .collect()
    });
    let mut results = Vec::with_capacity(ranks);
    let mut first_err: Option<Error> = None;
    let mut panic_payload = None;
    for out in outcomes {
        match out {
            Ok(Ok(v)) => results.push(v),
            Ok(Err(e)) => {
                let is_abort = matches!(&e, Error::Transport(m) if m.ends_with("aborted"));
                match &first_err {
                    None => first_err = Some(e),
                    Some(Error::Transport(m)) if m.ends_with("aborted") && !is_abort => {
                        first_err = Some(e)
                    }
                    _ => {}
                }
            }
            Err(p) => panic_payload = Some(p),
        }
    }
    if let Some(p) = panic_payload {
        panic::resume_unwind(p);
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(results),
    }
}
