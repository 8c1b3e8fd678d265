//! Leased FIFO message queue with at-least-once delivery.
//!
//! A dequeued message is hidden until its lease is acked, nacked or expires.
//! Nack and expiry make it visible again at its original position, so the
//! oldest unacked message is always delivered first.
//!
//! File-backed queues append one JSON line per operation:
//!
//! ```text
//! {"op":"enqueue","seq":1,"payload":"..."}
//! {"op":"deliver","seq":1}
//! {"op":"ack","seq":1}
//! ```
//!
//! On reopen every message without an `ack` is visible again, with its
//! delivery count restored from the `deliver` lines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    /// Enqueue order, strictly increasing from 1.
    pub seq: u64,
    pub payload: String,
    /// Deliveries so far, including the current one.
    pub delivery_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub message: Message,
    pub lease: u64,
    pub deadline_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Op {
    Enqueue { seq: u64, payload: String },
    Deliver { seq: u64 },
    Ack { seq: u64 },
}

#[derive(Debug)]
struct Leased {
    message: Message,
    deadline_ms: u64,
}

#[derive(Debug, Default)]
struct Inner {
    visible: BTreeMap<u64, Message>,
    leased: HashMap<u64, Leased>,
    expired: HashSet<u64>,
    next_seq: u64,
    next_lease: u64,
}

impl Inner {
    fn reclaim(&mut self, now: u64) {
        let due: Vec<u64> = self.leased.iter().filter(|(_, l)| l.deadline_ms <= now).map(|(id, _)| *id).collect();
        for id in due {
            let l = self.leased.remove(&id).expect("lease present");
            self.visible.insert(l.message.seq, l.message);
            self.expired.insert(id);
        }
    }
}

pub struct Queue {
    inner: Mutex<Inner>,
    log: Option<Mutex<File>>,
    clock: Arc<dyn Clock>,
}

impl Queue {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self { inner: Mutex::new(Inner { next_seq: 1, next_lease: 1, ..Inner::default() }), log: None, clock }
    }

    /// Opens or creates the queue log at `path`.
    pub fn open(path: &Path, clock: Arc<dyn Clock>) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut inner = Inner { next_seq: 1, next_lease: 1, ..Inner::default() };
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<std::io::Result<_>>()?;
            let mut keep = 0u64;
            for (i, line) in lines.iter().enumerate() {
                let op = match serde_json::from_str::<Op>(line) {
                    Ok(op) => op,
                    Err(_) if i + 1 == lines.len() => break,
                    Err(e) => {
                        return Err(PipelineError::CorruptLog { path: path.display().to_string(), reason: format!("line {}: {e}", i + 1) })
                    }
                };
                keep += line.len() as u64 + 1;
                match op {
                    Op::Enqueue { seq, payload } => {
                        inner.visible.insert(seq, Message { seq, payload, delivery_count: 0 });
                        inner.next_seq = inner.next_seq.max(seq + 1);
                    }
                    Op::Deliver { seq } => {
                        if let Some(m) = inner.visible.get_mut(&seq) {
                            m.delivery_count += 1;
                        }
                    }
                    Op::Ack { seq } => {
                        inner.visible.remove(&seq);
                    }
                }
            }
            let file = OpenOptions::new().write(true).open(path)?;
            if file.metadata()?.len() > keep {
                file.set_len(keep)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner: Mutex::new(inner), log: Some(Mutex::new(file)), clock })
    }

    fn record(&self, op: &Op) -> Result<()> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_vec(op)?;
            line.push(b'\n');
            log.lock().write_all(&line)?;
        }
        Ok(())
    }

    pub fn enqueue(&self, payload: impl Into<String>) -> Result<u64> {
        let mut q = self.inner.lock();
        let seq = q.next_seq;
        let payload = payload.into();
        self.record(&Op::Enqueue { seq, payload: payload.clone() })?;
        q.next_seq += 1;
        q.visible.insert(seq, Message { seq, payload, delivery_count: 0 });
        Ok(seq)
    }

    /// Leases the oldest visible message for `lease_ms`.
    pub fn dequeue(&self, lease_ms: u64) -> Result<Option<Delivery>> {
        let now = self.clock.now_ms();
        let mut q = self.inner.lock();
        q.reclaim(now);
        let Some(seq) = q.visible.keys().next().copied() else { return Ok(None) };
        self.record(&Op::Deliver { seq })?;
        let mut message = q.visible.remove(&seq).expect("visible message");
        message.delivery_count += 1;
        let lease = q.next_lease;
        q.next_lease += 1;
        let deadline_ms = now.saturating_add(lease_ms);
        q.leased.insert(lease, Leased { message: message.clone(), deadline_ms });
        Ok(Some(Delivery { message, lease, deadline_ms }))
    }

    fn take_lease(&self, q: &mut Inner, lease: u64) -> Result<Leased> {
        q.reclaim(self.clock.now_ms());
        if q.expired.contains(&lease) {
            return Err(PipelineError::ExpiredLease(lease));
        }
        q.leased.remove(&lease).ok_or(PipelineError::UnknownLease(lease))
    }

    /// Deletes a leased message.
    pub fn ack(&self, lease: u64) -> Result<Message> {
        let mut q = self.inner.lock();
        let l = self.take_lease(&mut q, lease)?;
        if let Err(e) = self.record(&Op::Ack { seq: l.message.seq }) {
            q.leased.insert(lease, l);
            return Err(e);
        }
        Ok(l.message)
    }

    /// Returns a leased message to the queue for redelivery.
    pub fn nack(&self, lease: u64) -> Result<()> {
        let mut q = self.inner.lock();
        let l = self.take_lease(&mut q, lease)?;
        q.visible.insert(l.message.seq, l.message);
        Ok(())
    }

    /// Visible messages.
    pub fn len(&self) -> usize {
        let mut q = self.inner.lock();
        q.reclaim(self.clock.now_ms());
        q.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_flight(&self) -> usize {
        let mut q = self.inner.lock();
        q.reclaim(self.clock.now_ms());
        q.leased.len()
    }

    /// Payloads of every unacked message, visible or leased, in enqueue order.
    pub fn unacked_payloads(&self) -> Vec<String> {
        let q = self.inner.lock();
        let mut all: Vec<&Message> = q.visible.values().chain(q.leased.values().map(|l| &l.message)).collect();
        all.sort_by_key(|m| m.seq);
        all.into_iter().map(|m| m.payload.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn queue() -> (Queue, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(0));
        (Queue::in_memory(clock.clone()), clock)
    }

    #[test]
    fn single_consumer_is_fifo() {
        let (q, _) = queue();
        for p in ["A", "B", "C"] {
            q.enqueue(p).unwrap();
        }
        let got: Vec<String> = (0..3)
            .map(|_| {
                let d = q.dequeue(1000).unwrap().unwrap();
                q.ack(d.lease).unwrap();
                d.message.payload
            })
            .collect();
        assert_eq!(got, ["A", "B", "C"]);
        assert!(q.dequeue(1000).unwrap().is_none());
    }

    #[test]
    fn leased_messages_are_hidden_until_expiry() {
        let (q, clock) = queue();
        q.enqueue("A").unwrap();
        q.enqueue("B").unwrap();
        let first = q.dequeue(100).unwrap().unwrap();
        assert_eq!(q.dequeue(100).unwrap().unwrap().message.payload, "B");
        assert!(q.dequeue(100).unwrap().is_none());
        clock.advance(100);
        let again = q.dequeue(100).unwrap().unwrap();
        assert_eq!(again.message.payload, "A");
        assert_eq!(again.message.delivery_count, 2);
        assert!(matches!(q.ack(first.lease), Err(PipelineError::ExpiredLease(_))));
        assert!(matches!(q.ack(999), Err(PipelineError::UnknownLease(999))));
        q.ack(again.lease).unwrap();
        assert!(matches!(q.ack(again.lease), Err(PipelineError::UnknownLease(_))));
    }

    #[test]
    fn nack_restores_position() {
        let (q, _) = queue();
        q.enqueue("A").unwrap();
        q.enqueue("B").unwrap();
        let d = q.dequeue(100).unwrap().unwrap();
        q.nack(d.lease).unwrap();
        let d = q.dequeue(100).unwrap().unwrap();
        assert_eq!((d.message.payload.as_str(), d.message.delivery_count), ("A", 2));
    }

    #[test]
    fn reopen_restores_unacked_messages() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(0));
        {
            let q = Queue::open(&path, clock.clone()).unwrap();
            for p in ["A", "B", "C"] {
                q.enqueue(p).unwrap();
            }
            let a = q.dequeue(100).unwrap().unwrap();
            q.ack(a.lease).unwrap();
            q.dequeue(100).unwrap().unwrap();
        }
        let q = Queue::open(&path, clock).unwrap();
        assert_eq!(q.unacked_payloads(), ["B", "C"]);
        let b = q.dequeue(100).unwrap().unwrap();
        assert_eq!((b.message.payload.as_str(), b.message.delivery_count), ("B", 2));
        assert_eq!(q.enqueue("D").unwrap(), 4);
    }
}
