use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Datagram;
use crate::error::{Error, Result};
use crate::model::AgentId;

/// In-process datagram fabric. Delivery is synchronous on send, so ordering
/// per (src, dst) pair is FIFO and a lossless send is visible to the very
/// next poll.
pub struct SimNet {
    loss_rate: f64,
    inner: Mutex<Inner>,
}

struct Inner {
    mailboxes: HashMap<AgentId, VecDeque<Datagram>>,
    rng: ChaCha8Rng,
}

impl SimNet {
    pub fn new(loss_rate: f64, seed: u64) -> Self {
        SimNet {
            loss_rate,
            inner: Mutex::new(Inner {
                mailboxes: HashMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        }
    }

    pub(super) fn register(&self, uid: AgentId) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if inner.mailboxes.contains_key(&uid) {
            return Err(Error::AddrInUse(format!("uid {uid} already bound")));
        }
        inner.mailboxes.insert(uid, VecDeque::new());
        Ok(())
    }

    pub(super) fn unregister(&self, uid: AgentId) {
        self.inner.lock().unwrap().mailboxes.remove(&uid);
    }

    pub(super) fn send(&self, src: AgentId, dst: AgentId, payload: &[u8], now: u64) {
        let mut inner = self.inner.lock().unwrap();
        if self.loss_rate > 0.0 && inner.rng.gen::<f64>() < self.loss_rate {
            return;
        }
        if let Some(q) = inner.mailboxes.get_mut(&dst) {
            q.push_back(Datagram { src, dst, payload: payload.to_vec(), enqueued_at: now });
        }
    }

    pub(super) fn take(&self, uid: AgentId, max: usize) -> Vec<Datagram> {
        let mut inner = self.inner.lock().unwrap();
        match inner.mailboxes.get_mut(&uid) {
            Some(q) => {
                let n = q.len().min(max);
                q.drain(..n).collect()
            }
            None => Vec::new(),
        }
    }

    pub(super) fn queued(&self, uid: AgentId) -> usize {
        self.inner.lock().unwrap().mailboxes.get(&uid).map_or(0, VecDeque::len)
    }
}
