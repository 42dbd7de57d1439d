use std::collections::{HashMap, VecDeque};
use std::io::ErrorKind;
use std::net::UdpSocket;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::{Datagram, NodeAddress, SimClock};
use crate::error::{Error, Result};
use crate::model::AgentId;

/// One bound loopback socket plus the datagrams already pulled off it.
pub(super) struct Socket {
    uid: AgentId,
    sock: UdpSocket,
    queue: Mutex<VecDeque<Datagram>>,
    /// Datagrams addressed to this socket by endpoints of the same fabric.
    expected: AtomicU64,
    received: AtomicU64,
}

/// Registry of loopback sockets for one run.
pub struct UdpNet {
    base_port: u16,
    sockets: Mutex<HashMap<AgentId, Arc<Socket>>>,
}

impl UdpNet {
    pub fn new(base_port: u16) -> Self {
        UdpNet { base_port, sockets: Mutex::new(HashMap::new()) }
    }

    pub(super) fn register(&self, uid: AgentId, addr: NodeAddress) -> Result<Arc<Socket>> {
        let mut sockets = self.sockets.lock().unwrap();
        if sockets.contains_key(&uid) {
            return Err(Error::AddrInUse(format!("uid {uid} already bound")));
        }
        let sock = UdpSocket::bind(addr.socket_addr()).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => Error::AddrInUse(format!("{}", addr.socket_addr())),
            _ => Error::Io(e),
        })?;
        sock.set_nonblocking(true)?;
        let s = Arc::new(Socket {
            uid,
            sock,
            queue: Mutex::new(VecDeque::new()),
            expected: AtomicU64::new(0),
            received: AtomicU64::new(0),
        });
        sockets.insert(uid, s.clone());
        Ok(s)
    }

    pub(super) fn unregister(&self, uid: AgentId) {
        self.sockets.lock().unwrap().remove(&uid);
    }

    pub(super) fn send(&self, from: &Socket, dst: AgentId, payload: &[u8]) -> Result<()> {
        let Ok(addr) = NodeAddress::for_uid(dst, self.base_port) else {
            return Ok(());
        };
        let target = self.sockets.lock().unwrap().get(&dst).cloned();
        let deadline = Instant::now() + Duration::from_millis(200);
        loop {
            match from.sock.send_to(payload, addr.socket_addr()) {
                Ok(_) => break,
                Err(e) if e.kind() == ErrorKind::WouldBlock && Instant::now() < deadline => {
                    std::thread::yield_now();
                }
                // Datagram semantics: anything else is a silent drop.
                Err(_) => return Ok(()),
            }
        }
        if let Some(t) = target {
            t.expected.fetch_add(1, Ordering::SeqCst);
        }
        Ok(())
    }

    /// Moves everything the OS has buffered into the socket's queue.
    fn pull(&self, s: &Socket, clock: &SimClock) -> usize {
        let mut buf = vec![0u8; 65_536];
        let mut n = 0;
        loop {
            match s.sock.recv_from(&mut buf) {
                Ok((len, from)) => {
                    let port = from.port();
                    if from.ip().is_loopback() && port >= self.base_port {
                        let src = AgentId((port - self.base_port) as u32);
                        s.queue.lock().unwrap().push_back(Datagram {
                            src,
                            dst: s.uid,
                            payload: buf[..len].to_vec(),
                            enqueued_at: clock.now(),
                        });
                        s.received.fetch_add(1, Ordering::SeqCst);
                        n += 1;
                    }
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        n
    }

    pub(super) fn take(&self, s: &Socket, clock: &SimClock, max: usize) -> Vec<Datagram> {
        self.pull(s, clock);
        let mut q = s.queue.lock().unwrap();
        let n = q.len().min(max);
        q.drain(..n).collect()
    }

    pub(super) fn queued(&self, s: &Socket, clock: &SimClock) -> usize {
        self.pull(s, clock);
        s.queue.lock().unwrap().len()
    }

    pub(super) fn settle(&self, clock: &SimClock, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let sockets: Vec<_> = self.sockets.lock().unwrap().values().cloned().collect();
        for s in sockets {
            loop {
                if s.received.load(Ordering::SeqCst) >= s.expected.load(Ordering::SeqCst) {
                    break;
                }
                if self.pull(&s, clock) == 0 {
                    if Instant::now() >= deadline {
                        // Give up on whatever the kernel lost.
                        s.received.store(s.expected.load(Ordering::SeqCst), Ordering::SeqCst);
                        return Err(Error::Sync(format!(
                            "datagrams for uid {} did not arrive within {timeout:?}",
                            s.uid
                        )));
                    }
                    std::thread::sleep(Duration::from_micros(50));
                }
            }
        }
        Ok(())
    }
}
