//! Datagram messaging between agents with UDP semantics.
//!
//! Two interchangeable backends sit behind [`Endpoint`]: an in-process
//! simulated channel (per-pair FIFO, optional seeded loss) and real
//! datagram sockets on the loopback interface. Every agent's address is a
//! pure function of its uid: `127.0.0.1:(base_port + uid)`.

mod sim;
mod udp;

use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AgentId;

pub use sim::SimNet;
pub use udp::UdpNet;

pub const DEFAULT_BASE_PORT: u16 = 20000;

/// Largest payload a single IPv4 UDP datagram can carry.
pub const MAX_PAYLOAD: usize = 65_507;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sim,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub backend: Backend,
    pub base_port: u16,
    /// Bernoulli drop probability, honored by the SIM backend only.
    pub loss_rate: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig { backend: Backend::Sim, base_port: DEFAULT_BASE_PORT, loss_rate: 0.0 }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_port < 1024 {
            return Err(Error::Param(format!("base_port {} is below 1024", self.base_port)));
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(Error::Param(format!("loss_rate {} outside [0,1]", self.loss_rate)));
        }
        Ok(())
    }

    pub fn address_of(&self, uid: AgentId) -> Result<NodeAddress> {
        NodeAddress::for_uid(uid, self.base_port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeAddress {
    pub host: Ipv4Addr,
    pub port: u16,
}

impl NodeAddress {
    pub fn for_uid(uid: AgentId, base_port: u16) -> Result<Self> {
        let port = base_port as u32 + uid.0;
        if port > u16::MAX as u32 {
            return Err(Error::Param(format!(
                "uid {uid} overflows the port space from base {base_port}"
            )));
        }
        Ok(NodeAddress { host: Ipv4Addr::LOCALHOST, port: port as u16 })
    }

    pub fn socket_addr(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datagram {
    pub src: AgentId,
    pub dst: AgentId,
    pub payload: Vec<u8>,
    /// Simulation time at which the datagram entered the receive queue.
    pub enqueued_at: u64,
}

/// Shared simulation clock stamped onto datagrams.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn now(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::Relaxed);
    }
}

#[derive(Clone)]
enum Fabric {
    Sim(Arc<SimNet>),
    Udp(Arc<UdpNet>),
}

/// Handle onto one transport backend; cheap to clone.
#[derive(Clone)]
pub struct Transport {
    cfg: TransportConfig,
    clock: SimClock,
    fabric: Fabric,
}

impl Transport {
    /// `seed` drives the SIM backend's loss process.
    pub fn new(cfg: TransportConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let fabric = match cfg.backend {
            Backend::Sim => Fabric::Sim(Arc::new(SimNet::new(cfg.loss_rate, seed))),
            Backend::Udp => Fabric::Udp(Arc::new(UdpNet::new(cfg.base_port))),
        };
        Ok(Transport { cfg, clock: SimClock::default(), fabric })
    }

    pub fn config(&self) -> &TransportConfig {
        &self.cfg
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn bind(&self, uid: AgentId) -> Result<Endpoint> {
        let addr = self.cfg.address_of(uid)?;
        let link = match &self.fabric {
            Fabric::Sim(net) => {
                net.register(uid)?;
                Link::Sim(net.clone())
            }
            Fabric::Udp(net) => Link::Udp(net.clone(), net.register(uid, addr)?),
        };
        Ok(Endpoint { uid, addr, link, clock: self.clock.clone(), closed: false })
    }

    /// Blocks until every datagram sent so far is sitting in its receiver's
    /// queue. The SIM backend delivers synchronously, so this is a no-op
    /// there; the UDP backend drains sockets until the per-endpoint receive
    /// counts catch up with the send counts or `timeout` elapses.
    pub fn settle(&self, timeout: Duration) -> Result<()> {
        match &self.fabric {
            Fabric::Sim(_) => Ok(()),
            Fabric::Udp(net) => net.settle(&self.clock, timeout),
        }
    }
}

enum Link {
    Sim(Arc<SimNet>),
    Udp(Arc<UdpNet>, Arc<udp::Socket>),
}

/// A bound messaging endpoint, owned by exactly one agent.
pub struct Endpoint {
    uid: AgentId,
    addr: NodeAddress,
    link: Link,
    clock: SimClock,
    closed: bool,
}

impl Endpoint {
    pub fn uid(&self) -> AgentId {
        self.uid
    }

    pub fn address(&self) -> NodeAddress {
        self.addr
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Best-effort send. Unknown destinations are dropped silently.
    pub fn send(&self, dst: AgentId, payload: &[u8]) -> Result<()> {
        if self.closed {
            return Err(Error::Lifecycle(format!("endpoint {} is closed", self.uid)));
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(Error::Param(format!(
                "payload of {} bytes exceeds {MAX_PAYLOAD}",
                payload.len()
            )));
        }
        match &self.link {
            Link::Sim(net) => {
                net.send(self.uid, dst, payload, self.clock.now());
                Ok(())
            }
            Link::Udp(net, sock) => net.send(sock, dst, payload),
        }
    }

    /// Returns and removes every queued datagram.
    pub fn poll_receive(&mut self) -> Result<Vec<Datagram>> {
        self.poll_receive_up_to(usize::MAX)
    }

    /// Returns and removes at most `max` queued datagrams, oldest first.
    pub fn poll_receive_up_to(&mut self, max: usize) -> Result<Vec<Datagram>> {
        if self.closed {
            return Err(Error::Lifecycle(format!("endpoint {} is closed", self.uid)));
        }
        Ok(match &self.link {
            Link::Sim(net) => net.take(self.uid, max),
            Link::Udp(net, sock) => net.take(sock, &self.clock, max),
        })
    }

    pub fn pending(&self) -> usize {
        if self.closed {
            return 0;
        }
        match &self.link {
            Link::Sim(net) => net.queued(self.uid),
            Link::Udp(net, sock) => net.queued(sock, &self.clock),
        }
    }

    /// Unbinds the endpoint; anything still queued for it is discarded.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        match &self.link {
            Link::Sim(net) => net.unregister(self.uid),
            Link::Udp(net, _) => net.unregister(self.uid),
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.close();
    }
}
