//! Canonical protocol message encoding.
//!
//! Each datagram payload is one UTF-8 JSON object:
//!
//! ```text
//! {"v":1,"proto":"CLUSTER","variant":"HEAD_ADVERT","src":3,"stamp":7,"body":{"head":4,"hops":2}}
//! ```
//!
//! `v` is the encoding version, `proto` the owning protocol, `stamp` the
//! topology version the sender acted on.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::AgentId;

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Proto {
    Cluster,
    Cloud,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    Solicit,
    HeadAdvert { head: AgentId, hops: u32 },
    HeadResign { head: AgentId },
    ScoreBeacon { score: f64 },
    LeaderClaim { score: f64 },
    LeaderHeartbeat { member_count: u32 },
    Resign,
}

impl MessageBody {
    pub fn proto(&self) -> Proto {
        match self {
            MessageBody::Solicit | MessageBody::HeadAdvert { .. } | MessageBody::HeadResign { .. } => {
                Proto::Cluster
            }
            _ => Proto::Cloud,
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            MessageBody::Solicit => "SOLICIT",
            MessageBody::HeadAdvert { .. } => "HEAD_ADVERT",
            MessageBody::HeadResign { .. } => "HEAD_RESIGN",
            MessageBody::ScoreBeacon { .. } => "SCORE_BEACON",
            MessageBody::LeaderClaim { .. } => "LEADER_CLAIM",
            MessageBody::LeaderHeartbeat { .. } => "LEADER_HEARTBEAT",
            MessageBody::Resign => "RESIGN",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub src: AgentId,
    pub stamp: u64,
    pub body: MessageBody,
}

impl ProtocolMessage {
    pub fn new(src: AgentId, stamp: u64, body: MessageBody) -> Self {
        ProtocolMessage { src, stamp, body }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    v: u32,
    proto: Proto,
    variant: String,
    src: u32,
    stamp: u64,
    body: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Advert {
    head: u32,
    hops: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Head {
    head: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Score {
    score: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Count {
    member_count: u32,
}

pub fn encode_message(m: &ProtocolMessage) -> Vec<u8> {
    let body = match &m.body {
        MessageBody::Solicit | MessageBody::Resign => json!({}),
        MessageBody::HeadAdvert { head, hops } => json!({ "head": head.0, "hops": hops }),
        MessageBody::HeadResign { head } => json!({ "head": head.0 }),
        MessageBody::ScoreBeacon { score } | MessageBody::LeaderClaim { score } => {
            json!({ "score": score })
        }
        MessageBody::LeaderHeartbeat { member_count } => json!({ "member_count": member_count }),
    };
    let rec = Record {
        v: WIRE_VERSION,
        proto: m.body.proto(),
        variant: m.body.variant().to_string(),
        src: m.src.0,
        stamp: m.stamp,
        body,
    };
    serde_json::to_vec(&rec).expect("records always serialize")
}

fn body<T: for<'de> Deserialize<'de>>(v: Value, variant: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Decode(format!("{variant} body: {e}")))
}

fn score(s: f64) -> Result<f64> {
    if s.is_finite() && (0.0..=1.0).contains(&s) {
        Ok(s)
    } else {
        Err(Error::Decode(format!("score {s} outside [0,1]")))
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage> {
    if bytes.is_empty() {
        return Err(Error::Decode("empty payload".into()));
    }
    let rec: Record =
        serde_json::from_slice(bytes).map_err(|e| Error::Decode(format!("malformed record: {e}")))?;
    if rec.v != WIRE_VERSION {
        return Err(Error::Decode(format!("unknown encoding version {}", rec.v)));
    }
    let v = rec.variant.as_str();
    let parsed = match (rec.proto, v) {
        (Proto::Cluster, "SOLICIT") => body::<Empty>(rec.body, v).map(|_| MessageBody::Solicit)?,
        (Proto::Cluster, "HEAD_ADVERT") => {
            let a: Advert = body(rec.body, v)?;
            MessageBody::HeadAdvert { head: AgentId(a.head), hops: a.hops }
        }
        (Proto::Cluster, "HEAD_RESIGN") => {
            MessageBody::HeadResign { head: AgentId(body::<Head>(rec.body, v)?.head) }
        }
        (Proto::Cloud, "SCORE_BEACON") => {
            MessageBody::ScoreBeacon { score: score(body::<Score>(rec.body, v)?.score)? }
        }
        (Proto::Cloud, "LEADER_CLAIM") => {
            MessageBody::LeaderClaim { score: score(body::<Score>(rec.body, v)?.score)? }
        }
        (Proto::Cloud, "LEADER_HEARTBEAT") => {
            MessageBody::LeaderHeartbeat { member_count: body::<Count>(rec.body, v)?.member_count }
        }
        (Proto::Cloud, "RESIGN") => body::<Empty>(rec.body, v).map(|_| MessageBody::Resign)?,
        (p, other) => return Err(Error::Decode(format!("unknown variant {other:?} for {p:?}"))),
    };
    Ok(ProtocolMessage { src: AgentId(rec.src), stamp: rec.stamp, body: parsed })
}
