//! k-hop clustering.
//!
//! A booting node solicits its neighbors and waits `solicit_timeout` ticks.
//! Heads announce themselves with `HEAD_ADVERT` floods limited to `k` hops;
//! every node keeps the best hop count it has heard per head. When the wait
//! expires the node classifies itself: no head within `k` hops makes it a
//! head, exactly one makes it a member, two or more a gateway.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Ctx, Note};
use crate::model::{AgentId, Role};
use crate::wire::{MessageBody, ProtocolMessage};

/// Best known distance to one head, tagged with the topology version of the
/// flood that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub hops: u32,
    pub stamp: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterState {
    pub role: Role,
    pub my_head: Option<AgentId>,
    /// Heads reachable within `k` hops.
    pub known_heads: BTreeMap<AgentId, HeadEntry>,
    pub cluster_id: Option<AgentId>,
    /// Set while a solicitation is outstanding.
    pub solicit_deadline: Option<u64>,
    /// A head's k-hop neighborhood as of its last advert flood.
    #[serde(default)]
    pub flood_view: BTreeMap<AgentId, u32>,
}

/// Role for a node that can see `known_heads` (head -> hops), plus the head
/// it affiliates with. Gateways join the nearest head, ties to lowest uid.
pub fn classify_role(known_heads: &BTreeMap<AgentId, u32>, k: u32) -> (Role, Option<AgentId>) {
    let mut within = known_heads.iter().filter(|(_, &h)| h <= k);
    let Some(first) = within.next() else {
        return (Role::Head, None);
    };
    let rest: Vec<_> = within.collect();
    if rest.is_empty() {
        return (Role::Member, Some(*first.0));
    }
    // BTreeMap iteration is uid-ascending, so min_by_key keeps the lowest uid on ties.
    let nearest = std::iter::once(first).chain(rest).min_by_key(|(_, &h)| h).unwrap();
    (Role::Gateway, Some(*nearest.0))
}

impl ClusterState {
    pub fn is_settled(&self) -> bool {
        self.role != Role::Unassigned && self.solicit_deadline.is_none()
    }

    fn hop_view(&self) -> BTreeMap<AgentId, u32> {
        self.known_heads.iter().map(|(&h, e)| (h, e.hops)).collect()
    }

    fn set_role(&mut self, ctx: &mut Ctx, role: Role, head: Option<AgentId>) {
        let (old_role, old_aff) = (self.role, self.cluster_id);
        self.role = role;
        self.my_head = head;
        self.cluster_id = head;
        if old_role != role || old_aff != head {
            ctx.note(Note::RoleChange { from: old_role, to: role, affiliation: head });
        }
    }

    /// Sends a solicitation to every neighbor and arms the deadline.
    pub fn on_boot(&mut self, ctx: &mut Ctx) {
        let stamp = ctx.version();
        ctx.to_neighbors(stamp, MessageBody::Solicit, None);
        self.solicit_deadline = Some(ctx.now + ctx.cfg.solicit_timeout);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, msg: ProtocolMessage) {
        match msg.body {
            MessageBody::Solicit => self.answer_solicit(ctx, msg.src),
            MessageBody::HeadAdvert { head, hops } => {
                self.handle_head_advert(ctx, msg.src, msg.stamp, head, hops)
            }
            MessageBody::HeadResign { head } => self.handle_head_resign(ctx, msg.src, head),
            other => ctx.violation(
                Some(msg.src),
                format!("{} is not a clustering message", other.variant()),
            ),
        }
    }

    fn answer_solicit(&mut self, ctx: &mut Ctx, src: AgentId) {
        if self.role == Role::Head {
            ctx.send(src, MessageBody::HeadAdvert { head: ctx.me, hops: 1 });
        }
        for (&head, e) in &self.known_heads {
            if e.hops < ctx.k && head != src {
                ctx.send_stamped(src, e.stamp, MessageBody::HeadAdvert { head, hops: e.hops + 1 });
            }
        }
    }

    /// Records an advert; forwards it one hop further when it improved our
    /// entry and the hop budget allows.
    pub fn handle_head_advert(
        &mut self,
        ctx: &mut Ctx,
        src: AgentId,
        stamp: u64,
        head: AgentId,
        hops: u32,
    ) {
        if hops > ctx.k {
            ctx.violation(Some(src), format!("HEAD_ADVERT for {head} with hops {hops} > k={}", ctx.k));
            return;
        }
        if head == ctx.me {
            return;
        }
        let updated = match self.known_heads.get(&head) {
            None => true,
            Some(e) => stamp > e.stamp || (stamp == e.stamp && hops < e.hops),
        };
        if !updated {
            return;
        }
        let before = self.hop_view();
        self.known_heads.insert(head, HeadEntry { hops, stamp });
        if hops < ctx.k {
            ctx.to_neighbors(stamp, MessageBody::HeadAdvert { head, hops: hops + 1 }, Some(src));
        }
        if self.hop_view() != before {
            self.reclassify(ctx);
        }
    }

    fn handle_head_resign(&mut self, ctx: &mut Ctx, src: AgentId, head: AgentId) {
        let Some(e) = self.known_heads.remove(&head) else { return };
        if e.hops < ctx.k {
            ctx.to_neighbors(ctx.version(), MessageBody::HeadResign { head }, Some(src));
        }
        self.reclassify(ctx);
    }

    /// Re-evaluates a settled non-head after its head set changed. A node
    /// left with no head in range starts over as if freshly booted.
    fn reclassify(&mut self, ctx: &mut Ctx) {
        if !matches!(self.role, Role::Member | Role::Gateway) {
            return;
        }
        match classify_role(&self.hop_view(), ctx.k) {
            (Role::Head, _) => {
                self.set_role(ctx, Role::Unassigned, None);
                self.on_boot(ctx);
            }
            (role, head) => self.set_role(ctx, role, head),
        }
    }

    /// Timer-driven management: resolves an expired solicitation.
    pub fn manage(&mut self, ctx: &mut Ctx) {
        let Some(deadline) = self.solicit_deadline else { return };
        if ctx.now < deadline || self.role != Role::Unassigned {
            return;
        }
        self.solicit_deadline = None;
        match classify_role(&self.hop_view(), ctx.k) {
            (Role::Head, _) => self.assume_head(ctx),
            (role, head) => self.set_role(ctx, role, head),
        }
    }

    pub fn assume_head(&mut self, ctx: &mut Ctx) {
        let me = ctx.me;
        self.set_role(ctx, Role::Head, Some(me));
        self.flood(ctx);
    }

    fn k_ball(ctx: &Ctx) -> BTreeMap<AgentId, u32> {
        let k = ctx.k;
        ctx.routes
            .hops_from(ctx.me)
            .map(|row| row.into_iter().filter(|&(_, h)| h <= k).collect())
            .unwrap_or_default()
    }

    fn flood(&mut self, ctx: &mut Ctx) {
        self.flood_view = Self::k_ball(ctx);
        let stamp = ctx.version();
        ctx.to_neighbors(stamp, MessageBody::HeadAdvert { head: ctx.me, hops: 1 }, None);
    }

    /// Reacts to a new route table: drops heads SMB now places beyond `k`
    /// (or that left), corrects remaining hop counts, re-floods if this node
    /// is a head whose k-hop neighborhood changed, then re-classifies.
    pub fn recluster_on_change(&mut self, ctx: &mut Ctx, links_changed: bool) {
        let me = ctx.me;
        let before = self.hop_view();
        let k = ctx.k;
        let routes = ctx.routes;
        self.known_heads.retain(|&h, e| match routes.hops(me, h).ok().and_then(|h| h.finite()) {
            Some(d) if d <= k => {
                e.hops = d;
                true
            }
            _ => false,
        });
        if self.role == Role::Head && links_changed && Self::k_ball(ctx) != self.flood_view {
            self.flood(ctx);
        }
        if self.hop_view() != before {
            self.reclassify(ctx);
        }
    }

    pub fn on_shutdown(&mut self, ctx: &mut Ctx) {
        if self.role == Role::Head {
            let stamp = ctx.version();
            ctx.to_neighbors(stamp, MessageBody::HeadResign { head: ctx.me }, None);
        }
    }
}
