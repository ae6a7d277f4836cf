//! Failover, clone, handover and component-failure handling.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use super::{Barrier, CloneState, Ev, FailoverState, HandoverState, Msg, Node, Sim};
use crate::client::{shard_for, CachePolicy};
use crate::model::{
    Direction, FlowKey, InstanceId, LogicalClock, Mark, MarkKind, ObjectId, Packet, Protocol, RootId, ShardId,
    TcpFlags, Time,
};
use crate::report::{CloneRecord, FailoverRecord, HandoverRecord, RootFailureRecord, StoreRecoveryRecord};
use crate::runtime::RootState;
use crate::store::recovery::{recover_store, verify_read_log, KeyRecovery, NfDump};
use crate::store::CustomOps;

impl Sim {
    pub(crate) fn control_packet(&self, marks: Vec<Mark>, session: u64) -> Packet {
        let any = Ipv4Addr::UNSPECIFIED;
        Packet {
            clock: LogicalClock::ZERO,
            flow: FlowKey::new(any, any, 0, 0, Protocol::Tcp),
            direction: Direction::Forward,
            tcp_flags: TcpFlags::empty(),
            payload_len: 0,
            payload_tag: String::new(),
            vec: 0,
            marks,
            ingress_time: self.now,
            trace_index: u64::MAX,
            control: true,
            replayed: false,
            session: Some(session),
        }
    }

    fn new_instance_id(&mut self) -> InstanceId {
        let id = InstanceId(self.next_instance);
        self.next_instance += 1;
        id
    }

    fn new_session(&mut self) -> u64 {
        let s = self.next_session;
        self.next_session += 1;
        s
    }

    /// Stops an instance. Store ops already on the wire still land.
    pub(crate) fn kill(&mut self, id: InstanceId) {
        let Some(inst) = self.insts.get_mut(&id) else { return };
        inst.alive = false;
        inst.busy = false;
        inst.current = None;
        inst.queue.clear();
        inst.pending_deletes.clear();
        let keys: Vec<(InstanceId, u16)> = self.inflight.range((id, 0)..=(id, u16::MAX)).map(|(k, _)| *k).collect();
        for k in keys {
            let ops = self.inflight.remove(&k).unwrap_or_default();
            let node = &mut self.shards[k.1 as usize];
            if !node.up {
                continue;
            }
            for (_, op) in ops {
                let _ = node.store.apply_nonblocking(op);
            }
            node.store.drain();
        }
        for s in &mut self.shards {
            s.store.unregister_callbacks(id);
        }
        self.pump_effects();
    }

    fn replace_in_vertex(&mut self, vertex: usize, from: InstanceId, to: InstanceId) {
        let v = &mut self.dag.vertices[vertex];
        v.plan.replace_instance(from, to);
        for i in v.instances.iter_mut() {
            if *i == from {
                *i = to;
            }
        }
    }

    /// Queues replay copies of logged packets targeted at `target`, then the
    /// end-of-replay markers. `first_hop` restricts the replay to packets
    /// that entered through that instance.
    fn start_replay(&mut self, target: InstanceId, session: u64, first_hop: Option<InstanceId>) -> u64 {
        let vertex = self.insts[&target].vertex;
        let mut count = 0;
        for r in 0..self.roots.len() {
            if !self.roots[r].up {
                continue;
            }
            let entries: Vec<Packet> = self.roots[r]
                .state
                .log()
                .values()
                .filter(|e| first_hop.is_none_or(|f| e.first_hop == f))
                .map(|e| e.pkt.clone())
                .collect();
            for mut pkt in entries {
                pkt.vec = 0;
                pkt.marks = vec![Mark::replay(target)];
                pkt.replayed = true;
                let dst = if vertex == 0 { target } else { self.dag.vertices[0].plan.route(&pkt) };
                if vertex == 0 || self.dag.vertices[vertex].plan.route(&pkt) == target {
                    count += 1;
                }
                self.roots[r].tx.push_back((dst, pkt));
            }
            let mut marker = self.control_packet(vec![Mark::replay(target), Mark::plain(MarkKind::LastReplay)], session);
            marker.replayed = true;
            let dsts = if vertex == 0 {
                vec![target]
            } else {
                self.dag.vertices[0].instances.clone()
            };
            for d in dsts {
                self.roots[r].tx.push_back((d, marker.clone()));
            }
            self.arm_root_tx(r as u16);
        }
        let expected = self.sender_count(vertex);
        let inst = self.insts.get_mut(&target).expect("target exists");
        inst.barrier = Some(Barrier {
            session,
            expected,
            got: 0,
        });
        count
    }

    pub(crate) fn note_replayed(&mut self, id: InstanceId) {
        if let Some(f) = self.failovers.iter().find(|f| f.replacement == id) {
            if let Some(r) = self.report.failovers.get_mut(f.record) {
                r.replayed += 1;
            }
        }
    }

    pub(crate) fn replay_complete(&mut self, id: InstanceId, session: u64) {
        if let Some(f) = self.failovers.iter().find(|f| f.session == session && f.replacement == id) {
            let rec = f.record;
            self.report.failovers[rec].recovered_at = Some(self.now);
            self.session_ended();
            return;
        }
        if self.clones.iter().any(|c| c.session == session && c.clone == id) {
            let t = self.now + self.cfg.race_window;
            self.schedule(t, Ev::RaceEnd(session));
        }
    }

    pub(crate) fn crash_instance(&mut self, id: InstanceId) {
        if !self.alive(id) {
            return;
        }
        self.kill(id);
        self.crashed_at.insert(id, self.now);
        let t = self.now + self.cfg.detect_delay;
        self.schedule(t, Ev::Failover(id));
    }

    pub(crate) fn failover(&mut self, failed: InstanceId) {
        let vertex = self.insts[&failed].vertex;
        let replacement = self.new_instance_id();
        self.spawn_instance(replacement, vertex);
        let principal = self.principal.get(&failed).copied().unwrap_or(failed);
        self.principal.insert(replacement, principal);
        for s in &mut self.shards {
            s.store.add_alias(replacement, principal);
        }
        self.replace_in_vertex(vertex, failed, replacement);
        self.refresh_permissions(vertex);
        let session = self.new_session();
        self.active_sessions += 1;
        let first_hop = (vertex == 0).then_some(failed);
        let in_flight = self.start_replay(replacement, session, first_hop);
        let record = self.report.failovers.len();
        self.report.failovers.push(FailoverRecord {
            session,
            vertex: self.dag.vertices[vertex].name.clone(),
            failed,
            replacement,
            crashed_at: self.crashed_at.get(&failed).copied().unwrap_or(self.now),
            recovered_at: None,
            in_flight,
            replayed: 0,
        });
        self.failovers.push(FailoverState {
            session,
            replacement,
            record,
        });
    }

    pub(crate) fn start_clone(&mut self, original: InstanceId) {
        if !self.alive(original) {
            self.report.warnings.push(format!("clone of unavailable instance {original}"));
            return;
        }
        let vertex = self.insts[&original].vertex;
        let clone = self.new_instance_id();
        self.spawn_instance(clone, vertex);
        self.principal.insert(clone, original);
        for s in &mut self.shards {
            s.store.add_alias(clone, original);
        }
        let session = self.new_session();
        self.active_sessions += 1;
        let record = self.report.clones.len();
        self.report.clones.push(CloneRecord {
            session,
            original,
            clone,
            started: self.now,
            winner: None,
            processed_original: 0,
            processed_clone: 0,
        });
        self.clones.push(CloneState {
            session,
            original,
            clone,
            base_original: self.insts[&original].stats.processed,
            racing: true,
            record,
        });
        self.refresh_permissions(vertex);
        let first_hop = (vertex == 0).then_some(original);
        self.start_replay(clone, session, first_hop);
    }

    pub(crate) fn end_race(&mut self, session: u64) {
        let Some(c) = self.clones.iter_mut().find(|c| c.session == session) else { return };
        c.racing = false;
        let (original, clone, base, record) = (c.original, c.clone, c.base_original, c.record);
        let by_original = self.insts[&original].stats.processed - base;
        let by_clone = self.insts[&clone].stats.processed;
        let (winner, loser) = if by_clone > by_original {
            (clone, original)
        } else {
            (original, clone)
        };
        let vertex = self.insts[&original].vertex;
        if self.alive(winner) {
            let now = self.now;
            self.insts.get_mut(&winner).expect("winner").client.periodic_flush(now, true);
            self.ship_outbox(winner);
        }
        self.kill(loser);
        if winner == clone {
            self.replace_in_vertex(vertex, original, clone);
        }
        self.refresh_permissions(vertex);
        let rec = &mut self.report.clones[record];
        rec.winner = Some(winner);
        rec.processed_original = by_original;
        rec.processed_clone = by_clone;
        self.session_ended();
    }

    /// Picks the flows a handover will move: client flows the initial plan
    /// sends to `from`, preferring flows active on both sides of `at`, then
    /// the most packets after it.
    pub(crate) fn plan_handover(&mut self, from: InstanceId, to: Option<u16>, flows: usize, at: Time) -> Option<usize> {
        let Some(vertex) = self.dag.vertex_of(from) else {
            self.report.warnings.push(format!("handover from unknown instance {from}"));
            return None;
        };
        let plan = &self.dag.vertices[vertex].plan;
        let mut load: BTreeMap<FlowKey, (bool, u64)> = BTreeMap::new();
        for r in &*self.trace {
            let f = r.client_flow();
            if plan.route_flow(&f) != from {
                continue;
            }
            let e = load.entry(f).or_default();
            if r.time < at {
                e.0 = true;
            } else {
                e.1 += 1;
            }
        }
        let mut ranked: Vec<(bool, u64, FlowKey)> = load
            .into_iter()
            .filter(|(_, (_, after))| *after > 0)
            .map(|(f, (before, after))| (before, after, f))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        let chosen: BTreeSet<FlowKey> = ranked.into_iter().take(flows).map(|(_, _, f)| f).collect();
        let session = self.new_session();
        self.handovers.push(HandoverState {
            session,
            vertex,
            old: from,
            new: None,
            requested_new: to,
            flows: chosen,
            started: false,
            expected_markers: 0,
            got_markers: 0,
            released_shards: BTreeSet::new(),
            released: false,
            held: Vec::new(),
            gate_expected: 1,
            gate_got: 0,
            held_out: Vec::new(),
            emitted: BTreeMap::new(),
            record: usize::MAX,
        });
        Some(self.handovers.len() - 1)
    }

    pub(crate) fn start_handover(&mut self, idx: usize) {
        let (old, vertex, session, requested) = {
            let h = &self.handovers[idx];
            (h.old, h.vertex, h.session, h.requested_new)
        };
        if !self.alive(old) {
            self.report.warnings.push(format!("handover from unavailable instance {old}"));
            return;
        }
        let new = match requested.map(InstanceId) {
            Some(n) if self.insts.get(&n).is_some_and(|i| i.alive && i.vertex == vertex) => n,
            _ => {
                let n = self.new_instance_id();
                self.spawn_instance(n, vertex);
                self.dag.vertices[vertex].instances.push(n);
                self.refresh_permissions(vertex);
                n
            }
        };
        let flows: Vec<FlowKey> = self.handovers[idx].flows.iter().copied().collect();
        self.dag.vertices[vertex].plan.move_flows(&flows, new);
        for s in &mut self.shards {
            s.store.watch_session(session, new);
        }
        self.pump_effects();

        let moved = &self.handovers[idx].flows;
        let is_moved = |p: &Packet| !p.control && moved.contains(&p.client_flow());
        let inst = &self.insts[&old];
        let mut in_transit = inst.queue.iter().filter(|p| is_moved(p)).count() as u64;
        if inst.current.as_ref().is_some_and(|c| is_moved(&c.pkt)) {
            in_transit += 1;
        }
        in_transit += self
            .events
            .values()
            .filter(|e| match e {
                Ev::Deliver {
                    to: Node::Inst(t),
                    msg: Msg::Packet(p),
                    ..
                } => *t == old && is_moved(p),
                _ => false,
            })
            .count() as u64;
        if vertex == 0 {
            in_transit += self
                .roots
                .iter()
                .flat_map(|r| r.tx.iter())
                .filter(|(d, p)| *d == old && is_moved(p))
                .count() as u64;
        }

        let marker = self.control_packet(vec![Mark::plain(MarkKind::LastOfMove)], session);
        let mut expected = 0;
        if vertex == 0 {
            for r in 0..self.roots.len() {
                if self.roots[r].up {
                    self.roots[r].tx.push_back((old, marker.clone()));
                    self.arm_root_tx(r as u16);
                    expected += 1;
                }
            }
        } else {
            let ups: Vec<InstanceId> = self.dag.vertices[vertex - 1]
                .instances
                .iter()
                .copied()
                .filter(|i| self.alive(*i))
                .collect();
            for u in ups {
                self.send(Node::Inst(u), Node::Inst(old), Msg::Packet(marker.clone()));
                expected += 1;
            }
        }
        let last = vertex + 1 == self.dag.vertices.len();
        let gate_expected = if last {
            1
        } else {
            self.dag.vertices[vertex + 1].instances.len()
        };
        let record = self.report.handovers.len();
        self.report.handovers.push(HandoverRecord {
            session,
            vertex: self.dag.vertices[vertex].name.clone(),
            from: old,
            to: new,
            started: self.now,
            released: None,
            completed: None,
            moved_flows: flows.len(),
            in_transit,
            flows: Vec::new(),
        });
        let h = &mut self.handovers[idx];
        h.new = Some(new);
        h.started = true;
        h.expected_markers = expected;
        h.gate_expected = gate_expected;
        h.record = record;
        self.active_sessions += 1;
        self.log.record(self.now, "ctl", "moved", &format!("{session} {old} {new} {}", flows.len()));
    }

    /// At the old instance, once every upstream sender's move marker was
    /// dequeued: flush and release the moved state, then open the gate.
    pub(crate) fn on_move_marker(&mut self, id: InstanceId, session: u64) {
        let Some(idx) = self.handovers.iter().position(|h| h.session == session && h.old == id) else { return };
        let h = &mut self.handovers[idx];
        h.got_markers += 1;
        if h.got_markers < h.expected_markers {
            return;
        }
        let flows = h.flows.clone();
        let vertex = h.vertex;
        let new = h.new.expect("started");
        let now = self.now;
        let (keys, _) = self.with_access(id, |inst, acc| inst.client.flush_and_disassociate(&flows, acc, now));
        for s in 0..self.shards.len() {
            if let Some(ops) = self.inflight.remove(&(id, s as u16)) {
                let mut acks = Vec::new();
                for (_, op) in ops {
                    if let Ok(ack) = self.shards[s].store.apply_nonblocking(op) {
                        acks.push(ack);
                    }
                }
                self.shards[s].store.drain();
                for ack in acks {
                    self.send(Node::Shard(s as u16), Node::Inst(ack.issuer), Msg::StoreAck { seq: ack.seq });
                }
            }
        }
        let shards = self.dag.shards;
        for s in 0..self.shards.len() {
            let mine: Vec<ObjectId> = keys
                .iter()
                .filter(|k| shard_for(k, shards) == ShardId(s as u16))
                .cloned()
                .collect();
            if let Err(e) = self.shards[s].store.release_for_session(session, &mine, id) {
                self.report.warnings.push(format!("handover {session} release: {e}"));
            }
        }
        self.pump_effects();
        if vertex + 1 == self.dag.vertices.len() {
            self.send(Node::Inst(id), Node::Inst(new), Msg::GateReached { session });
        } else {
            let marker = self.control_packet(vec![Mark::plain(MarkKind::LastOfMove)], session);
            for d in self.dag.vertices[vertex + 1].instances.clone() {
                self.send(Node::Inst(id), Node::Inst(d), Msg::Packet(marker.clone()));
            }
        }
    }

    pub(crate) fn on_released(&mut self, id: InstanceId, session: u64, shard: u16) {
        let shards = self.shards.len();
        let Some(h) = self.handovers.iter_mut().find(|h| h.session == session && h.new == Some(id)) else { return };
        h.released_shards.insert(shard);
        if h.released || h.released_shards.len() < shards {
            return;
        }
        h.released = true;
        let held = std::mem::take(&mut h.held);
        let record = h.record;
        self.report.handovers[record].released = Some(self.now);
        self.insts.get_mut(&id).expect("alive").queue.push_front_all(held);
        self.maybe_complete(session);
        self.kick(id);
    }

    pub(crate) fn on_gate(&mut self, id: InstanceId, session: u64) {
        let Some(h) = self.handovers.iter_mut().find(|h| h.session == session && h.new == Some(id)) else { return };
        h.gate_got += 1;
        if h.gate_got < h.gate_expected {
            return;
        }
        let out = std::mem::take(&mut h.held_out);
        for (to, msg) in out {
            self.emit(Node::Inst(id), to, msg);
        }
        self.maybe_complete(session);
    }

    fn maybe_complete(&mut self, session: u64) {
        let Some(h) = self.handovers.iter().find(|h| h.session == session) else { return };
        let rec = h.record;
        if h.released && h.gate_got >= h.gate_expected && self.report.handovers[rec].completed.is_none() {
            self.report.handovers[rec].completed = Some(self.now);
            self.session_ended();
        }
    }

    pub(crate) fn crash_root(&mut self, r: u16) {
        let Some(root) = self.roots.get_mut(r as usize) else {
            self.report.warnings.push(format!("fault names unknown root {r}"));
            return;
        };
        if !root.up {
            return;
        }
        root.up = false;
        let lost_unsent: Vec<u64> = root
            .tx
            .iter()
            .filter(|(_, p)| !p.control && !p.replayed)
            .map(|(_, p)| p.trace_index)
            .collect();
        root.tx.clear();
        let persisted = root.state.persisted();
        root.failure = Some(self.report.root_failures.len());
        self.report.root_failures.push(RootFailureRecord {
            root: r,
            crashed_at: self.now,
            recovered_at: None,
            lost_unsent,
            persisted,
            resumed_at: 0,
        });
        let t = self.now + self.cfg.root_recovery;
        self.schedule(t, Ev::RootRecover(r));
    }

    pub(crate) fn recover_root(&mut self, r: u16) {
        let persist = self.cfg.persist_every;
        let thr = self.cfg.drop_threshold;
        let root = &mut self.roots[r as usize];
        root.state = RootState::recover(RootId(r), root.state.persisted(), persist, thr);
        root.up = true;
        if let Some(i) = root.failure.take() {
            let rec = &mut self.report.root_failures[i];
            rec.recovered_at = Some(self.now);
            rec.resumed_at = root.state.next_counter();
        }
        let buffered = std::mem::take(&mut root.buffered);
        for p in buffered {
            self.root_ingest(r, p);
        }
    }

    pub(crate) fn crash_shard(&mut self, s: u16) {
        let Some(node) = self.shards.get_mut(s as usize) else {
            self.report.warnings.push(format!("fault names unknown shard {s}"));
            return;
        };
        if !node.up {
            return;
        }
        node.up = false;
        node.crashed_at = self.now;
        self.inflight.retain(|(_, sh), _| *sh != s);
        let t = self.now + self.cfg.store_recovery;
        self.schedule(t, Ev::StoreRecover(s));
    }

    pub(crate) fn recover_shard(&mut self, s: u16) {
        let shard = ShardId(s);
        let dumps: BTreeMap<InstanceId, NfDump> = self
            .insts
            .values()
            .filter(|i| i.alive)
            .map(|i| (i.id, i.client.dump(shard)))
            .collect();
        let custom = CustomOps::standard();
        let node = &self.shards[s as usize];
        let cp = node.durable.last().cloned().unwrap_or_else(crate::store::Checkpoint::empty);
        let reads_checked = dumps
            .values()
            .flat_map(|d| d.reads.iter())
            .filter(|r| r.read_seq > cp.seq)
            .count();
        let mismatches = verify_read_log(&cp, &dumps, &custom).len();
        let mut rec = StoreRecoveryRecord {
            shard: s,
            crashed_at: node.crashed_at,
            recovered_at: self.now,
            checkpoint_time: cp.time,
            from_checkpoint: 0,
            from_read: 0,
            replayed_ops: 0,
            cached_objects: 0,
            reads_checked,
            read_mismatches: mismatches,
            error: None,
        };
        match recover_store(shard, &cp, &dumps, custom, self.cfg.seed ^ (s as u64 + 1)) {
            Ok((mut store, report)) => {
                store.set_emulation(self.cfg.suppression);
                if node.store.history().is_some() {
                    store.record_history();
                }
                for (alias, principal) in &self.principal {
                    store.add_alias(*alias, *principal);
                }
                for i in self.insts.values().filter(|i| i.alive) {
                    for (key, e) in i.client.cache_entries() {
                        if e.policy == CachePolicy::CrossflowCacheCallbacks && shard_for(key, self.dag.shards) == shard {
                            store.register_callback(key, i.id);
                        }
                    }
                }
                rec.from_checkpoint = report
                    .keys
                    .values()
                    .filter(|k| matches!(k, KeyRecovery::FromCheckpoint))
                    .count();
                rec.from_read = report.keys.len() - rec.from_checkpoint;
                rec.replayed_ops = report.replayed.len();
                rec.cached_objects = report.cached_objects;
                let node = &mut self.shards[s as usize];
                let old = std::mem::replace(&mut node.store, store);
                node.lost_duplicates += old.stats.duplicate_applications;
                node.lost_errors += old.errors().len() as u64;
                let ids: Vec<InstanceId> = self.insts.values().filter(|i| i.alive).map(|i| i.id).collect();
                for id in ids {
                    let commits = self.insts.get_mut(&id).expect("alive").client.on_store_recovered(shard);
                    for (clock, tag) in commits {
                        self.send(Node::Shard(s), Node::Root(clock.root().0), Msg::Commit { clock, tag });
                    }
                }
            }
            Err(e) => {
                self.report.warnings.push(format!("shard {s} recovery failed: {e}"));
                rec.error = Some(e.to_string());
            }
        }
        self.report.store_recoveries.push(rec);
        self.shards[s as usize].up = true;
        let ids: Vec<InstanceId> = self.insts.values().filter(|i| i.alive).map(|i| i.id).collect();
        for id in ids {
            self.kick(id);
        }
    }
}
