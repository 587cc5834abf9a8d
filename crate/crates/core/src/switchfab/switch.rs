use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use super::{
    flow_hash, join_actions, output_port, select_weighted, Action, Bucket, BucketId, FlowKey,
    FlowRule, GroupEntry, GroupId, HostId, Match, PortId, PortKind, RuleAction, RuleId,
    SwitchError, TunnelPort, TCP, UPLINK,
};

/// How new flows hitting a group are assigned to buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// SELECT group entry; the kernel cache pins each flow's first decision.
    #[default]
    GroupTable,
    /// Table 0 hashes the flow into a register indexing a slave list, then
    /// installs an exact-match rule into table 1 that later packets hit.
    TwoTableLearn,
}

/// Priority given to rules learned by the two-table backend.
const LEARNED_PRIORITY: u16 = u16::MAX;

pub const SNAT_PRIORITY: u16 = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedFlow {
    pub key: FlowKey,
    pub actions: Vec<Action>,
    pub group: GroupId,
    pub bucket: BucketId,
    pub created_at: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub actions: Vec<Action>,
    pub egress: PortId,
    /// The flow key after header rewrites.
    pub key: FlowKey,
    /// Group and bucket the flow is pinned to, for group-steered flows.
    pub pinned: Option<(GroupId, BucketId)>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone)]
struct InstalledRule {
    id: RuleId,
    rule: FlowRule,
}

#[derive(Debug)]
pub struct Switch {
    host: HostId,
    seed: u64,
    backend: Backend,
    saw_traffic: bool,
    ports: BTreeMap<PortId, PortKind>,
    next_port: PortId,
    tunnels: HashMap<(HostId, u32), PortId>,
    /// Kept sorted by descending priority, then install order.
    rules: Vec<InstalledRule>,
    next_rule: u64,
    groups: BTreeMap<GroupId, GroupEntry>,
    cache: HashMap<FlowKey, CachedFlow>,
    pinned: HashMap<(GroupId, BucketId), usize>,
}

fn rewrite(key: &FlowKey, actions: &[Action]) -> FlowKey {
    let mut out = *key;
    for a in actions {
        match a {
            Action::SetDstIp(ip) => out.dst_ip = *ip,
            Action::SetSrcIp(ip) => out.src_ip = *ip,
            Action::SetDstMac(_) | Action::Output(_) => {}
        }
    }
    out
}

impl Switch {
    pub fn new(host: HostId, seed: u64) -> Self {
        let mut ports = BTreeMap::new();
        ports.insert(UPLINK, PortKind::Uplink);
        Switch {
            host,
            seed,
            backend: Backend::default(),
            saw_traffic: false,
            ports,
            next_port: UPLINK + 1,
            tunnels: HashMap::new(),
            rules: Vec::new(),
            next_rule: 1,
            groups: BTreeMap::new(),
            cache: HashMap::new(),
            pinned: HashMap::new(),
        }
    }

    pub fn host(&self) -> HostId {
        self.host
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn select_backend_mode(&mut self, backend: Backend) -> Result<(), SwitchError> {
        if self.saw_traffic && backend != self.backend {
            return Err(SwitchError::ModeChangeAfterTraffic);
        }
        self.backend = backend;
        Ok(())
    }

    // ---- ports ----

    fn add_port(&mut self, kind: PortKind) -> PortId {
        let id = self.next_port;
        self.next_port += 1;
        self.ports.insert(id, kind);
        id
    }

    pub fn add_vif(&mut self, name: impl Into<String>) -> PortId {
        self.add_port(PortKind::Vif(name.into()))
    }

    pub fn create_tunnel(&mut self, remote: HostId, key: u32) -> Result<TunnelPort, SwitchError> {
        if self.tunnels.contains_key(&(remote, key)) {
            return Err(SwitchError::DuplicateKey { remote, key });
        }
        let port = self.add_port(PortKind::Tunnel { remote, key });
        self.tunnels.insert((remote, key), port);
        Ok(TunnelPort { port, remote, key })
    }

    pub fn tunnel_port(&self, remote: HostId, key: u32) -> Option<PortId> {
        self.tunnels.get(&(remote, key)).copied()
    }

    pub fn port(&self, id: PortId) -> Option<&PortKind> {
        self.ports.get(&id)
    }

    pub fn ports(&self) -> impl Iterator<Item = (PortId, &PortKind)> {
        self.ports.iter().map(|(id, k)| (*id, k))
    }

    pub fn remove_port(&mut self, id: PortId) -> Result<PortKind, SwitchError> {
        if id == UPLINK {
            return Err(SwitchError::NoSuchPort(id));
        }
        let kind = self.ports.remove(&id).ok_or(SwitchError::NoSuchPort(id))?;
        if let PortKind::Tunnel { remote, key } = kind {
            self.tunnels.remove(&(remote, key));
        }
        Ok(kind)
    }

    fn check_actions(&self, actions: &[Action]) -> Result<(), SwitchError> {
        let port = output_port(actions).ok_or(SwitchError::BadActions)?;
        if !self.ports.contains_key(&port) {
            return Err(SwitchError::NoSuchPort(port));
        }
        Ok(())
    }

    // ---- flow table ----

    pub fn install_flow(&mut self, rule: FlowRule) -> Result<RuleId, SwitchError> {
        match &rule.action {
            RuleAction::Apply(actions) => self.check_actions(actions)?,
            RuleAction::Group(_) | RuleAction::Drop => {}
        }
        if self
            .rules
            .iter()
            .any(|r| r.rule.priority == rule.priority && r.rule.matcher == rule.matcher)
        {
            return Err(SwitchError::DuplicateExactRule);
        }
        let id = RuleId(self.next_rule);
        self.next_rule += 1;
        let at = self
            .rules
            .iter()
            .position(|r| r.rule.priority < rule.priority)
            .unwrap_or(self.rules.len());
        self.rules.insert(at, InstalledRule { id, rule });
        Ok(id)
    }

    pub fn remove_flow(&mut self, id: RuleId) -> Result<FlowRule, SwitchError> {
        let at = self
            .rules
            .iter()
            .position(|r| r.id == id)
            .ok_or(SwitchError::NoSuchRule)?;
        Ok(self.rules.remove(at).rule)
    }

    pub fn rules(&self) -> impl Iterator<Item = (RuleId, &FlowRule)> {
        self.rules.iter().map(|r| (r.id, &r.rule))
    }

    /// Rewrites the source address of responses leaving `replica_ip` from
    /// `service_port` to `service_ip` and sends them out of the uplink.
    pub fn install_snat(
        &mut self,
        service_port: u16,
        replica_ip: Ipv4Addr,
        service_ip: Ipv4Addr,
    ) -> Result<RuleId, SwitchError> {
        self.install_flow(FlowRule::new(
            SNAT_PRIORITY,
            Match::any().src_ip(replica_ip).proto(TCP).src_port(service_port),
            RuleAction::Apply(vec![Action::SetSrcIp(service_ip), Action::Output(UPLINK)]),
        ))
    }

    // ---- groups ----

    pub fn create_group(
        &mut self,
        gid: GroupId,
        buckets: Vec<Bucket>,
    ) -> Result<&GroupEntry, SwitchError> {
        if self.groups.contains_key(&gid) {
            return Err(SwitchError::DuplicateGroup(gid));
        }
        for (i, b) in buckets.iter().enumerate() {
            self.check_actions(&b.actions)?;
            if buckets[..i].iter().any(|o| o.id == b.id) {
                return Err(SwitchError::DuplicateBucket(gid, b.id));
            }
        }
        Ok(self
            .groups
            .entry(gid)
            .or_insert(GroupEntry { id: gid, buckets }))
    }

    pub fn delete_group(&mut self, gid: GroupId) -> Result<Vec<CachedFlow>, SwitchError> {
        let group = self.groups.remove(&gid).ok_or(SwitchError::NoSuchGroup(gid))?;
        Ok(group
            .buckets
            .iter()
            .flat_map(|b| self.expire_bucket_flows(gid, b.id))
            .collect())
    }

    pub fn group(&self, gid: GroupId) -> Option<&GroupEntry> {
        self.groups.get(&gid)
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupEntry> {
        self.groups.values()
    }

    fn group_mut(&mut self, gid: GroupId) -> Result<&mut GroupEntry, SwitchError> {
        self.groups.get_mut(&gid).ok_or(SwitchError::NoSuchGroup(gid))
    }

    fn bucket_mut(&mut self, gid: GroupId, bid: BucketId) -> Result<&mut Bucket, SwitchError> {
        self.group_mut(gid)?
            .buckets
            .iter_mut()
            .find(|b| b.id == bid)
            .ok_or(SwitchError::NoSuchBucket(gid, bid))
    }

    pub fn add_bucket(&mut self, gid: GroupId, bucket: Bucket) -> Result<BucketId, SwitchError> {
        self.check_actions(&bucket.actions)?;
        let group = self.group_mut(gid)?;
        if group.bucket(bucket.id).is_some() {
            return Err(SwitchError::DuplicateBucket(gid, bucket.id));
        }
        let id = bucket.id;
        group.buckets.push(bucket);
        Ok(id)
    }

    pub fn set_bucket_weight(
        &mut self,
        gid: GroupId,
        bid: BucketId,
        weight: u32,
    ) -> Result<(), SwitchError> {
        self.bucket_mut(gid, bid)?.weight = weight;
        Ok(())
    }

    /// Changes the actions new flows receive; pinned flows keep their own.
    pub fn update_bucket_actions(
        &mut self,
        gid: GroupId,
        bid: BucketId,
        actions: Vec<Action>,
    ) -> Result<(), SwitchError> {
        self.check_actions(&actions)?;
        self.bucket_mut(gid, bid)?.actions = actions;
        Ok(())
    }

    /// Removes a drained bucket. Fails while any pinned flow still uses it.
    pub fn remove_bucket(&mut self, gid: GroupId, bid: BucketId) -> Result<Bucket, SwitchError> {
        self.bucket_mut(gid, bid)?;
        let live = self.pinned_count(gid, bid);
        if live > 0 {
            return Err(SwitchError::BucketStillDraining { bucket: bid, live });
        }
        Ok(self.take_bucket(gid, bid))
    }

    /// Removes a bucket regardless of drain state, returning the pinned flows
    /// that were cut off.
    pub fn force_remove_bucket(
        &mut self,
        gid: GroupId,
        bid: BucketId,
    ) -> Result<(Bucket, Vec<CachedFlow>), SwitchError> {
        self.bucket_mut(gid, bid)?;
        let expired = self.expire_bucket_flows(gid, bid);
        Ok((self.take_bucket(gid, bid), expired))
    }

    fn take_bucket(&mut self, gid: GroupId, bid: BucketId) -> Bucket {
        let group = self.groups.get_mut(&gid).expect("checked by caller");
        let at = group
            .buckets
            .iter()
            .position(|b| b.id == bid)
            .expect("checked by caller");
        group.buckets.remove(at)
    }

    /// Purges every cached flow pinned to the bucket.
    pub fn expire_bucket_flows(&mut self, gid: GroupId, bid: BucketId) -> Vec<CachedFlow> {
        if self.pinned.remove(&(gid, bid)).is_none() {
            return Vec::new();
        }
        let keys: Vec<FlowKey> = self
            .cache
            .values()
            .filter(|c| c.group == gid && c.bucket == bid)
            .map(|c| c.key)
            .collect();
        let mut out: Vec<CachedFlow> = keys
            .iter()
            .filter_map(|k| self.cache.remove(k))
            .collect();
        out.sort_by_key(|c| c.key);
        out
    }

    // ---- flow cache ----

    pub fn pinned_count(&self, gid: GroupId, bid: BucketId) -> usize {
        self.pinned.get(&(gid, bid)).copied().unwrap_or(0)
    }

    pub fn cached(&self, key: &FlowKey) -> Option<&CachedFlow> {
        self.cache.get(key)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Ends a flow, releasing its pin.
    pub fn close_flow(&mut self, key: &FlowKey) -> Option<CachedFlow> {
        let c = self.cache.remove(key)?;
        if let Some(n) = self.pinned.get_mut(&(c.group, c.bucket)) {
            *n -= 1;
            if *n == 0 {
                self.pinned.remove(&(c.group, c.bucket));
            }
        }
        Some(c)
    }

    pub fn classify(
        &mut self,
        key: &FlowKey,
        in_port: PortId,
        now: f64,
    ) -> Result<Decision, SwitchError> {
        self.saw_traffic = true;
        if let Some(c) = self.cache.get(key) {
            return Ok(Decision {
                egress: output_port(&c.actions).expect("validated at install"),
                key: rewrite(key, &c.actions),
                actions: c.actions.clone(),
                pinned: Some((c.group, c.bucket)),
                cache_hit: true,
            });
        }
        let rule = self
            .rules
            .iter()
            .find(|r| r.rule.matcher.matches(key, in_port))
            .ok_or(SwitchError::Dropped)?;
        match &rule.rule.action {
            RuleAction::Drop => Err(SwitchError::Dropped),
            RuleAction::Apply(actions) => {
                let actions = actions.clone();
                let egress = output_port(&actions).expect("validated at install");
                if !self.ports.contains_key(&egress) {
                    return Err(SwitchError::Dropped);
                }
                Ok(Decision {
                    key: rewrite(key, &actions),
                    actions,
                    egress,
                    pinned: None,
                    cache_hit: false,
                })
            }
            RuleAction::Group(gid) => {
                let gid = *gid;
                let group = self.groups.get(&gid).ok_or(SwitchError::NoSuchGroup(gid))?;
                let hash = flow_hash(key, self.seed);
                let bucket = match self.backend {
                    Backend::GroupTable => select_group(group, hash),
                    Backend::TwoTableLearn => select_learn(group, hash),
                }
                .ok_or(SwitchError::NoLiveBucket(gid))?;
                let cached = CachedFlow {
                    key: *key,
                    actions: bucket.actions.clone(),
                    group: gid,
                    bucket: bucket.id,
                    created_at: now,
                };
                let decision = Decision {
                    egress: bucket.output().expect("validated at install"),
                    key: rewrite(key, &bucket.actions),
                    actions: bucket.actions.clone(),
                    pinned: Some((gid, bucket.id)),
                    cache_hit: false,
                };
                *self.pinned.entry((gid, bucket.id)).or_default() += 1;
                self.cache.insert(*key, cached);
                Ok(decision)
            }
        }
    }

    /// Clears rules, groups, cached flows and tunnel ports. Returns the flows
    /// that were pinned at the time.
    pub fn reset(&mut self) -> Vec<CachedFlow> {
        self.rules.clear();
        self.groups.clear();
        self.pinned.clear();
        let mut flushed: Vec<CachedFlow> = self.cache.drain().map(|(_, c)| c).collect();
        flushed.sort_by_key(|c| c.key);
        let tunnels: Vec<PortId> = self.tunnels.values().copied().collect();
        for p in tunnels {
            self.ports.remove(&p);
        }
        self.tunnels.clear();
        flushed
    }

    /// Text dump: ports, then flow rules in match order, then groups. The
    /// two-table backend also lists the exact-match rules it has learned.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, kind) in &self.ports {
            let _ = writeln!(out, "port={id} {kind}");
        }
        for r in &self.rules {
            let _ = writeln!(
                out,
                "priority={} match={} actions={}",
                r.rule.priority, r.rule.matcher, r.rule.action
            );
        }
        if self.backend == Backend::TwoTableLearn {
            let mut learned: Vec<&CachedFlow> = self.cache.values().collect();
            learned.sort_by_key(|c| c.key);
            for c in learned {
                let _ = writeln!(
                    out,
                    "table=1 priority={LEARNED_PRIORITY} match={} actions={}",
                    Match::exact(&c.key),
                    join_actions(&c.actions)
                );
            }
        }
        for g in self.groups.values() {
            let _ = write!(out, "group={:08x} type=select", g.id);
            for b in &g.buckets {
                let _ = write!(out, " bucket={}:w={}:{}", b.id, b.weight, join_actions(&b.actions));
            }
            out.push('\n');
        }
        out
    }
}

fn select_group(group: &GroupEntry, hash: u64) -> Option<&Bucket> {
    let weights: Vec<u32> = group.buckets.iter().map(|b| b.weight).collect();
    select_weighted(hash, &weights).map(|i| &group.buckets[i])
}

/// Two-table selection: each bucket appears in the slave list once per unit
/// of gcd-normalized weight, and the hash register indexes the list.
fn select_learn(group: &GroupEntry, hash: u64) -> Option<&Bucket> {
    let g = group
        .buckets
        .iter()
        .map(|b| b.weight)
        .fold(0u32, num_gcd);
    if g == 0 {
        return None;
    }
    let slaves: Vec<&Bucket> = group
        .buckets
        .iter()
        .flat_map(|b| std::iter::repeat_n(b, (b.weight / g) as usize))
        .collect();
    let register = hash % slaves.len() as u64;
    Some(slaves[register as usize])
}

fn num_gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        num_gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SVC: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 18);
    const GID: GroupId = 0x0a00_0012;

    fn client(i: u32) -> FlowKey {
        FlowKey::tcp(Ipv4Addr::from(0x0a80_0000 + i), 10_000 + (i % 50_000) as u16, SVC, 80)
    }

    fn to_port(p: PortId) -> Vec<Action> {
        vec![Action::SetDstIp(Ipv4Addr::new(10, 0, 1, p as u8)), Action::Output(p)]
    }

    /// Switch with `n` vif ports and a service rule steering to group GID.
    fn service_switch(weights: &[u32], backend: Backend) -> Switch {
        let mut sw = Switch::new(0, 42);
        sw.select_backend_mode(backend).unwrap();
        let buckets = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let port = sw.add_vif(format!("vif{i}"));
                Bucket::new(i as BucketId + 1, w, to_port(port))
            })
            .collect();
        sw.create_group(GID, buckets).unwrap();
        sw.install_flow(FlowRule::new(
            100,
            Match::any().in_port(UPLINK).dst_ip(SVC).proto(TCP).dst_port(80),
            RuleAction::Group(GID),
        ))
        .unwrap();
        sw
    }

    #[test]
    fn priority_order_and_default_drop() {
        let mut sw = service_switch(&[1], Backend::GroupTable);
        sw.install_flow(FlowRule::new(0, Match::any(), RuleAction::Drop))
            .unwrap();
        assert!(sw.classify(&client(1), UPLINK, 0.0).is_ok());
        let mut other = client(2);
        other.dst_port = 22;
        assert_eq!(sw.classify(&other, UPLINK, 0.0), Err(SwitchError::Dropped));

        let mut bare = Switch::new(0, 1);
        assert_eq!(bare.classify(&client(1), UPLINK, 0.0), Err(SwitchError::Dropped));
    }

    #[test]
    fn firewall_rule_shadows_group() {
        let mut sw = service_switch(&[1], Backend::GroupTable);
        sw.install_flow(FlowRule::new(
            120,
            Match::any().src_ip(client(7).src_ip).dst_port(80),
            RuleAction::Drop,
        ))
        .unwrap();
        assert_eq!(sw.classify(&client(7), UPLINK, 0.0), Err(SwitchError::Dropped));
        assert!(sw.classify(&client(8), UPLINK, 0.0).is_ok());
    }

    #[test]
    fn ties_go_to_earliest_installed() {
        let mut sw = Switch::new(0, 1);
        let a = sw.add_vif("a");
        let b = sw.add_vif("b");
        sw.install_flow(FlowRule::new(5, Match::any().dst_port(80), RuleAction::Apply(vec![Action::Output(a)])))
            .unwrap();
        sw.install_flow(FlowRule::new(5, Match::any().proto(TCP), RuleAction::Apply(vec![Action::Output(b)])))
            .unwrap();
        assert_eq!(sw.classify(&client(1), UPLINK, 0.0).unwrap().egress, a);
    }

    #[test]
    fn duplicate_rule_rejected() {
        let mut sw = Switch::new(0, 1);
        sw.install_flow(FlowRule::new(0, Match::any(), RuleAction::Drop)).unwrap();
        assert_eq!(
            sw.install_flow(FlowRule::new(0, Match::any(), RuleAction::Drop)),
            Err(SwitchError::DuplicateExactRule)
        );
    }

    #[test]
    fn cache_hit_is_identical() {
        let mut sw = service_switch(&[1, 1, 1], Backend::GroupTable);
        let first = sw.classify(&client(3), UPLINK, 0.0).unwrap();
        let second = sw.classify(&client(3), UPLINK, 1.0).unwrap();
        assert!(!first.cache_hit && second.cache_hit);
        assert_eq!(first.actions, second.actions);
        assert_eq!(first.pinned, second.pinned);
        assert_eq!(sw.cache_len(), 1);
    }

    #[test]
    fn weight_zero_bucket_gets_no_new_flows() {
        let mut sw = service_switch(&[1, 0], Backend::GroupTable);
        for i in 0..500 {
            assert_eq!(sw.classify(&client(i), UPLINK, 0.0).unwrap().pinned, Some((GID, 1)));
        }
        sw.set_bucket_weight(GID, 1, 0).unwrap();
        assert_eq!(sw.classify(&client(9999), UPLINK, 0.0), Err(SwitchError::NoLiveBucket(GID)));
        // Pinned flows keep flowing.
        assert_eq!(sw.classify(&client(3), UPLINK, 0.0).unwrap().pinned, Some((GID, 1)));
        sw.set_bucket_weight(GID, 2, 1).unwrap();
        assert_eq!(sw.classify(&client(10_000), UPLINK, 0.0).unwrap().pinned, Some((GID, 2)));
    }

    #[test]
    fn added_bucket_never_receives_pinned_flows() {
        let mut sw = service_switch(&[1], Backend::GroupTable);
        for i in 0..1000 {
            sw.classify(&client(i), UPLINK, 0.0).unwrap();
        }
        let p = sw.add_vif("new");
        sw.add_bucket(GID, Bucket::new(2, 1, to_port(p))).unwrap();
        for i in 0..1000 {
            assert_eq!(sw.classify(&client(i), UPLINK, 1.0).unwrap().pinned, Some((GID, 1)));
        }
        let fresh = (1000..3000)
            .filter(|&i| sw.classify(&client(i), UPLINK, 2.0).unwrap().pinned == Some((GID, 2)))
            .count();
        assert!(fresh > 800 && fresh < 1200, "{fresh}");
    }

    #[test]
    fn remove_bucket_requires_drain() {
        let mut sw = service_switch(&[1, 1], Backend::GroupTable);
        let key = (0..)
            .map(client)
            .find(|k| sw.classify(k, UPLINK, 0.0).unwrap().pinned == Some((GID, 2)))
            .unwrap();
        sw.set_bucket_weight(GID, 2, 0).unwrap();
        assert_eq!(
            sw.remove_bucket(GID, 2),
            Err(SwitchError::BucketStillDraining { bucket: 2, live: 1 })
        );
        sw.close_flow(&key).unwrap();
        sw.remove_bucket(GID, 2).unwrap();
        for i in 10_000..10_200 {
            assert_eq!(sw.classify(&client(i), UPLINK, 0.0).unwrap().pinned, Some((GID, 1)));
        }
        assert_eq!(sw.remove_bucket(GID, 2), Err(SwitchError::NoSuchBucket(GID, 2)));
    }

    #[test]
    fn force_remove_expires_pins() {
        let mut sw = service_switch(&[1, 1], Backend::GroupTable);
        for i in 0..100 {
            sw.classify(&client(i), UPLINK, 0.0).unwrap();
        }
        let live = sw.pinned_count(GID, 2);
        let (_, expired) = sw.force_remove_bucket(GID, 2).unwrap();
        assert_eq!(expired.len(), live);
        assert_eq!(sw.cache_len(), 100 - live);
        assert_eq!(sw.pinned_count(GID, 2), 0);
    }

    #[test]
    fn group_errors() {
        let mut sw = service_switch(&[1], Backend::GroupTable);
        assert_eq!(sw.create_group(GID, vec![]).unwrap_err(), SwitchError::DuplicateGroup(GID));
        assert_eq!(
            sw.add_bucket(7, Bucket::new(1, 1, vec![Action::Output(UPLINK)])),
            Err(SwitchError::NoSuchGroup(7))
        );
        assert_eq!(sw.set_bucket_weight(GID, 9, 1), Err(SwitchError::NoSuchBucket(GID, 9)));
        assert_eq!(
            sw.add_bucket(GID, Bucket::new(2, 1, vec![Action::Output(99)])),
            Err(SwitchError::NoSuchPort(99))
        );
        assert_eq!(
            sw.add_bucket(GID, Bucket::new(2, 1, vec![])),
            Err(SwitchError::BadActions)
        );
    }

    #[test]
    fn empty_group_then_add() {
        let mut sw = service_switch(&[], Backend::GroupTable);
        assert!(sw.classify(&client(1), UPLINK, 0.0).is_err());
        let p = sw.add_vif("x");
        sw.add_bucket(GID, Bucket::new(5, 1, to_port(p))).unwrap();
        for i in 2..50 {
            assert_eq!(sw.classify(&client(i), UPLINK, 0.0).unwrap().pinned, Some((GID, 5)));
        }
    }

    #[test]
    fn snat_rewrites_matching_responses_only() {
        let mut sw = Switch::new(1, 1);
        let replica = Ipv4Addr::new(10, 0, 1, 200);
        sw.install_snat(80, replica, SVC).unwrap();
        let resp = FlowKey::tcp(replica, 80, Ipv4Addr::new(1, 2, 3, 4), 5555);
        let d = sw.classify(&resp, 2, 0.0).unwrap();
        assert_eq!(d.key.src_ip, SVC);
        assert_eq!(d.egress, UPLINK);
        let other = FlowKey::tcp(replica, 8080, Ipv4Addr::new(1, 2, 3, 4), 5555);
        assert_eq!(sw.classify(&other, 2, 0.0), Err(SwitchError::Dropped));
    }

    #[test]
    fn tunnels_need_unique_keys() {
        let mut sw = Switch::new(0, 1);
        let a = sw.create_tunnel(1, 100).unwrap();
        let b = sw.create_tunnel(1, 101).unwrap();
        assert_ne!(a.port, b.port);
        assert_eq!(sw.create_tunnel(1, 100), Err(SwitchError::DuplicateKey { remote: 1, key: 100 }));
        assert!(sw.create_tunnel(2, 100).is_ok());
        sw.remove_port(a.port).unwrap();
        assert!(sw.create_tunnel(1, 100).is_ok());
    }

    #[test]
    fn learn_backend_installs_exact_rule() {
        let mut sw = service_switch(&[1, 1], Backend::TwoTableLearn);
        let first = sw.classify(&client(1), UPLINK, 0.0).unwrap();
        assert!(!first.cache_hit);
        assert!(sw.dump().contains("table=1 priority=65535 match=nw_src=10.128.0.1"));
        assert!(sw.classify(&client(1), UPLINK, 0.0).unwrap().cache_hit);
        assert_eq!(
            sw.select_backend_mode(Backend::GroupTable),
            Err(SwitchError::ModeChangeAfterTraffic)
        );
    }

    #[test]
    fn backends_agree_under_uniform_weights() {
        let mut g = service_switch(&[1, 1, 1], Backend::GroupTable);
        let mut l = service_switch(&[1, 1, 1], Backend::TwoTableLearn);
        for i in 0..5000 {
            let a = g.classify(&client(i), UPLINK, 0.0).unwrap().pinned;
            let b = l.classify(&client(i), UPLINK, 0.0).unwrap().pinned;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dump_format() {
        let mut sw = service_switch(&[1, 0], Backend::GroupTable);
        sw.install_flow(FlowRule::new(0, Match::any(), RuleAction::Drop)).unwrap();
        let dump = sw.dump();
        let expected = "\
port=1 type=uplink
port=2 type=vif name=vif0
port=3 type=vif name=vif1
priority=100 match=in_port=1,nw_dst=10.0.0.18,nw_proto=6,tp_dst=80 actions=group:0a000012
priority=0 match=any actions=drop
group=0a000012 type=select bucket=1:w=1:mod_nw_dst:10.0.1.2;output:2 bucket=2:w=0:mod_nw_dst:10.0.1.3;output:3
";
        assert_eq!(dump, expected);
    }

    #[test]
    fn reset_clears_everything_but_vifs() {
        let mut sw = service_switch(&[1], Backend::GroupTable);
        sw.create_tunnel(3, 9).unwrap();
        sw.classify(&client(1), UPLINK, 0.0).unwrap();
        let flushed = sw.reset();
        assert_eq!(flushed.len(), 1);
        assert_eq!(sw.dump(), "port=1 type=uplink\nport=2 type=vif name=vif0\n");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Add(u32),
        Weight(usize, u32),
        Remove(usize),
        Close(u32),
        Classify(u32),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u32..4).prop_map(Op::Add),
            (0usize..8, 0u32..4).prop_map(|(b, w)| Op::Weight(b, w)),
            (0usize..8).prop_map(Op::Remove),
            (0u32..300).prop_map(Op::Close),
            (0u32..600).prop_map(Op::Classify),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        // Pinning and weight-0 exclusion over random interleavings.
        #[test]
        fn pins_survive_churn(ops in proptest::collection::vec(op(), 1..80), learn in any::<bool>()) {
            let backend = if learn { Backend::TwoTableLearn } else { Backend::GroupTable };
            let mut sw = service_switch(&[1, 1], backend);
            let mut next_bucket = 3;
            let mut first: HashMap<FlowKey, Decision> = HashMap::new();
            for i in 0..300 {
                let d = sw.classify(&client(i), UPLINK, 0.0).unwrap();
                first.insert(client(i), d);
            }
            for op in ops {
                let ids: Vec<BucketId> = sw.group(GID).unwrap().buckets.iter().map(|b| b.id).collect();
                match op {
                    Op::Add(w) => {
                        let p = sw.add_vif(format!("v{next_bucket}"));
                        sw.add_bucket(GID, Bucket::new(next_bucket, w, to_port(p))).unwrap();
                        next_bucket += 1;
                    }
                    Op::Weight(b, w) if !ids.is_empty() => {
                        sw.set_bucket_weight(GID, ids[b % ids.len()], w).unwrap();
                    }
                    Op::Remove(b) if !ids.is_empty() => {
                        let bid = ids[b % ids.len()];
                        let live = sw.pinned_count(GID, bid);
                        match sw.remove_bucket(GID, bid) {
                            Ok(_) => prop_assert_eq!(live, 0),
                            Err(e) => prop_assert_eq!(e, SwitchError::BucketStillDraining { bucket: bid, live }),
                        }
                    }
                    Op::Close(i) => {
                        if sw.close_flow(&client(i)).is_some() {
                            first.remove(&client(i));
                        }
                    }
                    Op::Classify(i) => {
                        let k = client(i);
                        let weights: HashMap<BucketId, u32> = sw.group(GID).unwrap().buckets.iter().map(|b| (b.id, b.weight)).collect();
                        match sw.classify(&k, UPLINK, 1.0) {
                            Ok(d) => {
                                if let Some(prev) = first.get(&k) {
                                    prop_assert_eq!(&d.actions, &prev.actions);
                                    prop_assert_eq!(d.pinned, prev.pinned);
                                } else {
                                    let (_, bid) = d.pinned.unwrap();
                                    prop_assert!(weights[&bid] > 0);
                                    first.insert(k, d);
                                }
                            }
                            Err(e) => {
                                prop_assert!(!first.contains_key(&k));
                                prop_assert_eq!(e, SwitchError::NoLiveBucket(GID));
                            }
                        }
                    }
                    _ => {}
                }
            }
            for (k, d) in &first {
                let again = sw.classify(k, UPLINK, 2.0).unwrap();
                prop_assert_eq!(&again.actions, &d.actions);
            }
        }
    }
}
