use crate::switchfab::HostId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostLoad {
    pub host: HostId,
    /// VMs booted or booting, first instances included.
    pub used: usize,
    pub slots: usize,
    pub alive: bool,
}

impl HostLoad {
    pub fn has_room(&self) -> bool {
        self.alive && self.used < self.slots
    }
}

pub trait PlacementPolicy: Send {
    /// Picks a host for a new replica of a service whose first instance runs
    /// on `local`. `None` means no capacity.
    fn place(&self, local: HostId, loads: &[HostLoad]) -> Option<HostId>;
}

/// Fills the first-instance host, then the least-loaded remote host, ties
/// going to the lowest host id.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalFirst;

impl PlacementPolicy for LocalFirst {
    fn place(&self, local: HostId, loads: &[HostLoad]) -> Option<HostId> {
        if loads.iter().any(|l| l.host == local && l.has_room()) {
            return Some(local);
        }
        loads
            .iter()
            .filter(|l| l.host != local && l.has_room())
            .min_by_key(|l| (l.used, l.host))
            .map(|l| l.host)
    }
}
