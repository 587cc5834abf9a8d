use std::collections::BTreeMap;

/// Per-host table of running domains, the ground truth the monitor
/// reconciles store records against. Domain ids are never reused.
#[derive(Debug, Clone)]
pub struct HypervisorRegistry {
    doms: BTreeMap<u32, String>,
    next: u32,
}

impl Default for HypervisorRegistry {
    fn default() -> Self {
        HypervisorRegistry::new()
    }
}

impl HypervisorRegistry {
    /// Domain 0 is the management domain, so guests start at 1.
    pub fn new() -> Self {
        HypervisorRegistry {
            doms: BTreeMap::new(),
            next: 1,
        }
    }

    pub fn create(&mut self, name: &str) -> u32 {
        let id = self.next;
        self.next += 1;
        self.doms.insert(id, name.to_string());
        id
    }

    pub fn destroy(&mut self, dom: u32) -> Option<String> {
        self.doms.remove(&dom)
    }

    /// Restarts the named domain under a fresh id.
    pub fn reboot(&mut self, dom: u32) -> Option<u32> {
        let name = self.doms.remove(&dom)?;
        Some(self.create(&name))
    }

    pub fn name_of(&self, dom: u32) -> Option<&str> {
        self.doms.get(&dom).map(String::as_str)
    }

    pub fn dom_of(&self, name: &str) -> Option<u32> {
        self.doms
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(d, _)| *d)
    }

    pub fn len(&self) -> usize {
        self.doms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doms.is_empty()
    }

    pub fn clear(&mut self) {
        self.doms.clear();
    }
}
