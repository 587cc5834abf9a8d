//! Share of fresh flows each weighted bucket receives, for both steering
//! backends.

use std::net::Ipv4Addr;

use selfscale::switchfab::{Action, Backend, Bucket, FlowKey, FlowRule, Match, RuleAction, Switch, UPLINK};

fn main() {
    let svc = Ipv4Addr::new(10, 0, 0, 18);
    let weights = [3u32, 2, 1];
    for backend in [Backend::GroupTable, Backend::TwoTableLearn] {
        let mut sw = Switch::new(0, 11);
        sw.select_backend_mode(backend).unwrap();
        let buckets = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let port = sw.add_vif(format!("vif{}", i + 1));
                Bucket::new(i as u32 + 1, w, vec![Action::Output(port)])
            })
            .collect();
        sw.create_group(9, buckets).unwrap();
        sw.install_flow(FlowRule::new(100, Match::any().dst_ip(svc), RuleAction::Group(9)))
            .unwrap();
        let n = 60_000u32;
        let mut counts = [0u32; 3];
        for i in 0..n {
            let key = FlowKey::tcp(Ipv4Addr::from(0x0a80_0000 + i), 1024 + (i % 60_000) as u16, svc, 80);
            let (_, bid) = sw.classify(&key, UPLINK, 0.0).unwrap().pinned.unwrap();
            counts[bid as usize - 1] += 1;
        }
        let shares: Vec<String> = counts
            .iter()
            .map(|&c| format!("{:.3}", f64::from(c) / f64::from(n)))
            .collect();
        println!("{backend:?}: weights {weights:?} -> shares [{}]", shares.join(", "));
    }
}
