//! Established flows keep their replica while the group is reweighted and a
//! bucket drains.

use std::net::Ipv4Addr;

use selfscale::switchfab::{
    Action, Bucket, FlowKey, FlowRule, Match, RuleAction, Switch, TCP, UPLINK,
};

const SVC: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 18);
const GID: u32 = 1;

fn client(i: u32) -> FlowKey {
    FlowKey::tcp(Ipv4Addr::from(0x0a80_0000 + i), 10_000 + i as u16, SVC, 80)
}

fn main() {
    let mut sw = Switch::new(0, 7);
    let a = sw.add_vif("vif1.1");
    let b = sw.add_vif("vif2.1");
    sw.create_group(
        GID,
        vec![
            Bucket::new(1, 1, vec![Action::Output(a)]),
            Bucket::new(2, 1, vec![Action::SetDstIp(Ipv4Addr::new(10, 0, 1, 200)), Action::Output(b)]),
        ],
    )
    .unwrap();
    sw.install_flow(FlowRule::new(
        100,
        Match::any().in_port(UPLINK).dst_ip(SVC).proto(TCP).dst_port(80),
        RuleAction::Group(GID),
    ))
    .unwrap();

    let flows: Vec<FlowKey> = (0..100).map(client).collect();
    for k in &flows {
        sw.classify(k, UPLINK, 0.0).unwrap();
    }
    println!("pinned to bucket 2: {}", sw.pinned_count(GID, 2));

    // Drain bucket 2: new flows avoid it, pinned ones stay.
    sw.set_bucket_weight(GID, 2, 0).unwrap();
    let moved = flows
        .iter()
        .filter(|k| sw.cached(k).unwrap().bucket != sw.classify(k, UPLINK, 1.0).unwrap().pinned.unwrap().1)
        .count();
    let fresh = (100..200)
        .filter(|&i| sw.classify(&client(i), UPLINK, 1.0).unwrap().pinned == Some((GID, 2)))
        .count();
    println!("pinned flows moved: {moved}, new flows sent to drained bucket: {fresh}");
    println!("remove while draining: {:?}", sw.remove_bucket(GID, 2).err());

    for k in &flows {
        sw.close_flow(k);
    }
    println!("after flows close: {:?}", sw.remove_bucket(GID, 2).map(|b| b.id));
    print!("{}", sw.dump());
}
