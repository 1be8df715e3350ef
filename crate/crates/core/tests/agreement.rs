use coldledger_core::access_control::OwnerType;
use coldledger_core::ledger::{sign_transaction, Call, Transaction};
use coldledger_core::replication::sim::{find_fork, SimConfig, Simulation, Submission};
use coldledger_core::replication::{verify_certificate, Replica};
use coldledger_core::Keypair;

fn workload(auth: &Keypair, n: u64, spacing: u64) -> Vec<Submission> {
    (1..=n)
        .map(|i| {
            let who = Keypair::from_label(&format!("party-{i}"));
            let tx = Transaction::new(
                Call::SetOwnerType {
                    target: who.address(),
                    role: OwnerType::Transporter,
                    public_key: who.public(),
                },
                auth.address(),
                i,
            );
            Submission {
                at_ms: i * spacing,
                node: None,
                tx: sign_transaction(auth, tx).unwrap(),
            }
        })
        .collect()
}

fn check(cfg: SimConfig, n: u64) {
    let auth = Keypair::from_label("authority");
    let mut sim = Simulation::new(cfg, vec![auth.public()]);
    for s in workload(&auth, n, 7) {
        sim.submit(s);
    }
    let report = sim.run();
    let honest: Vec<&Replica> = sim.honest().collect();
    assert_eq!(find_fork(&honest), None, "fork with {cfg:?}");
    assert!(report.settled, "did not settle: {cfg:?} {report:?}");
    for r in &honest {
        assert_eq!(r.state().last_nonce(&auth.address()), Some(n), "{cfg:?}");
        for b in &r.chain().blocks()[1..] {
            let cert = &r.certificates()[&b.height];
            assert!(verify_certificate(sim.chain_config(), b, cert));
            for tx in &b.transactions {
                assert!(!sim.forged().contains(&tx.hash()));
            }
        }
    }
}

#[test]
fn many_seeds_agree() {
    for seed in 0..80u64 {
        let nodes = [1, 3, 4, 5][(seed % 4) as usize];
        let byzantine = if nodes >= 4 { (seed / 4 % 2) as usize } else { 0 };
        let drop_rate = [0.0, 0.1, 0.3][(seed % 3) as usize];
        check(
            SimConfig {
                nodes,
                byzantine,
                seed,
                drop_rate,
                ..SimConfig::default()
            },
            12,
        );
    }
}
