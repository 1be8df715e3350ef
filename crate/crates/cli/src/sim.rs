//! `sim run`: executes a scenario on the in-process network simulator.

use std::fmt::Write;

use thiserror::Error;

use coldledger_core::replication::scenario::{Scenario, ScenarioError};
use coldledger_core::replication::sim::{SimConfig, SimReport, Simulation};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("step {step} pins node {node} but only {nodes} nodes run")]
    UnknownNode { step: usize, node: usize, nodes: usize },
    #[error("invalid simulation settings: {0}")]
    Settings(String),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::Scenario(e) => e.code(),
            SimError::UnknownNode { .. } => "SCENARIO_REFERENCES_UNKNOWN_NODE",
            SimError::Settings(_) => "INVALID_SIM_SETTINGS",
        }
    }
}

/// Compiles `scenario`, runs it to quiescence (or the time limit) and
/// returns the finished simulation with its report.
pub fn run(scenario: &Scenario, cfg: SimConfig) -> Result<(Simulation, SimReport), SimError> {
    if cfg.nodes == 0 || cfg.byzantine >= cfg.nodes {
        return Err(SimError::Settings(format!(
            "need at least one honest node (nodes {}, byzantine {})",
            cfg.nodes, cfg.byzantine
        )));
    }
    if !(0.0..=1.0).contains(&cfg.drop_rate) {
        return Err(SimError::Settings(format!("drop rate {} outside [0, 1]", cfg.drop_rate)));
    }
    let compiled = scenario.compile()?;
    for (step, s) in compiled.submissions.iter().enumerate() {
        if let Some(node) = s.node.filter(|&n| n >= cfg.nodes) {
            return Err(SimError::UnknownNode {
                step,
                node,
                nodes: cfg.nodes,
            });
        }
    }
    let mut sim = Simulation::new(cfg, compiled.authorities);
    for s in compiled.submissions {
        sim.submit(s);
    }
    let report = sim.run();
    Ok((sim, report))
}

/// Stable text rendering: one header line, one line per node, then any
/// refused submissions.
pub fn render(cfg: &SimConfig, report: &SimReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "seed {} nodes {} byzantine {} drop_rate {}",
        cfg.seed, cfg.nodes, cfg.byzantine, cfg.drop_rate
    );
    let _ = writeln!(
        out,
        "settled {} end_ms {} messages {} dropped {}",
        report.settled, report.end_time_ms, report.messages_sent, report.messages_dropped
    );
    for n in &report.nodes {
        let _ = writeln!(
            out,
            "node {} {} height {} tip {}{}",
            n.index,
            n.address,
            n.height,
            n.tip_hash,
            if n.byzantine { " byzantine" } else { "" }
        );
    }
    for (hash, code) in &report.rejected {
        let _ = writeln!(out, "rejected {hash} {code}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENARIO: &str = r#"{
        "cast": [
            {"name": "ministry", "genesis_authority": true},
            {"name": "maker"}
        ],
        "steps": [
            {"at_ms": 0, "actor": "ministry", "call": "SET_OWNER_TYPE",
             "args": {"target": "maker", "role": "MANUFACTURER"}},
            {"at_ms": 50, "actor": "maker", "call": "REGISTER_VACCINE",
             "args": {"vaccine_id": 1}, "node": 2}
        ]
    }"#;

    fn cfg(nodes: usize) -> SimConfig {
        SimConfig {
            nodes,
            seed: 3,
            ..SimConfig::default()
        }
    }

    #[test]
    fn runs_and_renders_every_node() {
        let scenario = Scenario::from_json(SCENARIO).unwrap();
        let (_, report) = run(&scenario, cfg(3)).unwrap();
        assert!(report.settled);
        let text = render(&cfg(3), &report);
        assert_eq!(text.lines().filter(|l| l.starts_with("node ")).count(), 3);
        let tips: Vec<&str> = text
            .lines()
            .filter_map(|l| l.split(" tip ").nth(1))
            .collect();
        assert!(tips.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(render(&cfg(3), &run(&scenario, cfg(3)).unwrap().1), text);
    }

    #[test]
    fn rejects_bad_settings_and_nodes() {
        let scenario = Scenario::from_json(SCENARIO).unwrap();
        let err = run(&scenario, cfg(2)).err().unwrap();
        assert_eq!(err.code(), "SCENARIO_REFERENCES_UNKNOWN_NODE");
        let bad = SimConfig {
            byzantine: 3,
            ..cfg(3)
        };
        assert_eq!(run(&scenario, bad).err().unwrap().code(), "INVALID_SIM_SETTINGS");
        let lossy = SimConfig {
            drop_rate: 1.5,
            ..cfg(3)
        };
        assert!(matches!(run(&scenario, lossy), Err(SimError::Settings(_))));
    }
}
