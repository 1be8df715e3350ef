mod common;

use common::{address, run_cli, TestNode};

#[test]
fn trace_after_register_and_confirm() {
    let node = TestNode::start();
    node.onboard();
    let out = node.cli_as("maker", &["register", "--id", "14273912"]).ok();
    assert!(out.stdout.starts_with("committed "), "{}", out.stdout);
    node.cli_as("ministry", &["confirm", "--id", "14273912"]).ok();

    let trace = node.cli(&["trace", "--id", "14273912"]).ok().stdout;
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines.contains(&"phase CONFIRMED"), "{trace}");
    assert!(lines.contains(&"is_valid true"));
    let history = &lines[lines.iter().position(|l| *l == "history").unwrap() + 1..];
    assert_eq!(history, [address("maker"), address("ministry")]);

    // Same chain, same bytes.
    assert_eq!(node.cli(&["trace", "--id", "14273912"]).ok().stdout, trace);
}

#[test]
fn rejections_exit_one_with_code() {
    let node = TestNode::start();
    node.onboard();
    node.cli_as("maker", &["register", "--id", "5"]).ok();

    let out = node.cli_as("clinic", &["handover", "accept", "--id", "5"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("NO_PENDING_HANDOVER"), "{}", out.stderr);

    let out = node.cli_as("truck", &["register", "--id", "6"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("NOT_MANUFACTURER"), "{}", out.stderr);

    let out = node.cli(&["trace", "--id", "404"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("UNKNOWN_VACCINE"));

    // Usage and IO problems exit 2.
    assert_eq!(node.cli(&["register", "--id", "7"]).code, 2);
    assert_eq!(node.cli(&["register"]).code, 2);
    assert_eq!(node.cli_as("nobody", &["register", "--id", "7"]).code, 2);
    assert_eq!(run_cli(&["--node", "http://127.0.0.1:1", "trace", "--id", "1"]).code, 2);
}

#[test]
fn full_custody_chain_through_cli() {
    let node = TestNode::start();
    node.onboard();
    let id = ["--id", "42"];
    node.cli_as("maker", &["register", id[0], id[1]]).ok();
    node.cli_as("ministry", &["confirm", id[0], id[1]]).ok();
    for (from, to) in [("ministry", "truck"), ("truck", "depot"), ("depot", "clinic")] {
        node.cli_as(from, &["handover", "request", id[0], id[1], "--to", &address(to)]).ok();
        node.cli_as(to, &["handover", "accept", id[0], id[1]]).ok();
    }
    node.cli_as("clinic", &["inject", id[0], id[1], "--patient", &address("patient")]).ok();
    let patient_key = node.key_path("patient");
    node.cli(&["confirm-receipt", id[0], id[1], "--patient-key", patient_key.to_str().unwrap()])
        .ok();

    let trace = node.cli(&["trace", id[0], id[1]]).ok().stdout;
    assert!(trace.contains("phase CLOSED"), "{trace}");
    assert!(trace.contains("receipt_confirmed true"));
    assert!(trace.contains(&format!("patient {}", address("patient"))));
    let history = trace.split("history\n").nth(1).unwrap();
    assert_eq!(history.lines().count(), 5);

    // A rejected handover returns custody to the sender.
    node.cli_as("maker", &["register", "--id", "43"]).ok();
    node.cli_as("ministry", &["confirm", "--id", "43"]).ok();
    node.cli_as("ministry", &["handover", "request", "--id", "43", "--to", &address("truck")]).ok();
    node.cli_as("truck", &["handover", "reject", "--id", "43"]).ok();
    let trace = node.cli(&["trace", "--id", "43"]).ok().stdout;
    assert!(trace.contains(&format!("owner {}", address("ministry"))));
    node.cli_as("depot", &["expire", "--id", "43"]).ok();
    assert!(node.cli(&["trace", "--id", "43"]).ok().stdout.contains("phase EXPIRED"));
}

#[test]
fn no_wait_returns_pending_hash() {
    let node = TestNode::start();
    node.onboard();
    let out = node.cli_as("maker", &["--no-wait", "register", "--id", "9"]).ok();
    let hash = out.stdout.trim().strip_prefix("pending ").unwrap().to_string();
    let client = coldledger_cli::Client::new(&node.url);
    client.wait(hash.parse().unwrap()).unwrap();
}

#[test]
fn keygen_writes_usable_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("me.key");
    let out = run_cli(&["keygen", "--out", path.to_str().unwrap()]).ok();
    let key = coldledger_cli::client::read_key(&path).unwrap();
    assert_eq!(out.stdout.trim(), key.address().to_string());
    // Existing files are never overwritten.
    assert_eq!(run_cli(&["keygen", "--out", path.to_str().unwrap()]).code, 2);
}

#[test]
fn sim_rejects_missing_scenario() {
    let out = run_cli(&["sim", "run", "--scenario", "/nonexistent.json", "--nodes", "3", "--seed", "1"]);
    assert_eq!(out.code, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(
        &path,
        r#"{"cast":[{"name":"a","genesis_authority":true}],
            "steps":[{"at_ms":0,"actor":"ghost","call":"REGISTER_VACCINE","args":{"vaccine_id":1}}]}"#,
    )
    .unwrap();
    let out = run_cli(&["sim", "run", "--scenario", path.to_str().unwrap(), "--nodes", "3"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("SCENARIO_REFERENCES_UNKNOWN_PARTY"), "{}", out.stderr);
}
