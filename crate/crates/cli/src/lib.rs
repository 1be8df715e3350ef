//! Client library behind the `coldledger` command: node HTTP client, CSV
//! sensor feeds, trace rendering and the scenario simulator runner.

pub mod client;
pub mod feed;
pub mod sim;

use std::fmt::Write;

use serde_json::Value;

pub use client::{Client, ClientError, Receipt, DEFAULT_NODE};

/// Renders a `GET /vaccines/{id}` snapshot: phase, flags, current and
/// pending owner, then the owner history one address per line.
pub fn render_trace(snapshot: &Value) -> String {
    let record = &snapshot["record"];
    let ownership = &snapshot["ownership"];
    let text = |v: &Value| match v {
        Value::String(s) => s.clone(),
        Value::Null => "none".to_string(),
        other => other.to_string(),
    };
    let next = match ownership["next_owner"].as_str() {
        Some(a) if a.trim_start_matches("0x").bytes().all(|b| b == b'0') => "none".to_string(),
        _ => text(&ownership["next_owner"]),
    };
    let mut out = String::new();
    let _ = writeln!(out, "vaccine {}", text(&snapshot["vaccine_id"]));
    let _ = writeln!(out, "phase {}", text(&record["phase"]));
    for flag in ["is_valid", "is_injected", "receipt_confirmed"] {
        let _ = writeln!(out, "{flag} {}", text(&record[flag]));
    }
    let _ = writeln!(out, "manufacturer {}", text(&record["manufacturer_id"]));
    let _ = writeln!(out, "patient {}", text(&record["injected_patient"]));
    let _ = writeln!(out, "owner {}", text(&ownership["current_owner"]));
    let _ = writeln!(out, "next_owner {next}");
    let _ = writeln!(out, "history");
    for addr in record["owner_history"].as_array().into_iter().flatten() {
        let _ = writeln!(out, "{}", text(addr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn trace_lists_history_last() {
        let zero = format!("0x{}", "00".repeat(20));
        let snapshot = json!({
            "vaccine_id": 14273912,
            "record": {
                "manufacturer_id": "0xaa",
                "is_valid": true,
                "is_injected": false,
                "owner_history": ["0xaa", "0xbb"],
                "injected_patient": null,
                "receipt_confirmed": false,
                "phase": "CONFIRMED"
            },
            "ownership": {"current_owner": "0xbb", "next_owner": zero}
        });
        let text = render_trace(&snapshot);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "vaccine 14273912");
        assert_eq!(lines[1], "phase CONFIRMED");
        assert!(lines.contains(&"next_owner none"));
        assert!(lines.contains(&"patient none"));
        let history = lines.iter().position(|l| *l == "history").unwrap();
        assert_eq!(&lines[history + 1..], ["0xaa", "0xbb"]);
    }
}
