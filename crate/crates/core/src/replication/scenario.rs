//! JSON scenarios for the simulator: a named cast plus timed calls.
//!
//! Party names are resolved to deterministic keys, and every transaction is
//! signed with the actor's next nonce. See `docs/scenario.md` for the
//! format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::sim::Submission;
use crate::crypto::{Keypair, PublicKey};
use crate::ledger::{sign_transaction, Call, Transaction};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastMember {
    pub name: String,
    #[serde(default)]
    pub genesis_authority: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at_ms: u64,
    pub actor: String,
    pub call: String,
    #[serde(default)]
    pub args: Map<String, Value>,
    /// Validator index that receives the submission.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cast: Vec<CastMember>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("scenario is not valid JSON: {0}")]
    Parse(String),
    #[error("scenario references unknown party {0:?}")]
    UnknownParty(String),
    #[error("party {0:?} is declared twice")]
    DuplicateName(String),
    #[error("no cast member is a genesis authority")]
    NoAuthority,
    #[error("step {step}: {reason}")]
    BadCall { step: usize, reason: String },
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Parse(_) => "SCENARIO_PARSE_ERROR",
            ScenarioError::UnknownParty(_) => "SCENARIO_REFERENCES_UNKNOWN_PARTY",
            ScenarioError::DuplicateName(_) => "SCENARIO_DUPLICATE_PARTY",
            ScenarioError::NoAuthority => "SCENARIO_NO_AUTHORITY",
            ScenarioError::BadCall { .. } => "SCENARIO_BAD_CALL",
        }
    }
}

/// Genesis authorities and signed submissions produced from a scenario.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub authorities: Vec<PublicKey>,
    pub submissions: Vec<Submission>,
    pub parties: BTreeMap<String, Keypair>,
}

const ADDRESS_FIELDS: [&str; 3] = ["target", "recipient", "patient"];

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn compile(&self) -> Result<Compiled, ScenarioError> {
        let mut parties = BTreeMap::new();
        let mut authorities = Vec::new();
        for member in &self.cast {
            let key = Keypair::from_label(&member.name);
            if member.genesis_authority {
                authorities.push(key.public());
            }
            if parties.insert(member.name.clone(), key).is_some() {
                return Err(ScenarioError::DuplicateName(member.name.clone()));
            }
        }
        if authorities.is_empty() {
            return Err(ScenarioError::NoAuthority);
        }

        let mut nonces: BTreeMap<&str, u64> = BTreeMap::new();
        let mut submissions = Vec::with_capacity(self.steps.len());
        for (i, step) in self.steps.iter().enumerate() {
            let actor = parties
                .get(&step.actor)
                .ok_or_else(|| ScenarioError::UnknownParty(step.actor.clone()))?;
            let payload = resolve_args(&parties, &step.call, &step.args)?;
            let call: Call = serde_json::from_value(serde_json::json!({
                "kind": step.call,
                "payload": payload,
            }))
            .map_err(|e| ScenarioError::BadCall {
                step: i,
                reason: e.to_string(),
            })?;
            let nonce = nonces.entry(step.actor.as_str()).or_insert(0);
            *nonce += 1;
            let tx = sign_transaction(actor, Transaction::new(call, actor.address(), *nonce))
                .expect("actor signs as itself");
            submissions.push(Submission {
                at_ms: step.at_ms,
                node: step.node,
                tx,
            });
        }
        Ok(Compiled {
            authorities,
            submissions,
            parties,
        })
    }
}

/// Replaces cast names in address fields with addresses, and fills in or
/// resolves `public_key`.
fn resolve_args(
    parties: &BTreeMap<String, Keypair>,
    call: &str,
    args: &Map<String, Value>,
) -> Result<Value, ScenarioError> {
    let lookup = |name: &str| {
        parties
            .get(name)
            .ok_or_else(|| ScenarioError::UnknownParty(name.to_string()))
    };
    let mut out = args.clone();
    for field in ADDRESS_FIELDS {
        if let Some(Value::String(name)) = args.get(field) {
            if !name.starts_with("0x") {
                out.insert(field.into(), Value::String(lookup(name)?.address().to_string()));
            }
        }
    }
    match args.get("public_key") {
        Some(Value::String(name)) if parties.contains_key(name) => {
            out.insert("public_key".into(), Value::String(lookup(name)?.public().to_hex()));
        }
        None if matches!(call, "SET_OWNER_TYPE" | "PATIENT_REGISTER") => {
            let owner = if call == "SET_OWNER_TYPE" { "target" } else { "patient" };
            if let Some(Value::String(name)) = args.get(owner) {
                if !name.starts_with("0x") {
                    out.insert("public_key".into(), Value::String(lookup(name)?.public().to_hex()));
                }
            }
        }
        _ => {}
    }
    Ok(Value::Object(out))
}
