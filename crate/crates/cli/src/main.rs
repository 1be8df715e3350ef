use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use coldledger_cli::client::{read_key, write_key};
use coldledger_cli::feed::{self, FeedError};
use coldledger_cli::sim::{self, SimError};
use coldledger_cli::{render_trace, Client, ClientError, DEFAULT_NODE};
use coldledger_core::access_control::OwnerType;
use coldledger_core::replication::scenario::Scenario;
use coldledger_core::replication::sim::SimConfig;
use coldledger_core::telemetry::{ColdChainPolicy, PolicyVerdict, PolicyWarning};
use coldledger_core::{Address, Call, Keypair, PublicKey, VaccineId};

/// Client for a coldledger node and the offline scenario simulator.
#[derive(Debug, Parser)]
#[command(name = "coldledger", version)]
struct Cli {
    /// Base URL of the node's HTTP API.
    #[arg(long, global = true, default_value = DEFAULT_NODE)]
    node: String,
    /// Key file that signs the transaction.
    #[arg(long, global = true)]
    key: Option<PathBuf>,
    /// Return once the node accepts the transaction instead of waiting for commit.
    #[arg(long, global = true)]
    no_wait: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a key file and print its address.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a new vaccine (manufacturer).
    Register(Id),
    /// Confirm a registered vaccine (authority).
    Confirm(Id),
    #[command(subcommand)]
    Handover(Handover),
    /// Mark a vaccine expired.
    Expire(Id),
    /// Record an injection (vaccinator).
    Inject {
        #[arg(long)]
        id: u64,
        #[arg(long)]
        patient: Address,
    },
    /// Confirm receipt of an injected vaccine, signed by the patient.
    ConfirmReceipt {
        #[arg(long)]
        id: u64,
        #[arg(long)]
        patient_key: PathBuf,
    },
    /// Print a vaccine's phase, flags and owner history.
    Trace(Id),
    #[command(subcommand)]
    Telemetry(Telemetry),
    #[command(subcommand)]
    Sim(Sim),
    #[command(subcommand)]
    Role(Role),
    #[command(subcommand)]
    Patient(Patient),
}

#[derive(Debug, Args)]
struct Id {
    #[arg(long)]
    id: u64,
}

#[derive(Debug, Subcommand)]
enum Handover {
    /// Offer custody to another party.
    Request {
        #[arg(long)]
        id: u64,
        #[arg(long)]
        to: Address,
    },
    /// Take custody of a vaccine handed to you.
    Accept(Id),
    /// Refuse a vaccine handed to you.
    Reject(Id),
}

#[derive(Debug, Subcommand)]
enum Telemetry {
    /// Sign and post every row of a sensor CSV with --key.
    Replay {
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum Sim {
    /// Run a scenario on simulated validators and print each node's tip.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 5)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        byzantine: usize,
        #[arg(long, default_value_t = 0.0)]
        drop_rate: f64,
    },
}

#[derive(Debug, Args)]
struct PartyKey {
    /// Public key (hex) of the party.
    #[arg(long, conflicts_with = "party_key", required_unless_present = "party_key")]
    public_key: Option<PublicKey>,
    /// Key file of the party; only its public half is used.
    #[arg(long)]
    party_key: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Role {
    /// Assign a role to a party (authority).
    Assign {
        #[arg(long)]
        role: OwnerType,
        #[command(flatten)]
        party: PartyKey,
    },
}

#[derive(Debug, Subcommand)]
enum Patient {
    /// Register a patient key (distributer or vaccinator).
    Register {
        #[command(flatten)]
        party: PartyKey,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Feed(#[from] FeedError),
    #[error("{}: {}", .0.code(), .0)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Usage(String),
    #[error("{0} telemetry line(s) rejected")]
    LinesRejected(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Client(e) if e.is_rejection() => 1,
            CliError::LinesRejected(_) => 1,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn signer(path: Option<&Path>) -> Result<Keypair, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("--key FILE is required".into()))?;
    Ok(read_key(path)?)
}

fn party_public_key(party: PartyKey) -> Result<PublicKey, CliError> {
    match (party.public_key, party.party_key) {
        (Some(pk), _) => Ok(pk),
        (None, Some(path)) => Ok(read_key(&path)?.public()),
        (None, None) => Err(CliError::Usage("--public-key or --party-key is required".into())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let client = Client::new(&cli.node);
    let key = cli.key.as_deref();
    let call = match cli.command {
        Command::Keygen { out } => return keygen(&out),
        Command::Trace(Id { id }) => {
            print!("{}", render_trace(&client.vaccine(VaccineId(id))?));
            return Ok(());
        }
        Command::Telemetry(Telemetry::Replay { csv }) => return replay(&client, &signer(key)?, &csv, !cli.no_wait),
        Command::Sim(Sim::Run {
            scenario,
            nodes,
            seed,
            byzantine,
            drop_rate,
        }) => {
            let cfg = SimConfig {
                nodes,
                seed,
                byzantine,
                drop_rate,
                ..SimConfig::default()
            };
            return simulate(&scenario, cfg);
        }
        Command::ConfirmReceipt { id, patient_key } => {
            let patient = read_key(&patient_key)?;
            return transact(&client, &patient, Call::PatientReceive { vaccine_id: VaccineId(id) }, !cli.no_wait);
        }
        Command::Register(Id { id }) => Call::RegisterVaccine { vaccine_id: VaccineId(id) },
        Command::Confirm(Id { id }) => Call::ConfirmAuthority { vaccine_id: VaccineId(id) },
        Command::Handover(Handover::Request { id, to }) => Call::HandoverRequest {
            vaccine_id: VaccineId(id),
            recipient: to,
        },
        Command::Handover(Handover::Accept(Id { id })) => Call::HandoverAccept { vaccine_id: VaccineId(id) },
        Command::Handover(Handover::Reject(Id { id })) => Call::HandoverReject { vaccine_id: VaccineId(id) },
        Command::Expire(Id { id }) => Call::Expire { vaccine_id: VaccineId(id) },
        Command::Inject { id, patient } => Call::Inject {
            vaccine_id: VaccineId(id),
            patient,
        },
        Command::Role(Role::Assign { role, party }) => {
            let public_key = party_public_key(party)?;
            Call::SetOwnerType {
                target: public_key.address(),
                role,
                public_key,
            }
        }
        Command::Patient(Patient::Register { party }) => {
            let public_key = party_public_key(party)?;
            Call::PatientRegister {
                patient: public_key.address(),
                public_key,
            }
        }
    };
    transact(&client, &signer(key)?, call, !cli.no_wait)
}

fn transact(client: &Client, key: &Keypair, call: Call, wait: bool) -> Result<(), CliError> {
    let hash = client.send(key, call)?;
    if !wait {
        println!("pending {hash}");
        return Ok(());
    }
    let receipt = client.wait(hash)?;
    println!("committed {hash} height {} index {}", receipt.height, receipt.index);
    Ok(())
}

fn keygen(out: &Path) -> Result<(), CliError> {
    if out.exists() {
        return Err(CliError::Usage(format!("{} already exists", out.display())));
    }
    let key = Keypair::generate(&mut rand::rngs::OsRng);
    write_key(out, &key)?;
    println!("{}", key.address());
    Ok(())
}

const TELEMETRY_CHUNK: usize = 500;

fn replay(client: &Client, key: &Keypair, csv: &Path, wait: bool) -> Result<(), CliError> {
    let file = std::fs::File::open(csv).map_err(|e| ClientError::Io {
        path: csv.display().to_string(),
        reason: e.to_string(),
    })?;
    let rows = feed::parse_csv(file)?;
    let readings = feed::sign_rows(key, &rows)?;

    let mut accepted = Vec::new();
    let mut hashes = Vec::new();
    let mut rejected = 0;
    for (chunk_no, chunk) in readings.chunks(TELEMETRY_CHUNK).enumerate() {
        let body: String = chunk
            .iter()
            .map(|r| serde_json::to_string(r).expect("reading serializes") + "\n")
            .collect();
        let receipt = client.post_telemetry(body)?;
        for result in receipt["results"].as_array().into_iter().flatten() {
            let line = chunk_no * TELEMETRY_CHUNK + result["line"].as_u64().unwrap_or_default() as usize;
            match result["hash"].as_str() {
                Some(hash) => {
                    println!("row {line} accepted {hash}");
                    accepted.push(&rows[line - 1]);
                    hashes.push(hash.parse().map_err(|_| ClientError::Protocol(format!("bad hash {hash}")))?);
                }
                None => {
                    rejected += 1;
                    println!(
                        "row {line} rejected {} {}",
                        result["code"].as_str().unwrap_or("UNKNOWN"),
                        result["message"].as_str().unwrap_or_default()
                    );
                }
            }
        }
    }
    if wait {
        for hash in hashes {
            client.wait(hash)?;
        }
    }

    let info = client.get("/node")?;
    let policy: ColdChainPolicy = serde_json::from_value(info["policy"].clone())
        .map_err(|e| ClientError::Protocol(format!("node policy: {e}")))?;
    for (batch, verdict) in feed::batch_verdicts(accepted, &policy) {
        println!("batch {} {}", feed::format_batch(&batch), render_verdict(&verdict));
    }
    if rejected > 0 {
        return Err(CliError::LinesRejected(rejected));
    }
    Ok(())
}

fn render_verdict(verdict: &PolicyVerdict) -> String {
    match verdict {
        PolicyVerdict::Ok => "OK".into(),
        PolicyVerdict::Excursion {
            first_bad_ms,
            duration_ms,
        } => format!("EXCURSION first_bad_ms={first_bad_ms} duration_ms={duration_ms}"),
        PolicyVerdict::Warning { warnings } => {
            let parts: Vec<String> = warnings
                .iter()
                .map(|w| match w {
                    PolicyWarning::ShortExcursion {
                        first_bad_ms,
                        duration_ms,
                    } => format!("SHORT_EXCURSION first_bad_ms={first_bad_ms} duration_ms={duration_ms}"),
                    PolicyWarning::MonitoringGap { from_ms, to_ms } => {
                        format!("MONITORING_GAP from_ms={from_ms} to_ms={to_ms}")
                    }
                })
                .collect();
            format!("WARNING {}", parts.join(" "))
        }
    }
}

fn simulate(path: &Path, cfg: SimConfig) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| ClientError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let scenario = Scenario::from_json(&text).map_err(SimError::from)?;
    let (_, report) = sim::run(&scenario, cfg)?;
    print!("{}", sim::render(&cfg, &report));
    Ok(())
}
