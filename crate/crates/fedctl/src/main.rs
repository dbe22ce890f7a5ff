use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ehrfed_core::audit::AuditQuery;
use ehrfed_core::auth::Role;
use ehrfed_core::model::parse_timestamp;
use ehrfed_core::{EhrType, Timestamp};
use ehrfed_server::config::DurabilityMode;
use ehrfed_server::launch::{Component, Federation, LaunchOptions};
use ehrfed_server::{http_client, Topology};
use fedctl::harness::{run_batch, Fixture};
use fedctl::report::{audit_report, render_table};
use fedctl::scenario::{check_against_manifest, Endpoints, ScenarioTranscript};
use fedctl::seed::{seed, SeedSpec, FIXTURE_PATIENT_NAME};
use serde::{Deserialize, Serialize};

const EXIT_ASSERTION: u8 = 1;
const EXIT_INFRA: u8 = 2;
const PIDS_FILE: &str = "run/pids.json";

#[derive(Debug, Parser)]
#[command(name = "fedctl", version, about = "Seed, run and exercise a local EHR federation")]
struct Cli {
    /// Topology file written by `fedctl seed`.
    #[arg(long, global = true, default_value = "fixture/topology.json")]
    topology: PathBuf,
    /// Output directory (fixture for `seed`, reports otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed for fixtures and scripted scenarios.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a deterministic fixture and its topology file.
    Seed(SeedArgs),
    /// Start the index and every hospital as background processes.
    Up,
    /// Stop the processes started by `up`.
    Down,
    /// Run one server of the topology in the foreground.
    Serve {
        /// `index` or a hospital id.
        #[arg(long)]
        component: String,
        /// Disable the periodic sync agent.
        #[arg(long)]
        no_periodic_sync: bool,
    },
    /// Run one sync pass at every hospital (or one).
    SyncNow {
        #[arg(long)]
        hospital: Option<String>,
    },
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Federated audit report for one record.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
struct SeedArgs {
    #[arg(long, default_value_t = 100)]
    patients: usize,
    #[arg(long, default_value_t = 10_000)]
    records: usize,
    #[arg(long, value_delimiter = ',', default_value = "HC,KW,UH")]
    hospitals: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    other_type_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    unshared_ratio: f64,
    /// First port; 0 for ephemeral ports.
    #[arg(long, default_value_t = 7400)]
    base_port: u16,
    /// Write with flush only instead of fsync.
    #[arg(long)]
    no_fsync: bool,
}

#[derive(Debug, Subcommand)]
enum ScenarioCommand {
    /// Login, consent, locate, fan-out transfer and display.
    SeeDoctor(SeeDoctorArgs),
}

#[derive(Debug, Args)]
struct SeeDoctorArgs {
    /// Patient name from the fixture manifest.
    #[arg(long, default_value = FIXTURE_PATIENT_NAME)]
    patient: String,
    #[arg(long, default_value = "HC")]
    at: String,
    #[arg(long)]
    doctor: Option<String>,
    #[arg(long, default_value = "2000-01-01")]
    from: String,
    #[arg(long, default_value = "2030-12-31")]
    to: String,
    #[arg(long = "type", default_value = "hemodialysis")]
    types: Vec<String>,
    /// Run this many scripted scenarios with random patients instead.
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    ehr_id: String,
    #[arg(long, default_value = "2000-01-01")]
    from: String,
    #[arg(long, default_value = "2100-01-01")]
    to: String,
    /// Hospital whose administrator runs the report.
    #[arg(long, default_value = "HC")]
    admin_hospital: String,
    #[arg(long)]
    admin_id: Option<String>,
    #[arg(long)]
    admin_secret: Option<String>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Assertion(anyhow::Error),
    Infra(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Infra(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,ehrfed_server=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(EXIT_INFRA);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(e)) => {
            eprintln!("assertion failed: {e:#}");
            ExitCode::from(EXIT_ASSERTION)
        }
        Err(Failure::Infra(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INFRA)
        }
    }
}

async fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Seed(args) => cmd_seed(&cli, args),
        Command::Up => cmd_up(&cli.topology).await,
        Command::Down => cmd_down(&cli.topology),
        Command::Serve {
            component,
            no_periodic_sync,
        } => cmd_serve(&cli.topology, component, !no_periodic_sync).await,
        Command::SyncNow { hospital } => cmd_sync(&cli.topology, hospital.as_deref()).await,
        Command::Scenario(ScenarioCommand::SeeDoctor(args)) => cmd_see_doctor(&cli, args).await,
        Command::Audit(args) => cmd_audit(&cli, args).await,
    }
}

fn cmd_seed(cli: &Cli, args: &SeedArgs) -> Outcome {
    let out = cli
        .out
        .clone()
        .or_else(|| cli.topology.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("fixture"));
    let spec = SeedSpec {
        patients: args.patients,
        records: args.records,
        hospitals: args.hospitals.clone(),
        rng_seed: cli.seed,
        other_type_ratio: args.other_type_ratio,
        unshared_ratio: args.unshared_ratio,
        base_port: args.base_port,
        durability: if args.no_fsync {
            DurabilityMode::Flush
        } else {
            DurabilityMode::Fsync
        },
    };
    let seeded = seed(&spec, &out)?;
    println!(
        "seeded {} records of {} patients across {} into {}",
        seeded.manifest.records.len(),
        seeded.manifest.patients.len(),
        spec.hospitals.join(","),
        out.display()
    );
    println!("topology: {}", seeded.topology.display());
    Ok(())
}

fn fixture_dir(topology: &Path) -> PathBuf {
    topology.parent().unwrap_or(Path::new(".")).to_path_buf()
}

#[derive(Debug, Serialize, Deserialize)]
struct Pids {
    processes: Vec<(String, u32)>,
}

async fn cmd_up(topology_path: &Path) -> Outcome {
    let topology = Topology::load(topology_path)?;
    let dir = fixture_dir(topology_path);
    let pids_path = dir.join(PIDS_FILE);
    if pids_path.exists() {
        return Err(anyhow!("{} exists; run `fedctl down` first", pids_path.display()).into());
    }
    std::fs::create_dir_all(dir.join("run"))?;
    let exe = std::env::current_exe().context("locating the fedctl binary")?;
    let mut components = vec!["index".to_string()];
    components.extend(topology.hospital_ids());

    let mut started = Vec::new();
    for c in &components {
        let log = std::fs::File::create(dir.join(format!("run/{c}.log")))?;
        let child = std::process::Command::new(&exe)
            .arg("serve")
            .arg("--topology")
            .arg(topology_path)
            .arg("--component")
            .arg(c)
            .stdout(log.try_clone()?)
            .stderr(log)
            .spawn()
            .with_context(|| format!("starting {c}"))?;
        started.push((c.clone(), child.id()));
    }
    std::fs::write(&pids_path, serde_json::to_vec_pretty(&Pids { processes: started.clone() })?)?;

    let http = http_client(Duration::from_secs(2));
    let mut urls = vec![("index".to_string(), topology.index_url())];
    urls.extend(topology.hospital_urls());
    for (name, url) in urls {
        let mut ready = false;
        for _ in 0..100 {
            if ehrfed_server::client::health(&http, &url).await.is_ok() {
                ready = true;
                break;
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
        if !ready {
            let _ = cmd_down(topology_path);
            return Err(anyhow!("{name} did not come up at {url}; see {}", dir.join("run").display()).into());
        }
        println!("{name:<6} up at {url}");
    }
    Ok(())
}

fn cmd_down(topology_path: &Path) -> Outcome {
    let pids_path = fixture_dir(topology_path).join(PIDS_FILE);
    let text = std::fs::read_to_string(&pids_path).with_context(|| format!("no running topology ({})", pids_path.display()))?;
    let pids: Pids = serde_json::from_str(&text)?;
    for (name, pid) in pids.processes.iter().rev() {
        let status = std::process::Command::new("kill").arg("-TERM").arg(pid.to_string()).status();
        match status {
            Ok(s) if s.success() => println!("{name:<6} stopped (pid {pid})"),
            _ => println!("{name:<6} was not running (pid {pid})"),
        }
    }
    std::fs::remove_file(&pids_path)?;
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

async fn cmd_serve(topology_path: &Path, component: &str, periodic_sync: bool) -> Outcome {
    let topology = Topology::load(topology_path)?;
    let component = if component == "index" {
        Component::Index
    } else {
        Component::Node(component.to_string())
    };
    let options = LaunchOptions {
        periodic_sync,
        ..LaunchOptions::default()
    };
    let fed = Federation::start_components(&topology, options, &[component]).await?;
    fed.run_until(shutdown_signal()).await;
    Ok(())
}

fn endpoints(topology: &Topology) -> Endpoints {
    Endpoints::from_topology(topology, http_client(Duration::from_secs(30)))
}

async fn cmd_sync(topology_path: &Path, only: Option<&str>) -> Outcome {
    let fixture = Fixture::load(topology_path)?;
    let ep = endpoints(&fixture.topology);
    let mut failed = false;
    for (h, result) in fixture.sync_all(&ep).await {
        if only.is_some_and(|o| o != h) {
            continue;
        }
        match result {
            Ok(r) => println!(
                "{h:<4} extracted={} converted={} pushed={} errors={} high_water_mark={}",
                r.extracted,
                r.converted,
                r.pushed,
                r.errors.len(),
                ehrfed_core::model::format_timestamp(&r.high_water_mark)
            ),
            Err(e) => {
                failed = true;
                println!("{h:<4} failed: {e}");
            }
        }
    }
    if failed {
        return Err(anyhow!("sync failed at one or more hospitals").into());
    }
    Ok(())
}

fn parse_when(s: &str, end_of_day: bool) -> anyhow::Result<Timestamp> {
    if let Ok(t) = parse_timestamp(s) {
        return Ok(t);
    }
    let time = if end_of_day { "23:59:59" } else { "00:00:00" };
    parse_timestamp(&format!("{s}T{time}+08:00")).map_err(|_| anyhow!("cannot read {s:?} as a date"))
}

fn print_transcript(t: &ScenarioTranscript) {
    println!("see-doctor at {} by {}", t.at_hospital, t.doctor_id);
    println!("{:>4}  {:<12} {:<42} {:<8} {:>8}  detail", "step", "actor", "action", "outcome", "ms");
    for s in &t.steps {
        let outcome = serde_json::to_value(&s.outcome).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let mut detail = s.detail.clone();
        if !s.audit_events.is_empty() {
            let ids: Vec<String> = s.audit_events.iter().map(u64::to_string).collect();
            detail = format!("{detail} audit={}", ids.join(",")).trim().to_string();
        }
        println!("{:>4}  {:<12} {:<42} {:<8} {:>8}  {detail}", s.step, s.actor, s.action, outcome, s.latency_ms);
    }
    for r in &t.records {
        println!(
            "      {} {:<4} {:<6} {}",
            ehrfed_core::model::format_timestamp(&r.recorded_at),
            r.hospital_id,
            r.ehr_id,
            r.ehr_type
        );
    }
}

fn report_dir(cli: &Cli, fixture: &Fixture) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| fixture.dir.join("reports"))
}

async fn cmd_see_doctor(cli: &Cli, args: &SeeDoctorArgs) -> Outcome {
    let fixture = Fixture::load(&cli.topology)?;
    let ep = endpoints(&fixture.topology);
    let types: Vec<EhrType> = args
        .types
        .iter()
        .map(|t| t.parse::<EhrType>().map_err(|e| anyhow!("{e}")))
        .collect::<Result<_, _>>()?;
    let requests = match args.repeat {
        Some(n) => fixture.random_scenarios(n, cli.seed),
        None => {
            let patient = fixture
                .manifest
                .patient_by_name(&args.patient)
                .ok_or_else(|| anyhow!("no patient named {:?} in the manifest", args.patient))?;
            let mut req = fixture
                .scenario(patient.index, &args.at, parse_when(&args.from, false)?, parse_when(&args.to, true)?)
                .ok_or_else(|| anyhow!("no doctor account at {}", args.at))?;
            req.ehr_types = types;
            if let Some(d) = &args.doctor {
                let login = fixture
                    .doctors
                    .get(&args.at)
                    .and_then(|b| b.iter().find(|l| l.doctor_id == *d && l.role == Role::Doctor))
                    .ok_or_else(|| anyhow!("no doctor {d} at {}", args.at))?;
                req.doctor_id = login.doctor_id.clone();
                req.secret = login.secret.clone();
            }
            vec![req]
        }
    };

    let transcripts = run_batch(&ep, &requests, args.parallel).await;
    let mut problems = Vec::new();
    for (i, (t, req)) in transcripts.iter().zip(&requests).enumerate() {
        if requests.len() == 1 {
            print_transcript(t);
        }
        for p in check_against_manifest(t, &fixture.manifest, req) {
            problems.push(format!("scenario {i}: {p}"));
        }
    }
    let dir = report_dir(cli, &fixture);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("see-doctor.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&transcripts)?)?;
    println!("{} scenario(s), transcript written to {}", transcripts.len(), path.display());

    if transcripts.iter().any(|t| !t.completed) {
        let first = transcripts.iter().find(|t| !t.completed).and_then(|t| t.steps.last());
        let why = first.map(|s| format!("step {} {}: {}", s.step, s.action, s.detail)).unwrap_or_default();
        return Err(Failure::Infra(anyhow!("scenario did not complete ({why})")));
    }
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("{p}");
        }
        return Err(Failure::Assertion(anyhow!("{} mismatch(es) against the manifest", problems.len())));
    }
    Ok(())
}

async fn cmd_audit(cli: &Cli, args: &AuditArgs) -> Outcome {
    let fixture = Fixture::load(&cli.topology)?;
    let ep = endpoints(&fixture.topology);
    let (id, secret) = match (&args.admin_id, &args.admin_secret) {
        (Some(i), Some(s)) => (i.clone(), s.clone()),
        (None, None) => {
            let a = fixture
                .account(&args.admin_hospital, Role::Admin)
                .ok_or_else(|| anyhow!("no admin account at {}", args.admin_hospital))?;
            (a.doctor_id.clone(), a.secret.clone())
        }
        _ => return Err(anyhow!("--admin-id and --admin-secret go together").into()),
    };
    let node = ep
        .node(&args.admin_hospital)
        .ok_or_else(|| anyhow!("{} is not in the topology", args.admin_hospital))?;
    let token = node
        .login(&id, &secret, &args.admin_hospital)
        .await
        .map_err(|e| anyhow!("admin login failed: {e}"))?;
    let query = AuditQuery {
        ehr_id: args.ehr_id.clone(),
        from: parse_when(&args.from, false)?,
        to: parse_when(&args.to, true)?,
    };
    let audit = audit_report(&ep, &query, &token).await;
    print!("{}", render_table(&query, &audit));
    let dir = report_dir(cli, &fixture);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("audit-{}.json", args.ehr_id));
    std::fs::write(&path, serde_json::to_vec_pretty(&audit)?)?;
    println!("written to {}", path.display());
    if !audit.failures.is_empty() {
        return Err(anyhow!("{} server(s) did not answer", audit.failures.len()).into());
    }
    Ok(())
}
