//! `mls`: run the platform, script UE flows, provision subscribers, check
//! fixtures and print the release report.
//!
//! Exit codes: 0 ok, 1 SIP flow failed (rejected or timed out), 2 bad
//! configuration or arguments, 3 fixture error, 4 domain error (duplicate
//! identity, trend check failed, unknown subscriber).

mod server;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use mls_core::aka::SecretKey;
use mls_core::config::Config;
use mls_core::hss::{HssError, HssStore, Role, Subscriber};
use mls_core::jsonl;
use mls_core::learning::{FixedLocations, LearningStore, LOCATIONS_FILE};
use mls_core::metrics::{load_releases, render_report, trend_check, ReleaseRecord, RELEASES_FILE};
use mls_core::script::{parse_script, run_script};
use mls_core::sip::SipUri;
use mls_core::ue::UeAgent;
use mls_core::world::World;

const SUBSCRIBERS_FILE: &str = "subscribers.jsonl";
const SIM_UE_HOST: &str = "ue1.kau.example";

#[derive(Parser, Debug)]
#[command(name = "mls", version, about = "Mobile learning platform over a simulated IMS core")]
struct Cli {
    /// Flat TOML config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    port: Option<u32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-packet loss probability on UE links.
    #[arg(long, global = true)]
    loss: Option<f64>,
    /// One-way UE link delay in ms.
    #[arg(long, global = true)]
    delay: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Serve the HTTP API until interrupted.
    Serve,
    /// Run a UE script against the simulated core and print the trace.
    SimulateUe {
        script: PathBuf,
        #[arg(long)]
        impi: String,
        /// Key held by the UE; defaults to the subscriber's provisioned key.
        #[arg(long)]
        k: Option<String>,
    },
    /// Add a subscriber to subscribers.jsonl.
    Provision {
        #[arg(long)]
        impi: String,
        #[arg(long)]
        k: String,
        #[arg(long)]
        student_id: String,
        #[arg(long = "role", value_enum, required = true)]
        roles: Vec<RoleArg>,
        /// Public identities; defaults to `sip:<impi>`.
        #[arg(long = "impu")]
        impus: Vec<String>,
    },
    /// Validate every fixture file; with --out, write them back canonically.
    LoadFixtures {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the release table and the trend verdict.
    ReportMetrics,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum RoleArg {
    Student,
    Faculty,
    Admin,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Student => Role::Student,
            RoleArg::Faculty => Role::Faculty,
            RoleArg::Admin => Role::Admin,
        }
    }
}

pub(crate) struct Failure {
    code: u8,
    error: anyhow::Error,
}

pub(crate) const FLOW: u8 = 1;
pub(crate) const CONFIG: u8 = 2;
pub(crate) const FIXTURE: u8 = 3;
pub(crate) const DOMAIN: u8 = 4;

pub(crate) trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn fail<T>(code: u8, error: anyhow::Error) -> Result<T, Failure> {
    Err(Failure { code, error })
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .or_exit(CONFIG)?;
            let mut cfg: Config = toml::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .or_exit(CONFIG)?;
            if cfg.data_dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.data_dir = base.join(&cfg.data_dir);
            }
            cfg
        }
        None => Config::default(),
    };
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(p) = cli.port {
        cfg.http_port = p;
    }
    if let Some(s) = cli.seed {
        cfg.sim_seed = s;
    }
    if let Some(l) = cli.loss {
        cfg.link_loss = l;
    }
    if let Some(d) = cli.delay {
        cfg.link_delay_ms = d;
    }
    cfg.validate().or_exit(CONFIG)?;
    Ok(cfg)
}

pub(crate) struct Fixtures {
    pub hss: HssStore,
    pub learning: LearningStore,
    pub releases: Vec<ReleaseRecord>,
    pub locations: FixedLocations,
}

fn load_hss(dir: &Path) -> Result<HssStore, Failure> {
    let path = dir.join(SUBSCRIBERS_FILE);
    HssStore::load(&path)
        .with_context(|| path.display().to_string())
        .or_exit(FIXTURE)
}

pub(crate) fn load_fixtures(cfg: &Config) -> Result<Fixtures, Failure> {
    let dir = &cfg.data_dir;
    let hss = load_hss(dir)?;
    let mut learning = LearningStore::new(cfg.term()).or_exit(CONFIG)?;
    learning
        .load_fixtures(dir)
        .with_context(|| dir.display().to_string())
        .or_exit(FIXTURE)?;
    let releases = load_releases(dir)
        .with_context(|| dir.display().to_string())
        .or_exit(FIXTURE)?;
    let locations = FixedLocations::load(dir)
        .with_context(|| dir.display().to_string())
        .or_exit(FIXTURE)?;
    Ok(Fixtures {
        hss,
        learning,
        releases,
        locations,
    })
}

fn simulate_ue(cfg: &Config, script: &Path, impi: &str, k: Option<&str>) -> Result<(), Failure> {
    let text = fs::read_to_string(script)
        .with_context(|| format!("reading {}", script.display()))
        .or_exit(CONFIG)?;
    let commands = parse_script(&text)
        .with_context(|| script.display().to_string())
        .or_exit(CONFIG)?;
    let hss = load_hss(&cfg.data_dir)?;
    let (impu, key) = match hss.lookup_by_impi(impi) {
        Some(sub) => (sub.impus[0].clone(), sub.k.clone()),
        None => {
            let impu: SipUri = format!("sip:{impi}").parse().or_exit(CONFIG)?;
            match k {
                Some(_) => (impu, SecretKey::new([0; 16])),
                None => return fail(DOMAIN, anyhow!("unknown subscriber {impi}; pass --k to try anyway")),
            }
        }
    };
    let key = match k {
        Some(hex) => SecretKey::from_hex(hex).map_err(|e| anyhow!("--k: {e}")).or_exit(CONFIG)?,
        None => key,
    };
    let mut world = World::new(hss, cfg.net_params()).or_exit(CONFIG)?;
    world.add_ue(SIM_UE_HOST).or_exit(CONFIG)?;
    let mut ue = UeAgent::new(SIM_UE_HOST, impi, impu, key);
    let report = run_script(&mut world, &mut ue, &commands);
    print!("{}", world.net.dump(world.net.trace()));
    for line in &report.trail {
        eprintln!("{line}");
    }
    match report.failure {
        None => Ok(()),
        Some((line, e)) => fail(FLOW, anyhow!("{}:{line}: {e}", script.display())),
    }
}

fn provision(cfg: &Config, sub: Subscriber) -> Result<(), Failure> {
    let path = cfg.data_dir.join(SUBSCRIBERS_FILE);
    let mut hss = if path.exists() { load_hss(&cfg.data_dir)? } else { HssStore::new() };
    let impi = sub.impi.clone();
    match hss.provision(sub) {
        Ok(()) => {}
        Err(e @ HssError::DuplicateIdentity(_)) => return fail(DOMAIN, e.into()),
        Err(e) => return fail(CONFIG, e.into()),
    }
    hss.save(&path)
        .with_context(|| path.display().to_string())
        .or_exit(FIXTURE)?;
    println!("provisioned {impi}");
    Ok(())
}

fn write_fixtures(f: &Fixtures, out: &Path) -> Result<(), Failure> {
    let mut files: Vec<(&str, String)> = vec![(SUBSCRIBERS_FILE, f.hss.to_jsonl())];
    files.extend(f.learning.dump_fixtures());
    files.push((RELEASES_FILE, jsonl::render(&f.releases)));
    files.push((LOCATIONS_FILE, f.locations.to_jsonl()));
    fs::create_dir_all(out)
        .with_context(|| out.display().to_string())
        .or_exit(FIXTURE)?;
    for (name, text) in files {
        let path = out.join(name);
        fs::write(&path, text)
            .with_context(|| path.display().to_string())
            .or_exit(FIXTURE)?;
    }
    Ok(())
}

fn report_metrics(cfg: &Config) -> Result<(), Failure> {
    let releases = load_releases(&cfg.data_dir)
        .with_context(|| cfg.data_dir.display().to_string())
        .or_exit(FIXTURE)?;
    print!("{}", render_report(&releases));
    let violations = trend_check(&releases).or_exit(DOMAIN)?;
    if violations.is_empty() {
        println!("trend: ok");
        return Ok(());
    }
    for v in &violations {
        println!("trend: {} regressed at release {}", v.series, v.release);
    }
    fail(DOMAIN, anyhow!("{} trend violations", violations.len()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Serve => server::serve(&cfg),
        Command::SimulateUe { script, impi, k } => simulate_ue(&cfg, &script, &impi, k.as_deref()),
        Command::Provision {
            impi,
            k,
            student_id,
            roles,
            impus,
        } => {
            let k = SecretKey::from_hex(&k).map_err(|e| anyhow!("--k: {e}")).or_exit(CONFIG)?;
            let impus = if impus.is_empty() { vec![format!("sip:{impi}")] } else { impus };
            let impus = impus
                .iter()
                .map(|u| u.parse::<SipUri>().with_context(|| format!("--impu {u}")))
                .collect::<Result<Vec<_>, _>>()
                .or_exit(CONFIG)?;
            let roles: BTreeSet<Role> = roles.into_iter().map(Role::from).collect();
            provision(
                &cfg,
                Subscriber {
                    impi,
                    impus,
                    k,
                    roles,
                    student_id,
                    sqn: Default::default(),
                },
            )
        }
        Command::LoadFixtures { out } => {
            let f = load_fixtures(&cfg)?;
            println!(
                "{} subscribers, {} courses, {} buildings, {} events, {} releases, {} locations",
                f.hss.len(),
                f.learning.courses().count(),
                f.learning.buildings().count(),
                f.learning.events().count(),
                f.releases.len(),
                f.locations.0.len()
            );
            match out {
                Some(dir) => write_fixtures(&f, &dir),
                None => Ok(()),
            }
        }
        Command::ReportMetrics => report_metrics(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
