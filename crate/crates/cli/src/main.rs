mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use mixoram::client::{Op, TcpBackend};
use mixoram::group::{keygen, read_key_file, read_public_key, write_key_file, Ristretto255};
use mixoram::harness::{self, Deployment, ExperimentReport, Scenario};
use mixoram::mixnode::MixNode;
use mixoram::net::{serve, StorageNode, TcpLink};
use mixoram::shuffle::Design;
use mixoram::storage::Server;
use rand::Rng;

use config::{ensure_usage, usage, Opts, Settings, Usage};

#[derive(Parser)]
#[command(name = "mixoram", version, about = "Delegated ORAM eviction through mix networks")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs `trials` epochs of accesses and evictions, then reads every record back.
    Sim,
    /// Compares measured eviction costs with the closed-form costs.
    Audit,
    /// Shuffle and cache statistics.
    Stats {
        #[arg(value_enum)]
        which: Stat,
        /// Subset size for the k-RTS experiment.
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Runs one networked node.
    Node {
        #[arg(long, value_enum)]
        role: Role,
        /// Mix index.
        #[arg(long)]
        index: Option<u8>,
        /// Key file of this mix.
        #[arg(long = "key-file")]
        key_file: Option<PathBuf>,
        /// Comma-separated mix key files, in mix order (client role).
        #[arg(long)]
        keys: Option<String>,
        /// Seconds without traffic before a mix or storage node exits.
        #[arg(long, default_value_t = 60)]
        idle: u64,
    },
    /// Writes a fresh mix key pair to `<out>/mix<i>.key` for each of `m` mixes.
    Keygen,
    /// Re-encrypts a layered database under a fresh client key and checks
    /// that nothing was lost.
    Reinit,
    /// Sends the same two query sequences through two deployments and
    /// compares what the adversary observes.
    Probe,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stat {
    Phi,
    Krts,
    Merge,
    Coupon,
    Coverage,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Mix,
    Storage,
    Client,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIXORAM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = Settings::load(&cli.opts)?;
    match cli.cmd {
        Command::Sim => {
            let sc = cfg.scenario(None)?;
            report(&cfg, harness::run_eviction_e2e(&sc)?)
        }
        Command::Audit => {
            let sc = cfg.scenario(None)?;
            report(&cfg, harness::audit_costs(&sc)?)
        }
        Command::Stats { which, k } => {
            // the statistics do not depend on the design; default to the
            // one each experiment is about
            let fallback = match which {
                Stat::Krts | Stat::Coupon => Design::ParallelLayered,
                Stat::Merge => Design::ParallelRebuild,
                Stat::Phi | Stat::Coverage => Design::CascadeLayered,
            };
            let sc = match which {
                // m plays no role in the coupon analysis
                Stat::Coupon if cfg.get("m").is_none() => {
                    let mut sc = Scenario::new(fallback, cfg.required_number("n")?, 1, 0);
                    for (key, v) in [("design", cfg.get("design")), ("s", cfg.get("s")), ("d", cfg.get("d")), ("seed", cfg.get("seed")), ("trials", cfg.get("trials"))] {
                        if let Some(v) = v {
                            sc.set(key, v).map_err(|e| usage(e.to_string()))?;
                        }
                    }
                    sc
                }
                _ => cfg.scenario(Some(fallback))?,
            };
            let rep = match which {
                Stat::Phi => harness::run_phi_experiment(&sc)?,
                Stat::Krts => harness::run_krts_experiment(&sc, k)?,
                Stat::Merge => harness::run_merge_experiment(&sc)?,
                Stat::Coupon => harness::run_coupon_experiment(&sc)?,
                Stat::Coverage => harness::run_coverage_experiment(&sc)?,
            };
            report(&cfg, rep)
        }
        Command::Node { role, index, key_file, keys, idle } => node(&cfg, role, index, key_file, keys, idle),
        Command::Keygen => {
            let m: usize = cfg.required_number("m")?;
            let dir = cfg.out().ok_or_else(|| usage("missing --out".into()))?;
            std::fs::create_dir_all(&dir)?;
            let mut rng = rand::thread_rng();
            for i in 0..m {
                let (x, y) = keygen::<Ristretto255, _>(&mut rng);
                let path = dir.join(format!("mix{i}.key"));
                write_key_file(&path, &x, &y)?;
                println!("{}", path.display());
            }
            Ok(true)
        }
        Command::Reinit => reinit(&cfg),
        Command::Probe => {
            let sc = cfg.scenario(None)?;
            let k = sc.s.min(sc.n);
            let a: Vec<_> = (0..k).map(harness::Query::read).collect();
            let b: Vec<_> = (0..k).map(|i| harness::Query::write(sc.n - 1 - i)).collect();
            report(&cfg, harness::run_indistinguishability_probe(&sc, &a, &b)?)
        }
    }
}

/// Prints the summary, writes the report files under `--out` (default
/// `reports/`) and returns whether every check passed.
fn report(cfg: &Settings, rep: ExperimentReport) -> Result<bool> {
    print!("{}", rep.summary_text());
    let dir = cfg.out().unwrap_or_else(|| PathBuf::from("reports"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = rep.write(&dir)?;
    println!("report={}", path.display());
    Ok(rep.passed())
}

fn node(cfg: &Settings, role: Role, index: Option<u8>, key_file: Option<PathBuf>, keys: Option<String>, idle: u64) -> Result<bool> {
    let listener = std::net::TcpListener::bind(cfg.listen()?).context("binding --listen")?;
    let peers = cfg.peers()?;
    let idle = Some(Duration::from_secs(idle));
    match role {
        Role::Mix => {
            let index = index.ok_or_else(|| usage("mix nodes need --index".into()))?;
            let path = key_file.ok_or_else(|| usage("mix nodes need --key-file".into()))?;
            let (x, y) = read_key_file(&path)?;
            info!("mix {index} listening on {}", listener.local_addr()?);
            serve(MixNode::new(index, x, y), listener, peers, idle, |_| false)?;
        }
        Role::Storage => {
            let sc = cfg.scenario(None)?;
            let cell_len = sc.client_config().cell_len();
            let server = Server::new(vec![vec![0; cell_len]; sc.n], cell_len, sc.s)?;
            info!("storage listening on {}", listener.local_addr()?);
            serve(StorageNode::new(Arc::new(server)), listener, peers, idle, |_| false)?;
        }
        Role::Client => {
            let sc = cfg.scenario(None)?;
            let files = keys.ok_or_else(|| usage("the client needs --keys".into()))?;
            let mixes = files
                .split(',')
                .map(|p| read_public_key(Path::new(p.trim())))
                .collect::<mixoram::Result<Vec<_>>>()?;
            ensure_usage(mixes.len() == sc.m, || format!("--keys lists {} mixes but --m is {}", mixes.len(), sc.m))?;
            let mut backend = TcpBackend {
                link: TcpLink::new(listener, peers, Duration::from_secs(60)),
                cell_len: sc.client_config().cell_len(),
            };
            return report(cfg, harness::drive_remote(&sc, mixes, &mut backend)?);
        }
    }
    Ok(true)
}

fn reinit(cfg: &Settings) -> Result<bool> {
    let sc = cfg.scenario(Some(Design::CascadeLayered))?;
    ensure_usage(sc.design.is_layered(), || format!("{} does not keep key history", sc.design))?;
    let mut dep = Deployment::new(&sc)?;
    let fresh = dep.client.history_len();
    let mut rng = sc.trial_rng(0);
    for _ in 0..sc.trials.max(1) {
        for _ in 0..sc.s {
            let v = rng.gen_range(0..sc.n);
            let op = if rng.gen() { Op::Write } else { Op::Read };
            dep.access(op, v)?;
        }
        dep.evict()?;
    }
    let before = dep.client.history_len();
    let t = Instant::now();
    dep.client.reinit(&mut dep.net)?;
    let took = t.elapsed();
    let after = dep.client.history_len();
    let wrong = dep.readback()?;
    println!("history_before={before}");
    println!("history_after={after}");
    println!("reinit_ms={}", took.as_millis());
    println!("wrong_reads={wrong}");
    let ok = wrong == 0 && after == fresh;
    println!("verdict={}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}
