//! Command-line and config-file settings. A `key=value` file supplies
//! defaults and flags override it.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use mixoram::harness::{parse_config, Scenario};
use mixoram::net::{parse_peers, Peers};
use mixoram::shuffle::Design;

/// Flags shared by every subcommand.
#[derive(Args, Debug, Default, Clone)]
pub struct Opts {
    /// Config file of key=value lines; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub design: Option<String>,
    /// Number of records.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Payload bytes per record.
    #[arg(long, global = true)]
    pub b: Option<usize>,
    /// Cache slots (accesses per epoch); defaults to ceil(sqrt(n)).
    #[arg(long, global = true)]
    pub s: Option<usize>,
    /// Number of mixes.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Corrupted mixes.
    #[arg(long, global = true)]
    pub ma: Option<usize>,
    /// Records refreshed per access.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Parallel round count instead of the formula.
    #[arg(long = "r-override", global = true)]
    pub r_override: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// in-process or tcp.
    #[arg(long, global = true)]
    pub transport: Option<String>,
    /// Trials, or epochs for sim.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[arg(long, global = true)]
    pub kappa: Option<u32>,
    #[arg(long, global = true)]
    pub listen: Option<String>,
    /// Comma-separated name=host:port, names being mix<i>, storage, client.
    #[arg(long, global = true)]
    pub peers: Option<String>,
    /// Directory for reports, or for generated key files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

/// Settings after merging the config file with the flags.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

const SCENARIO_KEYS: [&str; 10] = ["b", "s", "ma", "d", "r-override", "transport", "trials", "kappa", "design", "seed"];

impl Settings {
    pub fn load(opts: &Opts) -> Result<Self> {
        let mut values = match &opts.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config(&text)?
                    .into_iter()
                    .map(|(k, v)| (k.replace('_', "-"), v))
                    .collect()
            }
            None => BTreeMap::new(),
        };
        let flags: [(&str, Option<String>); 15] = [
            ("design", opts.design.clone()),
            ("n", opts.n.map(|v| v.to_string())),
            ("b", opts.b.map(|v| v.to_string())),
            ("s", opts.s.map(|v| v.to_string())),
            ("m", opts.m.map(|v| v.to_string())),
            ("ma", opts.ma.map(|v| v.to_string())),
            ("d", opts.d.map(|v| v.to_string())),
            ("r-override", opts.r_override.map(|v| v.to_string())),
            ("seed", opts.seed.map(|v| v.to_string())),
            ("transport", opts.transport.clone()),
            ("trials", opts.trials.map(|v| v.to_string())),
            ("kappa", opts.kappa.map(|v| v.to_string())),
            ("listen", opts.listen.clone()),
            ("peers", opts.peers.clone()),
            ("out", opts.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Settings { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| usage(format!("missing --{key}")))
    }

    pub fn number<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| usage(format!("--{key}: {v:?} is not a number"))))
            .transpose()
    }

    pub fn required_number<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?;
        Ok(self.number(key)?.expect("checked above"))
    }

    /// Builds a scenario; `n` and `m` are mandatory, the design defaults to
    /// `fallback` when given.
    pub fn scenario(&self, fallback: Option<Design>) -> Result<Scenario> {
        let design = match (self.get("design"), fallback) {
            (Some(d), _) => d.parse().map_err(|e| usage(format!("--design: {e}")))?,
            (None, Some(d)) => d,
            (None, None) => return Err(usage("missing --design".into())),
        };
        let n = self.required_number("n")?;
        let m = self.required_number("m")?;
        let mut sc = Scenario::new(design, n, m, 0);
        for key in SCENARIO_KEYS {
            if let Some(v) = self.get(key) {
                sc.set(key, v).map_err(|e| usage(e.to_string()))?;
            }
        }
        sc.validate().map_err(|e| usage(e.to_string()))?;
        Ok(sc)
    }

    pub fn listen(&self) -> Result<SocketAddr> {
        let v = self.require("listen")?;
        v.parse().map_err(|_| usage(format!("--listen: bad address {v:?}")))
    }

    pub fn peers(&self) -> Result<Peers> {
        Ok(parse_peers(self.get("peers").unwrap_or(""))?)
    }

    pub fn out(&self) -> Option<PathBuf> {
        self.get("out").map(PathBuf::from)
    }
}

/// Marks an error as a usage problem; these exit with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: String) -> anyhow::Error {
    anyhow!(Usage(msg))
}

pub fn ensure_usage(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if !ok {
        bail!(Usage(msg()));
    }
    Ok(())
}
