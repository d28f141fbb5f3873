use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use chainsleuth_core::detect::{
    self, candidates_bad_randomness, candidates_reentrancy, confirm_bad_randomness, confirm_reentrancy, Finding,
    ReplayConfig, Rule,
};
use chainsleuth_core::fixtures;
use chainsleuth_core::graph::{self, SelectorDict};
use chainsleuth_core::instrument::Registry;
use chainsleuth_core::replay::{replay_batch, ReplayRequest, DEFAULT_GROUP_LIMIT};
use chainsleuth_core::store::{QueryFilter, Store, TxLocator, RECORDS_FILE};
use chainsleuth_core::{Address, B256};

#[derive(Parser, Debug)]
#[command(name = "chainsleuth", version, about = "Transaction replay, tracing and attack detection over recorded chain data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Store directory.
    #[arg(long, global = true, env = "CHAINSLEUTH_STORE")]
    store: Option<PathBuf>,
    /// Replay worker threads.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    /// Maximum transactions per replay group.
    #[arg(long, global = true, default_value_t = DEFAULT_GROUP_LIMIT as u64, value_parser = clap::value_parser!(u64).range(1..))]
    group_limit: u64,
    /// Also require the replayed gas to match the recorded gas.
    #[arg(long, global = true)]
    verify_gas: bool,
    /// Callback parameter `key=value`; repeatable.
    #[arg(long = "param", global = true, value_parser = parse_param)]
    params: Vec<(String, String)>,
    /// Write output here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Selector dictionary (`selector<TAB>signature` per line).
    #[arg(long, global = true)]
    selectors: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load fixture files into the store.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// List transactions matching a filter file.
    Query { filter: PathBuf },
    /// Replay transactions and verify them against their records.
    Replay {
        hashes: Vec<B256>,
        /// Replay every stored transaction.
        #[arg(long, conflicts_with = "hashes")]
        all: bool,
    },
    /// Run an attack detector end to end.
    Detect {
        rule: Rule,
        /// Count threshold (suicide-bomb, airdrop-hunting).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        threshold: Option<u64>,
        /// Bucket size in blocks (trend-anomaly).
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        bucket: u64,
        /// Deviation multiplier (trend-anomaly).
        #[arg(long, default_value_t = detect::DEFAULT_TREND_K)]
        k: f64,
        /// Print the candidate transactions only.
        #[arg(long)]
        candidates: bool,
    },
    /// Emit a graph as DOT text.
    Graph {
        #[command(subcommand)]
        kind: GraphKind,
    },
    /// Contract creations and destructions per block bucket.
    Trend {
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        bucket: u64,
    },
    /// Regenerate the scenario fixtures and selector dictionary.
    Fixtures {
        /// Fixture output directory.
        #[arg(long, default_value = "fixtures")]
        dir: PathBuf,
        /// Selector dictionary output path.
        #[arg(long, default_value = "data/selectors.tsv")]
        dictionary: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum GraphKind {
    /// Dynamic call graph of one transaction.
    Call { hash: B256 },
    /// Money flow around an account.
    Money {
        address: Address,
        #[arg(long, default_value_t = graph::DEFAULT_HOPS as u64, value_parser = clap::value_parser!(u64).range(1..))]
        hops: u64,
    },
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

/// Failure class of a command: usage problems exit 2, everything else 1.
enum Failure {
    Usage(anyhow::Error),
    Item(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Item(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

struct Output {
    sink: Box<dyn Write>,
}

impl Output {
    fn new(path: Option<&Path>) -> Result<Self, Failure> {
        let sink: Box<dyn Write> = match path {
            Some(p) => Box::new(io::BufWriter::new(
                fs::File::create(p).with_context(|| format!("creating {}", p.display())).map_err(usage)?,
            )),
            None => Box::new(io::BufWriter::new(io::stdout().lock())),
        };
        Ok(Output { sink })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.sink, "{s}")?;
        Ok(())
    }

    fn raw(&mut self, s: &str) -> Result<()> {
        self.sink.write_all(s.as_bytes())?;
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, v: &T) -> Result<()> {
        self.line(&serde_json::to_string(v)?)
    }

    fn finish(mut self) -> Result<()> {
        self.sink.flush()?;
        Ok(())
    }
}

fn open_existing(g: &Global) -> Result<Store, Failure> {
    let dir = g.store.as_ref().ok_or_else(|| usage(anyhow!("--store is required")))?;
    if !dir.join(RECORDS_FILE).is_file() {
        return Err(usage(anyhow!("no store at {}", dir.display())));
    }
    Store::open(dir).with_context(|| format!("opening store {}", dir.display())).map_err(Failure::Item)
}

fn dictionary(g: &Global) -> Result<SelectorDict, Failure> {
    match &g.selectors {
        Some(p) => SelectorDict::load(p).with_context(|| format!("reading {}", p.display())).map_err(usage),
        None => Ok(SelectorDict::default()),
    }
}

fn replay_config(g: &Global) -> ReplayConfig {
    ReplayConfig {
        workers: g.workers as usize,
        group_limit: g.group_limit as usize,
    }
}

/// Runs a command; `Ok(false)` means some item failed.
fn run(cli: Cli) -> Result<bool, Failure> {
    let g = &cli.global;
    match cli.cmd {
        Command::Ingest { files } => {
            let dir = g.store.as_ref().ok_or_else(|| usage(anyhow!("--store is required")))?;
            let mut store = Store::open(dir).with_context(|| format!("opening store {}", dir.display()))?;
            let mut out = Output::new(g.out.as_deref())?;
            let mut ok = true;
            for f in files {
                match store.ingest(&f) {
                    Ok(summary) => out.line(&format!(
                        "{}\t{}",
                        f.display(),
                        serde_json::to_string(&summary).map_err(anyhow::Error::from)?
                    ))?,
                    Err(e) => {
                        log::error!("{}: {e}", f.display());
                        ok = false;
                    }
                }
            }
            out.finish()?;
            Ok(ok)
        }
        Command::Query { filter } => {
            let store = open_existing(g)?;
            let text = fs::read_to_string(&filter)
                .with_context(|| format!("reading {}", filter.display()))
                .map_err(usage)?;
            let f = QueryFilter::parse(&text)
                .with_context(|| format!("filter {}", filter.display()))
                .map_err(usage)?;
            let mut out = Output::new(g.out.as_deref())?;
            for loc in store.query(&f) {
                out.json(&loc)?;
            }
            out.finish()?;
            Ok(true)
        }
        Command::Replay { hashes, all } => {
            let store = open_existing(g)?;
            let hashes: Vec<B256> = if all {
                store.transactions().map(|(_, t)| t.hash).collect()
            } else if hashes.is_empty() {
                return Err(usage(anyhow!("give transaction hashes or --all")));
            } else {
                hashes
            };
            let mut registry = Registry::new();
            for (k, v) in &g.params {
                registry.set_param(k, v);
            }
            let req = ReplayRequest::new(hashes)
                .workers(g.workers as usize)
                .group_limit(g.group_limit as usize)
                .verify_gas(g.verify_gas);
            let hooks = (!g.params.is_empty()).then_some(&registry);
            let results = replay_batch(&store, &req, hooks);
            let mut out = Output::new(g.out.as_deref())?;
            let mut ok = true;
            for r in &results {
                ok &= r.verdict.is_ok();
                out.json(r)?;
            }
            out.finish()?;
            Ok(ok)
        }
        Command::Detect {
            rule,
            threshold,
            bucket,
            k,
            candidates,
        } => {
            let store = open_existing(g)?;
            let mut out = Output::new(g.out.as_deref())?;
            if candidates {
                let list: Vec<TxLocator> = match rule {
                    Rule::Reentrancy => candidates_reentrancy(&store),
                    Rule::BadRandomness => candidates_bad_randomness(&store),
                    _ => return Err(usage(anyhow!("{rule} has no separate candidate stage"))),
                };
                for l in list {
                    out.json(&l)?;
                }
                out.finish()?;
                return Ok(true);
            }
            let cfg = replay_config(g);
            let findings: Vec<Finding> = match rule {
                Rule::Reentrancy => {
                    let c: Vec<B256> = candidates_reentrancy(&store).into_iter().map(|l| l.hash).collect();
                    confirm_reentrancy(&store, &c, cfg)
                }
                Rule::BadRandomness => {
                    let c: Vec<B256> = candidates_bad_randomness(&store).into_iter().map(|l| l.hash).collect();
                    confirm_bad_randomness(&store, &c, cfg)
                }
                Rule::SuicideBomb => detect::detect_suicide_bomb(
                    &store,
                    threshold.map_or(detect::DEFAULT_SUICIDE_THRESHOLD, |t| t as usize),
                ),
                Rule::AirdropHunting => detect::detect_airdrop_hunting(
                    &store,
                    threshold.map_or(detect::DEFAULT_AIRDROP_THRESHOLD, |t| t as usize),
                ),
                Rule::TrendAnomaly => {
                    if !(k.is_finite() && k >= 0.0) {
                        return Err(usage(anyhow!("--k must be a non-negative number")));
                    }
                    detect::trend_anomalies(&store, bucket, k).map_err(anyhow::Error::from)?
                }
            };
            let mut ok = true;
            for f in &findings {
                ok &= !f.is_error();
                out.line(&f.to_line())?;
            }
            out.finish()?;
            log::info!("{rule}: {} findings", findings.len());
            Ok(ok)
        }
        Command::Graph { kind } => {
            let store = open_existing(g)?;
            let text = match kind {
                GraphKind::Call { hash } => {
                    let dict = dictionary(g)?;
                    graph::call_graph_dot(&graph::build_call_graph(&store, &hash, &dict).map_err(anyhow::Error::from)?)
                }
                GraphKind::Money { address, hops } => graph::money_flow_dot(
                    &graph::build_money_flow(&store, &address, hops as usize).map_err(anyhow::Error::from)?,
                ),
            };
            let mut out = Output::new(g.out.as_deref())?;
            out.raw(&text)?;
            out.finish()?;
            Ok(true)
        }
        Command::Trend { bucket } => {
            let store = open_existing(g)?;
            let buckets = store.lifecycle_counts(bucket).map_err(anyhow::Error::from)?;
            let mut out = Output::new(g.out.as_deref())?;
            for b in &buckets {
                out.json(b)?;
            }
            out.finish()?;
            Ok(true)
        }
        Command::Fixtures { dir, dictionary } => {
            let names = fixtures::write_all(&dir).with_context(|| format!("writing {}", dir.display()))?;
            if let Some(parent) = dictionary.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(anyhow::Error::from)?;
            }
            fs::write(&dictionary, fixtures::selector_dictionary().to_tsv())
                .with_context(|| format!("writing {}", dictionary.display()))?;
            let mut out = Output::new(g.out.as_deref())?;
            for n in names {
                out.line(&dir.join(n).display().to_string())?;
            }
            out.line(&dictionary.display().to_string())?;
            out.finish()?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Item(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
