//! Command-line runner for the sparse All-Reduce simulator.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spardl::collectives::topka_baseline;
use spardl::pipeline::{expected_cost_topka, RunReport};
use spardl::trainer::{train, write_loss_csv, Synchronizer, SyntheticTask, TrainConfig};
use spardl::workload::{
    controller_trace, median_relative_gap, random_gradients, TraceRow, ValueKind,
};
use spardl::{
    ClusterConfig, ExpectedCost, Fabric, RealCluster, ResidualMode, SagMode, SrsTiming, TeamConfig,
};

const CONFIG_HELP: &str = "\
CONFIG FILE:
  --config <path> reads one key=value pair per line; blank lines and lines
  starting with # are ignored. Keys are the long flag names without dashes:
  P, N, k, density, d, sag, residual, timing, seed, out, ps, ds,
  k-per-worker, compare, seeds, iterations, samples, block-len.
  Flags given on the command line override the file; SPARDL_SEED is used
  when neither sets a seed.

  When --d > 1 and --sag is absent, rsag is chosen for power-of-two d and
  bsag otherwise.";

#[derive(Parser, Debug)]
#[command(name = "spardl", version, about = "Sparse All-Reduce simulator with an exact cost ledger", after_help = CONFIG_HELP)]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Number of workers.
    #[arg(long = "P", global = true)]
    p: Option<usize>,
    /// Gradient dimension.
    #[arg(long = "N", global = true)]
    n: Option<usize>,
    /// Number of selected gradients; overrides --density.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Selected fraction of the gradient when --k is absent.
    #[arg(long, global = true)]
    density: Option<f64>,
    /// Number of teams.
    #[arg(long, global = true)]
    d: Option<usize>,
    /// Cross-team scheme: none, rsag or bsag.
    #[arg(long, global = true)]
    sag: Option<String>,
    /// Residual scheme: gres, pres or lres.
    #[arg(long, global = true)]
    residual: Option<String>,
    /// Sparsification timing: optimized or naive.
    #[arg(long, global = true)]
    timing: Option<String>,
    /// Random seed; falls back to SPARDL_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output CSV path; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One sparse All-Reduce on seeded random gradients; prints a run report.
    Allreduce,
    /// Measured against predicted cost over a sweep of cluster shapes.
    VerifyComplexity {
        /// Comma-separated worker counts.
        #[arg(long)]
        ps: Option<String>,
        /// Comma-separated team counts; cells where d does not divide P are skipped.
        #[arg(long)]
        ds: Option<String>,
        /// Selected gradients per worker (k = this × P).
        #[arg(long = "k-per-worker")]
        k_per_worker: Option<usize>,
    },
    /// Synchronous SGD on a synthetic regression task; prints loss curves.
    Train {
        /// Comma-separated synchronizers: dense, topka, gres, pres, lres.
        #[arg(long)]
        compare: Option<String>,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Samples per worker.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Budget-controller trace on a stationary-overlap workload.
    BsagTrace {
        #[arg(long)]
        iterations: Option<usize>,
        /// Coordinates per block; defaults to N·d/P.
        #[arg(long = "block-len")]
        block_len: Option<usize>,
    },
}

/// Flag values layered over the config file.
struct Settings {
    file: HashMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), n + 1))?;
                file.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self { file })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key {key}: {e}")),
            None => Ok(None),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = self.get(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var("SPARDL_SEED") {
            Ok(v) => v.parse().map_err(|e| anyhow!("SPARDL_SEED: {e}")),
            Err(_) => Ok(0),
        }
    }
}

struct Defaults {
    p: usize,
    n: usize,
    density: f64,
    d: usize,
}

fn default_sag(d: usize) -> SagMode {
    match d {
        1 => SagMode::None,
        d if d.is_power_of_two() => SagMode::Rsag,
        _ => SagMode::Bsag,
    }
}

fn parse_timing(s: &str) -> Result<SrsTiming> {
    match s {
        "optimized" => Ok(SrsTiming::Optimized),
        "naive" => Ok(SrsTiming::Naive),
        other => bail!("unknown timing {other:?}, expected optimized or naive"),
    }
}

fn cluster_config(common: &Common, s: &Settings, def: Defaults) -> Result<ClusterConfig> {
    let p = s.or(common.p, "P", def.p)?;
    let n = s.or(common.n, "N", def.n)?;
    let k = match s.get(common.k, "k")? {
        Some(k) => k,
        None => (s.or(common.density, "density", def.density)? * n as f64).round() as usize,
    };
    let d = s.or(common.d, "d", def.d)?;
    let sag = match s.get(common.sag.clone(), "sag")? {
        Some(v) => v.parse::<SagMode>()?,
        None => default_sag(d),
    };
    let residual: ResidualMode = s
        .or(common.residual.clone(), "residual", "gres".into())?
        .parse()?;
    let timing = parse_timing(&s.or(common.timing.clone(), "timing", "optimized".into())?)?;
    let cfg = ClusterConfig::new(p, n, k)
        .with_teams(d, sag)
        .with_residual(residual)
        .with_timing(timing)
        .with_seed(s.seed(common.seed)?);
    cfg.validate()?;
    Ok(cfg)
}

fn output(common: &Common, s: &Settings) -> Result<Box<dyn Write>> {
    match s.get(common.out.clone(), "out")? {
        Some(path) => Ok(Box::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e| anyhow!("list item {v:?}: {e}"))
        })
        .collect()
}

/// Returns whether every audit passed.
fn cmd_allreduce(common: &Common, s: &Settings) -> Result<bool> {
    let cfg = cluster_config(
        common,
        s,
        Defaults {
            p: 4,
            n: 2000,
            density: 0.01,
            d: 1,
        },
    )?;
    let grads = random_gradients::<f64>(cfg.workers, cfg.dim, cfg.seed, ValueKind::Normal);
    let mut cluster = RealCluster::new(cfg)?;
    let outcome = cluster.all_reduce(&grads)?;
    let report = RunReport::from_outcome(&cfg, &outcome)?;
    RunReport::write_csv(std::slice::from_ref(&report), output(common, s)?)?;
    let mut ok = report.consistent;
    if !report.consistent {
        eprintln!("consistency audit failed: workers hold different results");
    }
    if cfg.residual == ResidualMode::Gres && report.conservation_error > 1e-9 {
        eprintln!(
            "conservation audit failed: relative error {:e}",
            report.conservation_error
        );
        ok = false;
    }
    Ok(ok)
}

fn cmd_verify(
    common: &Common,
    s: &Settings,
    ps: Option<String>,
    ds: Option<String>,
    kpw: Option<usize>,
) -> Result<bool> {
    let ps: Vec<usize> = parse_list(&s.or(ps, "ps", "2,3,4,5,6,7,8,9".to_string())?)?;
    let ds: Vec<usize> = parse_list(&s.or(ds, "ds", "1".to_string())?)?;
    let kpw = s.or(kpw, "k-per-worker", 100)?;
    let seed = s.seed(common.seed)?;
    let timing = parse_timing(&s.or(common.timing.clone(), "timing", "optimized".into())?)?;
    let forced_sag = s
        .get(common.sag.clone(), "sag")?
        .map(|v| v.parse::<SagMode>())
        .transpose()?;

    let mut w = csv::Writer::from_writer(output(common, s)?);
    w.write_record([
        "algorithm",
        "P",
        "d",
        "k",
        "N",
        "max_rounds",
        "max_scalars",
        "predicted_rounds",
        "predicted_scalars_low",
        "predicted_scalars_high",
        "pass",
    ])?;
    let mut all_pass = true;
    let mut row = |w: &mut csv::Writer<Box<dyn Write>>,
                   name: &str,
                   p: usize,
                   d: usize,
                   k: usize,
                   n: usize,
                   got: (u64, u64),
                   want: ExpectedCost| {
        let pass = want.admits(got.0, got.1);
        all_pass &= pass;
        w.write_record([
            name.to_string(),
            p.to_string(),
            d.to_string(),
            k.to_string(),
            n.to_string(),
            got.0.to_string(),
            got.1.to_string(),
            want.rounds.to_string(),
            want.scalars_low.to_string(),
            want.scalars_high.to_string(),
            pass.to_string(),
        ])
    };
    for &p in &ps {
        let k = kpw * p;
        let n = 2 * k;
        let grads = random_gradients::<f64>(p, n, seed, ValueKind::Normal);
        for &d in &ds {
            if d == 0 || p % d != 0 {
                continue;
            }
            let sag = forced_sag.unwrap_or_else(|| default_sag(d));
            let cfg = ClusterConfig::new(p, n, k)
                .with_teams(d, sag)
                .with_timing(timing)
                .with_seed(seed);
            if let Err(e) = cfg.validate() {
                eprintln!("skipping P={p} d={d} {sag}: {e}");
                continue;
            }
            let mut cluster = RealCluster::new(cfg)?;
            let out = cluster.all_reduce(&grads)?;
            let got = (out.ledger.max_rounds(), out.ledger.max_scalars_received());
            let want = spardl::pipeline::expected_cost(p, k, d, sag)?;
            row(&mut w, &format!("spardl-{sag}"), p, d, k, n, got, want)?;
        }
        let mut fabric = Fabric::new(p);
        topka_baseline(&mut fabric, &grads, kpw)?;
        let got = (
            fabric.ledger().max_rounds(),
            fabric.ledger().max_scalars_received(),
        );
        row(
            &mut w,
            "topka",
            p,
            1,
            kpw,
            n,
            got,
            expected_cost_topka(p, kpw),
        )?;
    }
    w.flush()?;
    Ok(all_pass)
}

fn cmd_train(
    common: &Common,
    s: &Settings,
    compare: Option<String>,
    seeds: Option<u64>,
    iterations: Option<usize>,
    samples: Option<usize>,
) -> Result<bool> {
    let cfg = cluster_config(
        common,
        s,
        Defaults {
            p: 4,
            n: 2000,
            density: 0.01,
            d: 1,
        },
    )?;
    let syncs: Vec<Synchronizer> = parse_list(&s.or(compare, "compare", "gres".to_string())?)?;
    let seeds = s.or(seeds, "seeds", 1)?;
    let iterations = s.or(iterations, "iterations", 500)?;
    let samples = s.or(samples, "samples", 256)?;
    let density = cfg.k as f64 / cfg.dim as f64;

    let mut curves = Vec::new();
    for seed in cfg.seed..cfg.seed + seeds {
        let task = SyntheticTask::generate(seed, cfg.dim, cfg.workers, samples, 0.1);
        for &sync in &syncs {
            let mut tc = TrainConfig::new(cfg.workers, sync);
            tc.iterations = iterations;
            tc.density = density;
            tc.cluster = cfg;
            let out = train(&task, &tc).with_context(|| format!("{sync} seed {seed}"))?;
            curves.push((sync, seed, out));
        }
    }
    write_loss_csv(&curves, output(common, s)?)?;
    Ok(true)
}

fn cmd_bsag_trace(
    common: &Common,
    s: &Settings,
    iterations: Option<usize>,
    block_len: Option<usize>,
) -> Result<bool> {
    let cfg = cluster_config(
        common,
        s,
        Defaults {
            p: 6,
            n: 6000,
            density: 0.1,
            d: 3,
        },
    )?;
    let team = TeamConfig::new(cfg.workers, cfg.teams, cfg.k)?;
    if team.teams < 2 {
        bail!("bsag-trace needs d >= 2");
    }
    let iterations = s.or(iterations, "iterations", 100)?;
    let block_len = s.or(block_len, "block-len", cfg.dim / team.team_size())?;
    let rows = controller_trace(&team, block_len, iterations, cfg.seed)?;
    let mut w = csv::Writer::from_writer(output(common, s)?);
    w.write_record(TraceRow::HEADER)?;
    for r in &rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    if iterations >= 100 {
        eprintln!(
            "median |N_t - L|/L over iterations 50-100: {:.4}",
            median_relative_gap(&rows, 50..=100)
        );
    }
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    let settings = Settings::load(cli.config.as_deref())?;
    let c = &cli.common;
    match cli.command {
        Command::Allreduce => cmd_allreduce(c, &settings),
        Command::VerifyComplexity {
            ps,
            ds,
            k_per_worker,
        } => cmd_verify(c, &settings, ps, ds, k_per_worker),
        Command::Train {
            compare,
            seeds,
            iterations,
            samples,
        } => cmd_train(c, &settings, compare, seeds, iterations, samples),
        Command::BsagTrace {
            iterations,
            block_len,
        } => cmd_bsag_trace(c, &settings, iterations, block_len),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
