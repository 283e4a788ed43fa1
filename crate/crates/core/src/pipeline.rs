//! End-to-end sparse All-Reduce.
//!
//! One call runs, for every worker: residual add and snapshot, per-block
//! top-`L` selection, sparse Reduce-Scatter inside each team, cross-team
//! synchronization of position blocks (when `d > 1`), a Bruck All-Gather of
//! the position blocks inside each team and finally residual collection.

use std::io::Write;

use crate::collectives::{bruck_all_gather, ceil_log2};
use crate::error::{Error, Result};
use crate::fabric::{CostLedger, ExpectedCost, Fabric, WorkerId};
use crate::residual::{Discard, ResidualMode, ResidualStore};
use crate::sag::{bsag, expected_cost_sag, rsag, sag_phase_cost, HController, SagMode, TeamConfig};
use crate::scalar::Scalar;
use crate::sparse::{partition, top_k_select, BlockPartition, GradientVector, SparseBlock};
use crate::srs::{run_srs, SrsTiming};

/// Everything that determines one sparse All-Reduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterConfig {
    /// Number of workers `P`.
    pub workers: usize,
    /// Gradient dimension `N`.
    pub dim: usize,
    /// Total number of selected gradients `k`.
    pub k: usize,
    /// Number of teams `d`.
    pub teams: usize,
    pub sag: SagMode,
    pub residual: ResidualMode,
    pub timing: SrsTiming,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn new(workers: usize, dim: usize, k: usize) -> Self {
        Self {
            workers,
            dim,
            k,
            teams: 1,
            sag: SagMode::None,
            residual: ResidualMode::Gres,
            timing: SrsTiming::Optimized,
            seed: 0,
        }
    }

    pub fn with_teams(mut self, teams: usize, sag: SagMode) -> Self {
        self.teams = teams;
        self.sag = sag;
        self
    }

    pub fn with_residual(mut self, residual: ResidualMode) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_timing(mut self, timing: SrsTiming) -> Self {
        self.timing = timing;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks every structural constraint, naming the first one violated.
    pub fn validate(&self) -> Result<TeamConfig> {
        let cfg = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.workers == 0 {
            return cfg("P must be at least 1");
        }
        if self.dim == 0 {
            return cfg("N must be at least 1");
        }
        if self.teams == 0 {
            return cfg("d must be at least 1");
        }
        match self.sag {
            SagMode::None if self.teams != 1 => return cfg("sag mode none requires d = 1"),
            SagMode::Rsag if !self.teams.is_power_of_two() => {
                return cfg("rsag requires power-of-two d")
            }
            SagMode::Rsag | SagMode::Bsag if self.teams < 2 => {
                return cfg("rsag and bsag require d >= 2")
            }
            _ => {}
        }
        if !self.workers.is_multiple_of(self.teams) {
            return cfg("d must divide P");
        }
        if !self.k.is_multiple_of(self.workers) {
            return cfg("k must be divisible by P");
        }
        if self.k == 0 {
            return cfg("k must be at least P");
        }
        if self.k > self.dim {
            return cfg("k must not exceed N");
        }
        if self.workers / self.teams > self.dim {
            return cfg("team size P/d must not exceed N");
        }
        TeamConfig::new(self.workers, self.teams, self.k)
    }
}

/// The synchronized sparse gradient every worker ends up with.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSparseGradient<T> {
    dim: usize,
    entries: Vec<(usize, T)>,
}

impl<T: Scalar> GlobalSparseGradient<T> {
    pub fn new(dim: usize, entries: Vec<(usize, T)>) -> Result<Self> {
        SparseBlock::new(0, 0..dim, entries.clone())?;
        Ok(Self { dim, entries })
    }

    /// Concatenates position blocks whose ranges are disjoint and ascending.
    pub fn from_blocks(dim: usize, blocks: &[SparseBlock<T>]) -> Result<Self> {
        let entries = blocks
            .iter()
            .flat_map(|b| b.entries().iter().copied())
            .collect();
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

/// Result of one sparse All-Reduce.
#[derive(Debug, Clone)]
pub struct AllReduceOutcome<T> {
    /// Per worker.
    pub results: Vec<GlobalSparseGradient<T>>,
    /// Cost of this run only.
    pub ledger: CostLedger,
    /// Cost of the cross-team phase only.
    pub sag_ledger: CostLedger,
    /// Per worker: gradients plus carried residual, as reduced.
    pub inputs: Vec<GradientVector<T>>,
    /// Per worker: residual carried into the next iteration.
    pub residuals: Vec<GradientVector<T>>,
    /// Per position group: pre-selection budget used (B-SAG only).
    pub h_used: Vec<usize>,
    /// Per position group: gathered union size (B-SAG only).
    pub union_sizes: Vec<usize>,
}

impl<T: Scalar> AllReduceOutcome<T> {
    /// The common result; [`spardl_all_reduce`] only returns consistent runs.
    pub fn global(&self) -> &GlobalSparseGradient<T> {
        &self.results[0]
    }
}

/// Bit-exact comparison of every worker's result.
pub fn verify_consistency<T: Scalar>(results: &[GlobalSparseGradient<T>]) -> bool {
    let Some(first) = results.first() else {
        return true;
    };
    results.iter().all(|r| r == first)
}

/// Per coordinate: `Σ inputs − final − Σ residuals`.
pub fn conservation_residue<T: Scalar>(
    inputs: &[GradientVector<T>],
    global: &GlobalSparseGradient<T>,
    residuals: &[GradientVector<T>],
) -> Vec<T> {
    let mut diff = vec![T::zero(); global.dim()];
    for g in inputs {
        for (d, &v) in diff.iter_mut().zip(g.as_slice()) {
            *d = *d + v;
        }
    }
    for &(i, v) in global.entries() {
        diff[i] = diff[i] - v;
    }
    for r in residuals {
        for (d, &v) in diff.iter_mut().zip(r.as_slice()) {
            *d = *d - v;
        }
    }
    diff
}

/// Largest conservation residue relative to the largest absolute input mass
/// at any coordinate.
pub fn conservation_error<T: Scalar>(
    inputs: &[GradientVector<T>],
    global: &GlobalSparseGradient<T>,
    residuals: &[GradientVector<T>],
) -> f64 {
    let residue = conservation_residue(inputs, global, residuals);
    let mut scale = 0.0f64;
    for j in 0..global.dim() {
        let mass: f64 = inputs.iter().map(|g| g.as_slice()[j].to_real().abs()).sum();
        scale = scale.max(mass);
    }
    let worst = residue
        .iter()
        .map(|v| v.to_real().abs())
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

/// Closed-form cost for a configuration, delegating to the per-phase
/// formulas.
pub fn expected_cost(p: usize, k: usize, d: usize, mode: SagMode) -> Result<ExpectedCost> {
    expected_cost_sag(p, k, d, mode)
}

/// Gather-then-sum baseline: `⌈log2 P⌉` rounds, `2(P−1)k` scalars.
pub fn expected_cost_topka(p: usize, k: usize) -> ExpectedCost {
    ExpectedCost::exact(ceil_log2(p) as u64, (2 * (p - 1) * k) as u64)
}

/// Cross-team phase cost for a configuration.
pub fn expected_sag_phase_cost(config: &ClusterConfig) -> Result<ExpectedCost> {
    let team = config.validate()?;
    sag_phase_cost(&team, config.sag)
}

fn route_discards<T: Scalar>(
    discards: Vec<Discard<T>>,
    stores: &mut [ResidualStore<T>],
) -> Result<()> {
    for d in discards {
        stores[d.worker.0].record_inproc(d.block.block_id(), &d.block, d.weight)?;
    }
    Ok(())
}

/// Runs one sparse All-Reduce over `fabric`.
///
/// `stores` carries each worker's residual between calls and `controllers`
/// one B-SAG budget controller per position group (ignored for other modes).
pub fn spardl_all_reduce<T: Scalar>(
    fabric: &mut Fabric<T>,
    config: &ClusterConfig,
    gradients: &[GradientVector<T>],
    stores: &mut [ResidualStore<T>],
    controllers: &mut [HController],
) -> Result<AllReduceOutcome<T>> {
    let team_cfg = config.validate()?;
    let p = config.workers;
    if fabric.workers() != p || gradients.len() != p || stores.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: gradients.len().min(stores.len()).min(fabric.workers()),
        });
    }
    let m = team_cfg.team_size();
    let budget = team_cfg.block_budget();
    let teams = team_cfg.teams();
    let positions = team_cfg.position_groups();
    if config.sag == SagMode::Bsag && controllers.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: controllers.len(),
        });
    }
    let start = fabric.ledger().clone();
    let blocks: BlockPartition = partition(config.dim, m)?;

    // Residual add, snapshot and per-block selection.
    let mut inputs = Vec::with_capacity(p);
    let mut selected: Vec<Vec<SparseBlock<T>>> = Vec::with_capacity(p);
    for (w, g) in gradients.iter().enumerate() {
        if g.dim() != config.dim {
            return Err(Error::DimensionMismatch {
                expected: config.dim,
                found: g.dim(),
            });
        }
        let x = stores[w].begin(g)?;
        let mut mine = Vec::with_capacity(m);
        for (b, range) in blocks.ranges().iter().enumerate() {
            let (kept, dropped) = top_k_select(&x.block(b, range.clone()), budget);
            stores[w].record_local(&dropped)?;
            stores[w].record_inproc(b, &dropped, crate::residual::DiscardWeight::FULL)?;
            mine.push(kept);
        }
        selected.push(mine);
        inputs.push(x);
    }

    let mut discards = Vec::new();
    let srs = run_srs(
        fabric,
        &teams,
        selected,
        budget,
        config.timing,
        &mut discards,
    )?;
    route_discards(std::mem::take(&mut discards), stores)?;

    let before_sag = fabric.ledger().clone();
    let mut h_used = Vec::new();
    let mut union_sizes = Vec::new();
    let synced = match config.sag {
        SagMode::None => srs.reserved,
        SagMode::Rsag => rsag(fabric, &positions, srs.reserved, budget, &mut discards)?,
        SagMode::Bsag => {
            h_used = controllers.iter().map(HController::budget).collect();
            let (out, sizes) = bsag(
                fabric,
                &positions,
                srs.reserved,
                &h_used,
                budget,
                &mut discards,
            )?;
            for (c, &n) in controllers.iter_mut().zip(&sizes) {
                c.update(n);
            }
            union_sizes = sizes;
            out
        }
    };
    let sag_ledger = fabric.ledger().since(&before_sag);
    route_discards(discards, stores)?;

    let gathered = bruck_all_gather(fabric, &teams, synced)?;
    let mut results = Vec::with_capacity(p);
    for blocks_w in &gathered {
        results.push(GlobalSparseGradient::from_blocks(config.dim, blocks_w)?);
    }
    if !verify_consistency(&results) {
        let bad = results
            .iter()
            .position(|r| r != &results[0])
            .unwrap_or_default();
        return Err(Error::Inconsistent(format!(
            "worker {} disagrees with worker 0",
            WorkerId(bad)
        )));
    }

    let mut residuals = Vec::with_capacity(p);
    for store in stores.iter_mut() {
        residuals.push(store.finalize(&results[0])?);
    }

    Ok(AllReduceOutcome {
        results,
        ledger: fabric.ledger().since(&start),
        sag_ledger,
        inputs,
        residuals,
        h_used,
        union_sizes,
    })
}

/// A cluster with persistent per-worker state across iterations.
#[derive(Debug, Clone)]
pub struct Cluster<T> {
    config: ClusterConfig,
    fabric: Fabric<T>,
    stores: Vec<ResidualStore<T>>,
    controllers: Vec<HController>,
}

impl<T: Scalar> Cluster<T> {
    pub fn new(config: ClusterConfig) -> Result<Self> {
        let team = config.validate()?;
        let controllers = if config.sag == SagMode::Bsag {
            vec![HController::new(&team); team.team_size()]
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            fabric: Fabric::new(config.workers),
            stores: (0..config.workers)
                .map(|_| ResidualStore::new(config.dim, config.residual))
                .collect(),
            controllers,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    /// Cumulative cost since construction.
    pub fn ledger(&self) -> &CostLedger {
        self.fabric.ledger()
    }

    pub fn controllers(&self) -> &[HController] {
        &self.controllers
    }

    pub fn residual(&self, worker: usize) -> &GradientVector<T> {
        self.stores[worker].residual()
    }

    pub fn all_reduce(&mut self, gradients: &[GradientVector<T>]) -> Result<AllReduceOutcome<T>> {
        spardl_all_reduce(
            &mut self.fabric,
            &self.config,
            gradients,
            &mut self.stores,
            &mut self.controllers,
        )
    }
}

/// One row of the run report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ClusterConfig,
    pub max_rounds: u64,
    pub max_scalars: u64,
    pub predicted: ExpectedCost,
    pub consistent: bool,
    pub conservation_error: f64,
}

impl RunReport {
    pub const HEADER: [&'static str; 15] = [
        "P",
        "N",
        "k",
        "d",
        "sag",
        "residual",
        "timing",
        "seed",
        "max_rounds",
        "max_scalars",
        "predicted_rounds",
        "predicted_scalars_low",
        "predicted_scalars_high",
        "consistent",
        "conservation_error",
    ];

    /// Audits one all-reduce outcome against its configuration.
    pub fn from_outcome<T: Scalar>(
        config: &ClusterConfig,
        outcome: &AllReduceOutcome<T>,
    ) -> Result<Self> {
        Ok(Self {
            config: *config,
            max_rounds: outcome.ledger.max_rounds(),
            max_scalars: outcome.ledger.max_scalars_received(),
            predicted: expected_cost(config.workers, config.k, config.teams, config.sag)?,
            consistent: verify_consistency(&outcome.results),
            conservation_error: conservation_error(
                &outcome.inputs,
                outcome.global(),
                &outcome.residuals,
            ),
        })
    }

    /// Whether the measured cost lies within the prediction.
    pub fn cost_matches(&self) -> bool {
        self.predicted.admits(self.max_rounds, self.max_scalars)
    }

    pub fn record(&self) -> Vec<String> {
        let c = &self.config;
        vec![
            c.workers.to_string(),
            c.dim.to_string(),
            c.k.to_string(),
            c.teams.to_string(),
            c.sag.to_string(),
            c.residual.to_string(),
            match c.timing {
                SrsTiming::Optimized => "optimized".into(),
                SrsTiming::Naive => "naive".into(),
            },
            c.seed.to_string(),
            self.max_rounds.to_string(),
            self.max_scalars.to_string(),
            self.predicted.rounds.to_string(),
            self.predicted.scalars_low.to_string(),
            self.predicted.scalars_high.to_string(),
            self.consistent.to_string(),
            format!("{:e}", self.conservation_error),
        ]
    }

    pub fn write_csv<W: Write>(reports: &[RunReport], out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        for r in reports {
            w.write_record(r.record())?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_violation() {
        let bad = ClusterConfig::new(8, 6000, 800).with_teams(3, SagMode::Rsag);
        assert_eq!(
            bad.validate().unwrap_err(),
            Error::Config("rsag requires power-of-two d".into())
        );
        let bad = ClusterConfig::new(6, 6000, 601);
        assert_eq!(
            bad.validate().unwrap_err(),
            Error::Config("k must be divisible by P".into())
        );
        let bad = ClusterConfig::new(6, 6000, 600).with_teams(4, SagMode::Bsag);
        assert_eq!(
            bad.validate().unwrap_err(),
            Error::Config("d must divide P".into())
        );
        let bad = ClusterConfig::new(6, 6000, 600).with_teams(2, SagMode::None);
        assert!(bad.validate().is_err());
        assert!(ClusterConfig::new(6, 6000, 600).validate().is_ok());
    }

    #[test]
    fn single_worker_returns_local_top_k() {
        let mut c = Cluster::<f64>::new(ClusterConfig::new(1, 5, 2)).unwrap();
        let g = GradientVector::new(vec![0.5, -3.0, 1.0, 2.0, 0.0]).unwrap();
        let out = c.all_reduce(&[g]).unwrap();
        assert_eq!(out.global().entries(), &[(1, -3.0), (3, 2.0)]);
        assert_eq!(out.ledger.max_rounds(), 0);
        assert_eq!(out.ledger.max_scalars_received(), 0);
        assert_eq!(out.residuals[0].as_slice(), &[0.5, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn consistency_check_detects_corruption() {
        let a = GlobalSparseGradient::new(4, vec![(1, 1.0), (2, 2.0)]).unwrap();
        let mut b = a.clone();
        assert!(verify_consistency(&[a.clone(), b.clone()]));
        b.entries[1].1 = 2.5;
        assert!(!verify_consistency(&[a, b]));
    }

    #[test]
    fn topka_row() {
        assert_eq!(expected_cost_topka(4, 100), ExpectedCost::exact(2, 600));
        assert_eq!(expected_cost_topka(1, 100), ExpectedCost::exact(0, 0));
    }

    #[test]
    fn report_row_has_every_column() {
        let r = RunReport {
            config: ClusterConfig::new(4, 100, 8),
            max_rounds: 4,
            max_scalars: 24,
            predicted: ExpectedCost::exact(4, 24),
            consistent: true,
            conservation_error: 0.0,
        };
        assert_eq!(r.record().len(), RunReport::HEADER.len());
    }
}
