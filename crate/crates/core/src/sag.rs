//! Cross-team synchronization of position blocks.
//!
//! After the in-team Reduce-Scatter, the `d` workers that share a rank inside
//! their teams (a *position group*) hold partial sums of the same block. Two
//! schemes bring them to one identical block of at most `L = d·k/P` entries:
//!
//! * [`rsag`]: recursive doubling with top-`L` selection after every
//!   exchange. Partners always hold identical data, so selections agree.
//! * [`bsag`]: a top-`h` pre-selection, a Bruck All-Gather of the selected
//!   sets without any intermediate truncation, then one top-`L` selection on
//!   the identical union. `h` is tuned across iterations by [`HController`].

use crate::collectives::{bruck_all_gather, ceil_log2, merge_all, validate_groups};
use crate::error::{Error, Result};
use crate::fabric::{ExpectedCost, Fabric, Outgoing, WorkerId};
use crate::residual::{Discard, DiscardWeight};
use crate::scalar::Scalar;
use crate::sparse::{merge_add, top_k_select, SparseBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SagMode {
    /// Single team; no cross-team phase.
    #[default]
    None,
    Rsag,
    Bsag,
}

impl std::str::FromStr for SagMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rsag" => Ok(Self::Rsag),
            "bsag" => Ok(Self::Bsag),
            other => Err(Error::Config(format!("unknown sag mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SagMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Rsag => "rsag",
            Self::Bsag => "bsag",
        })
    }
}

/// Division of `workers` into `teams` equal teams with a total selection
/// budget of `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeamConfig {
    pub workers: usize,
    pub teams: usize,
    pub k: usize,
}

impl TeamConfig {
    pub fn new(workers: usize, teams: usize, k: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("P must be at least 1".into()));
        }
        if teams == 0 || !workers.is_multiple_of(teams) {
            return Err(Error::Config("d must divide P".into()));
        }
        if !k.is_multiple_of(workers) {
            return Err(Error::Config("k must be divisible by P".into()));
        }
        if teams * k / workers == 0 {
            return Err(Error::Config(
                "per-block budget d*k/P must be at least 1".into(),
            ));
        }
        Ok(Self { workers, teams, k })
    }

    pub fn team_size(&self) -> usize {
        self.workers / self.teams
    }

    /// Per-block budget `L = d·k/P`.
    pub fn block_budget(&self) -> usize {
        self.teams * self.k / self.workers
    }

    /// Contiguous teams: `[0, m)`, `[m, 2m)`, ...
    pub fn teams(&self) -> Vec<Vec<WorkerId>> {
        let m = self.team_size();
        (0..self.teams)
            .map(|t| (t * m..(t + 1) * m).map(WorkerId).collect())
            .collect()
    }

    /// Workers sharing rank `r` inside their teams, for every `r`.
    pub fn position_groups(&self) -> Vec<Vec<WorkerId>> {
        let m = self.team_size();
        (0..m)
            .map(|r| (0..self.teams).map(|t| WorkerId(t * m + r)).collect())
            .collect()
    }
}

/// Adaptive pre-selection budget for [`bsag`].
///
/// `step` keeps its sign as a direction. Two consecutive observations that
/// agree with the current direction double the step; an observation against
/// it reverses and halves the step. `h` is clamped to `[k/P, d·k/P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HController {
    h: f64,
    step: f64,
    flag: bool,
    target: usize,
    lower: f64,
    upper: f64,
}

impl HController {
    pub fn new(config: &TeamConfig) -> Self {
        let (k, p, d) = (config.k as f64, config.workers as f64, config.teams as f64);
        Self {
            h: k / p,
            step: 0.01 * k * (d - 1.0) / p,
            flag: false,
            target: config.block_budget(),
            lower: k / p,
            upper: d * k / p,
        }
    }

    /// Replaces the initial `h`, clamped to the controller's bounds.
    pub fn starting_at(mut self, h: f64) -> Self {
        self.h = h.clamp(self.lower, self.upper);
        self
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn flag(&self) -> bool {
        self.flag
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// Selection budget for the next pre-selection.
    pub fn budget(&self) -> usize {
        (self.h.round() as usize).max(1)
    }

    /// Feeds the union size observed after a gather; returns the new `h`.
    pub fn update(&mut self, observed: usize) -> f64 {
        if (observed > self.target) ^ (self.step > 0.0) {
            if self.flag {
                self.step *= 2.0;
                self.flag = false;
            } else {
                self.flag = true;
            }
        } else {
            self.step = -self.step / 2.0;
            self.flag = false;
        }
        self.h = (self.h + self.step).clamp(self.lower, self.upper);
        self.h
    }
}

/// Free-function form of [`HController::update`].
pub fn controller_update(ctrl: &mut HController, observed: usize) -> f64 {
    ctrl.update(observed)
}

fn check_blocks<T: Scalar>(
    groups: &[Vec<WorkerId>],
    blocks: &[Option<SparseBlock<T>>],
) -> Result<()> {
    for g in groups {
        let id = blocks[g[0].0]
            .as_ref()
            .ok_or_else(|| Error::InvalidGroup(format!("worker {} has no block", g[0])))?
            .block_id();
        for &w in g {
            let b = blocks[w.0]
                .as_ref()
                .ok_or_else(|| Error::InvalidGroup(format!("worker {w} has no block")))?;
            if b.block_id() != id {
                return Err(Error::BlockMismatch {
                    expected: id,
                    found: b.block_id(),
                });
            }
        }
    }
    Ok(())
}

/// Recursive-doubling synchronization with top-`budget` after each exchange.
///
/// At step `t` the `2^(t+1)` workers of a merged subgroup all perform the
/// same selection, so each keeps a `1/2^(t+1)` share of what it drops.
pub fn rsag<T: Scalar>(
    fabric: &mut Fabric<T>,
    groups: &[Vec<WorkerId>],
    mut blocks: Vec<Option<SparseBlock<T>>>,
    budget: usize,
    discards: &mut Vec<Discard<T>>,
) -> Result<Vec<Option<SparseBlock<T>>>> {
    let p = fabric.workers();
    validate_groups(groups, p)?;
    if blocks.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: blocks.len(),
        });
    }
    if let Some(g) = groups.iter().find(|g| !g.len().is_power_of_two()) {
        return Err(Error::UnsupportedGroupSize(g.len()));
    }
    check_blocks(groups, &blocks)?;

    let steps = groups.iter().map(|g| ceil_log2(g.len())).max().unwrap_or(0);
    for t in 0..steps {
        let dist = 1usize << t;
        let mut plan: Vec<Option<Outgoing<T>>> = vec![None; p];
        for g in groups {
            if dist >= g.len() {
                continue;
            }
            for (rank, &w) in g.iter().enumerate() {
                let mine = blocks[w.0].clone().expect("checked");
                plan[w.0] = Some((g[rank ^ dist], vec![mine]));
            }
        }
        let inbox = fabric.exchange(plan)?;
        for g in groups {
            if dist >= g.len() {
                continue;
            }
            for &w in g {
                let theirs = inbox[w.0]
                    .clone()
                    .expect("partner always sends")
                    .into_payload()
                    .pop()
                    .expect("one block");
                let mine = blocks[w.0].as_ref().expect("checked");
                let merged = merge_add(mine, &theirs)?;
                let (kept, dropped) = top_k_select(&merged, budget);
                if !dropped.is_empty() {
                    discards.push(Discard {
                        worker: w,
                        block: dropped,
                        weight: DiscardWeight::share(dist * 2),
                    });
                }
                blocks[w.0] = Some(kept);
            }
        }
    }
    Ok(blocks)
}

/// Synchronized blocks per worker and gathered union size per group.
pub type BsagOutput<T> = (Vec<Option<SparseBlock<T>>>, Vec<usize>);

/// Bruck-based synchronization with a top-`h` pre-selection.
///
/// `h[g]` is the pre-selection budget of group `g`. Returns the synchronized
/// blocks and, per group, the number of distinct indexes in the gathered
/// union before the final top-`budget` selection.
pub fn bsag<T: Scalar>(
    fabric: &mut Fabric<T>,
    groups: &[Vec<WorkerId>],
    mut blocks: Vec<Option<SparseBlock<T>>>,
    h: &[usize],
    budget: usize,
    discards: &mut Vec<Discard<T>>,
) -> Result<BsagOutput<T>> {
    let p = fabric.workers();
    validate_groups(groups, p)?;
    if blocks.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: blocks.len(),
        });
    }
    if h.len() != groups.len() {
        return Err(Error::DimensionMismatch {
            expected: groups.len(),
            found: h.len(),
        });
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::InvalidGroup(format!(
            "bsag needs at least two workers per group, got {}",
            g.len()
        )));
    }
    check_blocks(groups, &blocks)?;

    for (g, &h_g) in groups.iter().zip(h) {
        for &w in g {
            let blk = blocks[w.0].take().expect("checked");
            let (kept, dropped) = top_k_select(&blk, h_g);
            if !dropped.is_empty() {
                discards.push(Discard {
                    worker: w,
                    block: dropped,
                    weight: DiscardWeight::FULL,
                });
            }
            blocks[w.0] = Some(kept);
        }
    }

    let gathered = bruck_all_gather(fabric, groups, blocks)?;

    let mut out: Vec<Option<SparseBlock<T>>> = vec![None; p];
    let mut union_sizes = Vec::with_capacity(groups.len());
    for g in groups {
        let d = g.len();
        let mut size = None;
        for &w in g {
            let union = merge_all(&gathered[w.0])?.expect("group is non-empty");
            debug_assert!(size.is_none_or(|s| s == union.len()));
            size = Some(union.len());
            let (kept, dropped) = top_k_select(&union, budget);
            if !dropped.is_empty() {
                discards.push(Discard {
                    worker: w,
                    block: dropped,
                    weight: DiscardWeight::share(d),
                });
            }
            out[w.0] = Some(kept);
        }
        union_sizes.push(size.expect("group is non-empty"));
    }
    Ok((out, union_sizes))
}

/// Closed-form cost of the cross-team phase alone.
pub fn sag_phase_cost(config: &TeamConfig, mode: SagMode) -> Result<ExpectedCost> {
    let (p, k, d) = (config.workers, config.k, config.teams);
    match mode {
        SagMode::None => Ok(ExpectedCost::exact(0, 0)),
        SagMode::Rsag => {
            if !d.is_power_of_two() {
                return Err(Error::Config("rsag requires power-of-two d".into()));
            }
            let log_d = d.trailing_zeros() as u64;
            Ok(ExpectedCost::exact(
                log_d,
                2 * config.block_budget() as u64 * log_d,
            ))
        }
        SagMode::Bsag => {
            let rounds = ceil_log2(d) as u64;
            let low = 2.0 * k as f64 * (d - 1) as f64 / p as f64;
            let high = 2.0 * k as f64 * (d * d - d) as f64 / p as f64;
            Ok(ExpectedCost::interval(rounds, low, high))
        }
    }
}

/// Closed-form total cost of the whole sparse All-Reduce for a given
/// cross-team scheme: reduce-scatter + cross-team phase + final gather.
pub fn expected_cost_sag(p: usize, k: usize, d: usize, mode: SagMode) -> Result<ExpectedCost> {
    let config = TeamConfig::new(p, d, k)?;
    let m = config.team_size();
    let lm = ceil_log2(m) as u64;
    match mode {
        SagMode::None => {
            if d != 1 {
                return Err(Error::Config("sag mode none requires d = 1".into()));
            }
            Ok(ExpectedCost::exact(2 * lm, (4 * k * (p - 1) / p) as u64))
        }
        SagMode::Rsag => {
            if !d.is_power_of_two() {
                return Err(Error::Config("rsag requires power-of-two d".into()));
            }
            let log_d = d.trailing_zeros() as u64;
            let scalars = (4 * k * (p - d) / p) as u64 + 2 * config.block_budget() as u64 * log_d;
            Ok(ExpectedCost::exact(2 * lm + log_d, scalars))
        }
        SagMode::Bsag => {
            let (pf, kf, df) = (p as f64, k as f64, d as f64);
            let low = 2.0 * kf * (df * df + pf - 2.0 * df) / (pf * df);
            let high = 2.0 * kf * (df * df + 2.0 * pf - 3.0 * df) / pf;
            Ok(ExpectedCost::interval(
                2 * lm + ceil_log2(d) as u64,
                low,
                high,
            ))
        }
    }
}
