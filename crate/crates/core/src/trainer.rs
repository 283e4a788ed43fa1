//! Synchronous data-parallel SGD on a synthetic linear-regression task.
//!
//! Each worker computes the mean-squared-error gradient on its own shard,
//! the chosen synchronizer combines the gradients, and every worker applies
//! the same averaged update. Local gradients are snapped to a fixed-point
//! grid before synchronization so that sums are exact in any order; this is
//! what lets a full-density sparse run reproduce the dense baseline bit for
//! bit.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::collectives::{dense_all_reduce_reference, topka_baseline};
use crate::error::{Error, Result};
use crate::fabric::{CostLedger, Fabric};
use crate::pipeline::{Cluster, ClusterConfig};
use crate::residual::ResidualMode;
use crate::sparse::{top_k_select_dense, GradientVector};

/// Resolution of the reproducibility grid (2^-30).
pub const GRID: f64 = 1.0 / (1u64 << 30) as f64;

/// One worker's slice of the training data, rows stored contiguously.
#[derive(Debug, Clone)]
pub struct Shard {
    dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl Shard {
    pub fn new(dim: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != dim * targets.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * targets.len(),
                found: features.len(),
            });
        }
        Ok(Self {
            dim,
            features,
            targets,
        })
    }

    pub fn samples(&self) -> usize {
        self.targets.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.features
            .chunks_exact(self.dim)
            .zip(self.targets.iter().copied())
    }

    fn residuals(&self, weights: &[f64]) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        let w = weights.to_vec();
        self.rows()
            .map(move |(x, y)| (x, x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - y))
    }

    /// Sum of squared errors on this shard.
    pub fn squared_error(&self, weights: &[f64]) -> f64 {
        self.residuals(weights).map(|(_, r)| r * r).sum()
    }
}

/// Linear-regression data split into disjoint per-worker shards.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub seed: u64,
    pub dim: usize,
    pub samples_per_worker: usize,
    pub noise: f64,
    pub true_weights: Vec<f64>,
    pub shards: Vec<Shard>,
}

impl SyntheticTask {
    /// Features are standard normal, true weights are normal with variance
    /// `1/dim` and targets carry Gaussian noise of scale `noise`.
    pub fn generate(
        seed: u64,
        dim: usize,
        workers: usize,
        samples_per_worker: usize,
        noise: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let true_weights: Vec<f64> = (0..dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let shards = (0..workers)
            .map(|_| {
                let features: Vec<f64> = (0..samples_per_worker * dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let targets = features
                    .chunks_exact(dim)
                    .map(|x| {
                        let clean: f64 = x.iter().zip(&true_weights).map(|(a, b)| a * b).sum();
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        clean + noise * eps
                    })
                    .collect();
                Shard::new(dim, features, targets).expect("shapes agree")
            })
            .collect();
        Self {
            seed,
            dim,
            samples_per_worker,
            noise,
            true_weights,
            shards,
        }
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    /// Mean squared error over the union of all shards.
    pub fn global_loss(&self, weights: &[f64]) -> f64 {
        let total: usize = self.shards.iter().map(Shard::samples).sum();
        let sse: f64 = self.shards.iter().map(|s| s.squared_error(weights)).sum();
        sse / total as f64
    }
}

/// Exact gradient of the shard's mean squared error.
pub fn local_gradient(weights: &[f64], shard: &Shard) -> GradientVector<f64> {
    assert_eq!(
        weights.len(),
        shard.dim,
        "weights must match the feature dimension"
    );
    let mut grad = vec![0.0; shard.dim];
    for (x, r) in shard.residuals(weights) {
        for (g, &xi) in grad.iter_mut().zip(x) {
            *g += r * xi;
        }
    }
    let scale = 2.0 / shard.samples() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    GradientVector::new(grad).expect("dim >= 1")
}

fn snap_to_grid(g: &mut GradientVector<f64>) {
    for v in g.as_mut_slice() {
        *v = (*v / GRID).round() * GRID;
    }
}

/// How workers combine their gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synchronizer {
    Dense,
    /// Gather-then-sum sparse baseline with local error feedback.
    TopkA,
    SparDl(ResidualMode),
}

impl std::str::FromStr for Synchronizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "topka" => Ok(Self::TopkA),
            "spardl" | "gres" => Ok(Self::SparDl(ResidualMode::Gres)),
            "pres" => Ok(Self::SparDl(ResidualMode::Pres)),
            "lres" => Ok(Self::SparDl(ResidualMode::Lres)),
            other => Err(Error::Config(format!("unknown synchronizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for Synchronizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Dense => f.write_str("dense"),
            Self::TopkA => f.write_str("topka"),
            Self::SparDl(mode) => write!(f, "{mode}"),
        }
    }
}

/// Step-decay learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRate {
    pub initial: f64,
    pub decay: f64,
    /// First iteration (0-based) using the decayed rate.
    pub decay_at: usize,
}

impl LearningRate {
    pub fn at(&self, iteration: usize) -> f64 {
        if iteration >= self.decay_at {
            self.initial * self.decay
        } else {
            self.initial
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rate: LearningRate,
    /// Fraction of coordinates selected per iteration, in `(0, 1]`.
    pub density: f64,
    pub synchronizer: Synchronizer,
    /// `dim`, `k` and `residual` are derived from the task, `density` and
    /// `synchronizer`; the remaining fields (teams, sag, timing) are used as
    /// given. Ignored by the dense synchronizer.
    pub cluster: ClusterConfig,
}

impl TrainConfig {
    /// 500 iterations at rate 0.05, decayed ×0.1 at iteration 400, density 0.01.
    pub fn new(workers: usize, synchronizer: Synchronizer) -> Self {
        Self {
            iterations: 500,
            rate: LearningRate {
                initial: 0.05,
                decay: 0.1,
                decay_at: 400,
            },
            density: 0.01,
            synchronizer,
            cluster: ClusterConfig::new(workers, 1, 1),
        }
    }

    /// `k = round(density · dim)`.
    pub fn k_for(&self, dim: usize) -> usize {
        (self.density * dim as f64).round() as usize
    }

    pub fn resolved_cluster(&self, dim: usize) -> Result<ClusterConfig> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config("density must lie in (0, 1]".into()));
        }
        let mut c = self.cluster;
        c.dim = dim;
        c.k = self.k_for(dim);
        if let Synchronizer::SparDl(mode) = self.synchronizer {
            c.residual = mode;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Loss trajectory and communication cost of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Global training loss after each iteration's update.
    pub losses: Vec<f64>,
    pub ledger: CostLedger,
    pub final_weights: Vec<f64>,
}

enum SyncState {
    Dense,
    TopkA {
        fabric: Fabric<f64>,
        residuals: Vec<Vec<f64>>,
        k: usize,
    },
    SparDl(Box<Cluster<f64>>),
}

impl SyncState {
    fn sum(&mut self, grads: &[GradientVector<f64>]) -> Result<Vec<f64>> {
        match self {
            SyncState::Dense => Ok(dense_all_reduce_reference(grads)?.swap_remove(0).into_vec()),
            SyncState::TopkA {
                fabric,
                residuals,
                k,
            } => {
                let dim = grads[0].dim();
                let mut fed = Vec::with_capacity(grads.len());
                for (g, r) in grads.iter().zip(residuals.iter_mut()) {
                    let x: Vec<f64> = g
                        .as_slice()
                        .iter()
                        .zip(r.iter())
                        .map(|(a, b)| a + b)
                        .collect();
                    let (_, dropped) = top_k_select_dense(0, 0..dim, &x, *k);
                    r.iter_mut().for_each(|v| *v = 0.0);
                    dropped.scatter_add(r);
                    fed.push(GradientVector::new(x)?);
                }
                let merged = topka_baseline(fabric, &fed, *k)?;
                if merged.iter().any(|m| m != &merged[0]) {
                    return Err(Error::Inconsistent("top-k gather results differ".into()));
                }
                let mut out = vec![0.0; dim];
                merged[0].scatter_add(&mut out);
                Ok(out)
            }
            SyncState::SparDl(cluster) => Ok(cluster.all_reduce(grads)?.global().to_dense()),
        }
    }

    fn ledger(&self, workers: usize) -> CostLedger {
        match self {
            SyncState::Dense => CostLedger::new(workers),
            SyncState::TopkA { fabric, .. } => fabric.ledger().clone(),
            SyncState::SparDl(c) => c.ledger().clone(),
        }
    }
}

/// Runs synchronous SGD and returns the loss curve.
///
/// Every worker keeps its own copy of the weights; the copies are compared
/// bit for bit after every update and any divergence aborts the run.
pub fn train(task: &SyntheticTask, config: &TrainConfig) -> Result<TrainOutcome> {
    let p = task.workers();
    if config.cluster.workers != p {
        return Err(Error::Config(format!(
            "task has {p} shards but the cluster has {} workers",
            config.cluster.workers
        )));
    }
    let mut sync = match config.synchronizer {
        Synchronizer::Dense => SyncState::Dense,
        Synchronizer::TopkA => SyncState::TopkA {
            fabric: Fabric::new(p),
            residuals: vec![vec![0.0; task.dim]; p],
            k: config.resolved_cluster(task.dim)?.k,
        },
        Synchronizer::SparDl(_) => {
            SyncState::SparDl(Box::new(Cluster::new(config.resolved_cluster(task.dim)?)?))
        }
    };

    let mut weights = vec![vec![0.0; task.dim]; p];
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let grads: Vec<GradientVector<f64>> = weights
            .iter()
            .zip(&task.shards)
            .map(|(w, s)| {
                let mut g = local_gradient(w, s);
                snap_to_grid(&mut g);
                g
            })
            .collect();
        let total = sync.sum(&grads)?;
        let step = config.rate.at(it) / p as f64;
        for w in &mut weights {
            for (wi, gi) in w.iter_mut().zip(&total) {
                *wi -= step * gi;
            }
        }
        if weights[1..].iter().any(|w| w != &weights[0]) {
            return Err(Error::Inconsistent(format!(
                "worker weights diverged at iteration {it}"
            )));
        }
        losses.push(task.global_loss(&weights[0]));
    }
    Ok(TrainOutcome {
        losses,
        ledger: sync.ledger(p),
        final_weights: weights.swap_remove(0),
    })
}

/// Writes loss curves as `iteration,loss,synchronizer,seed`, followed by one
/// footer row per curve holding its ledger totals.
pub fn write_loss_csv<W: Write>(
    curves: &[(Synchronizer, u64, TrainOutcome)],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "loss", "synchronizer", "seed"])?;
    for (sync, seed, outcome) in curves {
        for (i, loss) in outcome.losses.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                loss.to_string(),
                sync.to_string(),
                seed.to_string(),
            ])?;
        }
    }
    for (sync, seed, outcome) in curves {
        w.write_record([
            "ledger".to_string(),
            format!(
                "max_rounds={};max_scalars={}",
                outcome.ledger.max_rounds(),
                outcome.ledger.max_scalars_received()
            ),
            sync.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_vanishes_at_noiseless_optimum() {
        let task = SyntheticTask::generate(3, 8, 2, 20, 0.0);
        for s in &task.shards {
            let g = local_gradient(&task.true_weights, s);
            assert!(g.as_slice().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn single_sample_closed_form() {
        let shard = Shard::new(3, vec![1.0, -2.0, 0.5], vec![4.0]).unwrap();
        let g = local_gradient(&[0.0; 3], &shard);
        assert_eq!(g.as_slice(), &[-8.0, 16.0, -4.0]);
    }

    #[test]
    fn synchronizer_names_round_trip() {
        for name in ["dense", "topka", "gres", "pres", "lres"] {
            let s: Synchronizer = name.parse().unwrap();
            assert_eq!(s.to_string(), name);
        }
    }

    #[test]
    fn default_density_gives_twenty_of_two_thousand() {
        let c = TrainConfig::new(4, Synchronizer::SparDl(ResidualMode::Gres));
        assert_eq!(c.k_for(2000), 20);
        assert_eq!(c.resolved_cluster(2000).unwrap().k, 20);
    }

    #[test]
    fn rate_schedule_steps_down() {
        let r = LearningRate {
            initial: 0.05,
            decay: 0.1,
            decay_at: 400,
        };
        assert_eq!(r.at(399), 0.05);
        assert!((r.at(400) - 0.005).abs() < 1e-15);
    }
}
