//! Seeded synthetic inputs: random per-worker gradients and a stationary
//! index-overlap stream for exercising the B-SAG budget controller.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::fabric::{Fabric, WorkerId};
use crate::sag::{bsag, HController, TeamConfig};
use crate::scalar::Scalar;
use crate::sparse::{GradientVector, SparseBlock};

/// Value distribution for [`random_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueKind {
    /// Uniform integers in `[-bound, bound]`, zero excluded.
    Integer { bound: i64 },
    /// Standard normal reals.
    Normal,
    /// Values from `{±1, ±2}`: almost every magnitude is tied.
    Tied,
}

pub fn random_gradients<T: Scalar>(
    workers: usize,
    dim: usize,
    seed: u64,
    kind: ValueKind,
) -> Vec<GradientVector<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..workers)
        .map(|_| {
            let values = (0..dim)
                .map(|_| {
                    let v = match kind {
                        ValueKind::Integer { bound } => loop {
                            let x = rng.random_range(-bound..=bound);
                            if x != 0 {
                                break x as f64;
                            }
                        },
                        ValueKind::Normal => StandardNormal.sample(&mut rng),
                        ValueKind::Tied => {
                            let mag = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
                            if rng.random_bool(0.5) {
                                mag
                            } else {
                                -mag
                            }
                        }
                    };
                    T::from_f64(v).expect("representable")
                })
                .collect();
            GradientVector::new(values).expect("dim >= 1")
        })
        .collect()
}

/// A position group whose members draw values from a fixed popularity
/// profile with independent per-iteration noise, so the overlap between
/// their top-`h` sets is stationary over time.
#[derive(Debug, Clone)]
pub struct StationaryOverlap {
    popularity: Vec<f64>,
    members: usize,
    rng: ChaCha8Rng,
}

impl StationaryOverlap {
    /// `block_len` coordinates shared by `members` workers. Popularity decays
    /// geometrically over a random permutation of the coordinates.
    pub fn new(block_len: usize, members: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decay = 4.0 / block_len as f64;
        let mut popularity: Vec<f64> = (0..block_len)
            .map(|r| (-(r as f64) * decay).exp())
            .collect();
        popularity.shuffle(&mut rng);
        Self {
            popularity,
            members,
            rng,
        }
    }

    /// One block per member for the next iteration.
    pub fn next_blocks(&mut self) -> Vec<SparseBlock<f64>> {
        let len = self.popularity.len();
        (0..self.members)
            .map(|_| {
                let values: Vec<f64> = self
                    .popularity
                    .iter()
                    .map(|&p| {
                        let noise: f64 = Exp1.sample(&mut self.rng);
                        let sign = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        sign * p * noise
                    })
                    .collect();
                SparseBlock::from_dense(0, 0..len, &values)
            })
            .collect()
    }
}

/// One row of the controller trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Pre-selection budget used in this iteration.
    pub h: usize,
    /// Step after observing this iteration's union size.
    pub step: f64,
    pub flag: bool,
    pub union_size: usize,
    pub target: usize,
}

impl TraceRow {
    pub const HEADER: [&'static str; 6] = ["iteration", "h", "step", "flag", "N_t", "L"];

    pub fn record(&self) -> [String; 6] {
        [
            self.iteration.to_string(),
            self.h.to_string(),
            self.step.to_string(),
            self.flag.to_string(),
            self.union_size.to_string(),
            self.target.to_string(),
        ]
    }
}

/// Drives B-SAG on a stationary-overlap stream for `iterations` rounds of
/// one position group and records the controller's trajectory.
pub fn controller_trace(
    config: &TeamConfig,
    block_len: usize,
    iterations: usize,
    seed: u64,
) -> crate::Result<Vec<TraceRow>> {
    let d = config.teams;
    let mut ctrl = HController::new(config);
    let mut stream = StationaryOverlap::new(block_len, d, seed);
    let group: Vec<WorkerId> = (0..d).map(WorkerId).collect();
    let mut rows = Vec::with_capacity(iterations);
    for iteration in 1..=iterations {
        let mut fabric = Fabric::<f64>::new(d);
        let h = ctrl.budget();
        let blocks = stream.next_blocks().into_iter().map(Some).collect();
        let (_, sizes) = bsag(
            &mut fabric,
            std::slice::from_ref(&group),
            blocks,
            &[h],
            ctrl.target(),
            &mut Vec::new(),
        )?;
        ctrl.update(sizes[0]);
        rows.push(TraceRow {
            iteration,
            h,
            step: ctrl.step(),
            flag: ctrl.flag(),
            union_size: sizes[0],
            target: ctrl.target(),
        });
    }
    Ok(rows)
}

/// Median of `|N_t − L| / L` over trace rows whose iteration lies in `window`.
pub fn median_relative_gap(rows: &[TraceRow], window: std::ops::RangeInclusive<usize>) -> f64 {
    let mut gaps: Vec<f64> = rows
        .iter()
        .filter(|r| window.contains(&r.iteration))
        .map(|r| (r.union_size as f64 - r.target as f64).abs() / r.target as f64)
        .collect();
    assert!(!gaps.is_empty(), "window selects no rows");
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    if n % 2 == 1 {
        gaps[n / 2]
    } else {
        (gaps[n / 2 - 1] + gaps[n / 2]) / 2.0
    }
}
