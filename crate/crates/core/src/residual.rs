//! Residual (error-feedback) collection across one sparse All-Reduce.
//!
//! Three collection schemes are supported:
//!
//! * `Gres` keeps every discarded value. Indexes that survive into the final
//!   global gradient take the discards recorded at this worker during the
//!   reduction (`xi`); all other indexes keep this worker's full local value
//!   from the iteration-start snapshot.
//! * `Pres` keeps only the snapshot values at indexes absent from the final
//!   gradient; discards at surviving indexes are dropped.
//! * `Lres` keeps only what the worker left out of its own initial per-block
//!   selection.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fabric::WorkerId;
use crate::pipeline::GlobalSparseGradient;
use crate::scalar::Scalar;
use crate::sparse::{merge_add, GradientVector, SparseBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualMode {
    #[default]
    Gres,
    Pres,
    Lres,
}

impl std::str::FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gres" => Ok(Self::Gres),
            "pres" => Ok(Self::Pres),
            "lres" => Ok(Self::Lres),
            other => Err(Error::Config(format!("unknown residual mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gres => "gres",
            Self::Pres => "pres",
            Self::Lres => "lres",
        })
    }
}

/// Share of a discarded block that one worker keeps: `1 / denominator`.
///
/// When several workers hold identical copies of the block they discarded
/// from, each keeps an equal share so the cluster-wide total is the discard
/// itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscardWeight {
    denominator: usize,
}

impl DiscardWeight {
    pub const FULL: Self = Self { denominator: 1 };

    pub fn share(copies: usize) -> Self {
        assert!(copies >= 1);
        Self {
            denominator: copies,
        }
    }

    pub fn denominator(self) -> usize {
        self.denominator
    }
}

/// A block of values dropped by a selection at `worker`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discard<T> {
    pub worker: WorkerId,
    pub block: SparseBlock<T>,
    pub weight: DiscardWeight,
}

/// Element-wise `gradients + residual`.
pub fn apply_residual<T: Scalar>(
    gradients: &GradientVector<T>,
    residual: GradientVector<T>,
) -> Result<GradientVector<T>> {
    gradients.add(&residual)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Running,
    Finalized,
}

/// One worker's residual state.
#[derive(Debug, Clone)]
pub struct ResidualStore<T> {
    mode: ResidualMode,
    carried: GradientVector<T>,
    g_copy: Vec<T>,
    xi: BTreeMap<usize, SparseBlock<T>>,
    local: Vec<T>,
    phase: Phase,
}

impl<T: Scalar> ResidualStore<T> {
    pub fn new(dim: usize, mode: ResidualMode) -> Self {
        Self {
            mode,
            carried: GradientVector::zeros(dim),
            g_copy: Vec::new(),
            xi: BTreeMap::new(),
            local: Vec::new(),
            phase: Phase::Idle,
        }
    }

    pub fn mode(&self) -> ResidualMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.carried.dim()
    }

    /// Residual that will be added to the next iteration's gradients.
    pub fn residual(&self) -> &GradientVector<T> {
        &self.carried
    }

    /// Accumulated discards for one block during the current iteration.
    pub fn xi(&self, block_id: usize) -> Option<&SparseBlock<T>> {
        self.xi.get(&block_id)
    }

    /// Adds the carried residual to fresh gradients, snapshots the sum and
    /// returns it. The carried residual is consumed.
    pub fn begin(&mut self, gradients: &GradientVector<T>) -> Result<GradientVector<T>> {
        if self.phase == Phase::Running {
            return Err(Error::ResidualState("iteration already in progress"));
        }
        let dim = self.dim();
        let carried = std::mem::replace(&mut self.carried, GradientVector::zeros(dim));
        let sum = match apply_residual(gradients, carried.clone()) {
            Ok(s) => s,
            Err(e) => {
                self.carried = carried;
                return Err(e);
            }
        };
        self.g_copy = sum.as_slice().to_vec();
        self.xi.clear();
        self.local = vec![T::zero(); dim];
        self.phase = Phase::Running;
        Ok(sum)
    }

    fn check_block(&self, block: &SparseBlock<T>) -> Result<()> {
        if block.range().end > self.dim() {
            return Err(Error::IndexOutOfRange {
                index: block.range().end - 1,
                start: 0,
                end: self.dim(),
            });
        }
        Ok(())
    }

    /// Accumulates `weight × discarded` into the block's accumulator.
    pub fn record_inproc(
        &mut self,
        block_id: usize,
        discarded: &SparseBlock<T>,
        weight: DiscardWeight,
    ) -> Result<()> {
        if self.phase != Phase::Running {
            return Err(Error::ResidualState("no iteration in progress"));
        }
        if discarded.block_id() != block_id {
            return Err(Error::BlockMismatch {
                expected: block_id,
                found: discarded.block_id(),
            });
        }
        self.check_block(discarded)?;
        if discarded.is_empty() {
            return Ok(());
        }
        let scaled = discarded.scaled_down(weight.denominator());
        match self.xi.get_mut(&block_id) {
            Some(acc) => {
                let range = acc.range();
                if let Some(index) = discarded.indexes().find(|i| !range.contains(i)) {
                    return Err(Error::IndexOutOfRange {
                        index,
                        start: range.start,
                        end: range.end,
                    });
                }
                *acc = merge_add(acc, &scaled)?;
            }
            None => {
                self.xi.insert(block_id, scaled);
            }
        }
        Ok(())
    }

    /// Records values this worker left out of its own initial selection.
    pub fn record_local(&mut self, discarded: &SparseBlock<T>) -> Result<()> {
        if self.phase != Phase::Running {
            return Err(Error::ResidualState("no iteration in progress"));
        }
        self.check_block(discarded)?;
        discarded.scatter_add(&mut self.local);
        Ok(())
    }

    /// Computes the residual for the next iteration from the synchronized
    /// global gradient and stores it.
    pub fn finalize(
        &mut self,
        final_global: &GlobalSparseGradient<T>,
    ) -> Result<GradientVector<T>> {
        match self.phase {
            Phase::Running => {}
            Phase::Finalized => return Err(Error::ResidualState("finalize called twice")),
            Phase::Idle => return Err(Error::ResidualState("no iteration in progress")),
        }
        if final_global.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: final_global.dim(),
            });
        }
        let values = match self.mode {
            ResidualMode::Gres => {
                let mut xi_dense = vec![T::zero(); self.dim()];
                for blk in self.xi.values() {
                    blk.scatter_add(&mut xi_dense);
                }
                let mut out = std::mem::take(&mut self.g_copy);
                for &(j, _) in final_global.entries() {
                    out[j] = xi_dense[j];
                }
                out
            }
            ResidualMode::Pres => {
                let mut out = std::mem::take(&mut self.g_copy);
                for &(j, _) in final_global.entries() {
                    out[j] = T::zero();
                }
                out
            }
            ResidualMode::Lres => std::mem::take(&mut self.local),
        };
        self.carried = GradientVector::new(values)?;
        self.xi.clear();
        self.local.clear();
        self.g_copy.clear();
        self.phase = Phase::Finalized;
        Ok(self.carried.clone())
    }
}
