//! Bag-based sparse Reduce-Scatter.
//!
//! Each worker of a team of size `m` splits its `m` blocks into a preservation
//! block (its own rank) and `l = ⌈log2 m⌉` sending bags laid out clockwise
//! from `rank + 1`. At step `i` the worker ships bag `l - i + 1` to
//! `rank + 2^(l-i)` and receives the matching bag from `rank - 2^(l-i)`;
//! every received block is one the worker still holds, so the set of held
//! blocks shrinks until only the preservation block remains.

use crate::collectives::{ceil_log2, validate_groups};
use crate::error::{Error, Result};
use crate::fabric::{Fabric, Outgoing, WorkerId};
use crate::residual::{Discard, DiscardWeight};
use crate::scalar::Scalar;
use crate::sparse::{merge_add, top_k_select, SparseBlock};

/// When summed blocks are re-sparsified during transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SrsTiming {
    /// Only the blocks of the next outgoing bag are sparsified.
    #[default]
    Optimized,
    /// Every held block is sparsified after each merge.
    Naive,
}

/// A worker's preservation block and sending bags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagSchedule {
    pub rank: usize,
    pub team_size: usize,
    pub preservation: usize,
    /// `sending_bags[i - 1]` is bag `B_i`.
    pub sending_bags: Vec<Vec<usize>>,
    /// Size of the last, possibly partial, bag.
    pub remainder: usize,
}

impl BagSchedule {
    /// Number of sending bags (and transmission steps).
    pub fn levels(&self) -> usize {
        self.sending_bags.len()
    }

    /// Bag sent at 1-based step `i`, with its target and source ranks.
    pub fn step(&self, i: usize) -> (&[usize], usize, usize) {
        let l = self.levels();
        assert!(1 <= i && i <= l);
        let dist = 1usize << (l - i);
        let m = self.team_size;
        (
            &self.sending_bags[l - i],
            (self.rank + dist) % m,
            (self.rank + m - dist) % m,
        )
    }
}

pub fn build_bags(team_size: usize, rank: usize) -> BagSchedule {
    assert!(team_size >= 1 && rank < team_size);
    let l = ceil_log2(team_size);
    let remainder = if l == 0 {
        0
    } else {
        team_size - (1 << (l - 1))
    };
    let mut sending_bags = Vec::with_capacity(l);
    let mut next = 1;
    for i in 1..=l {
        let size = if i == l { remainder } else { 1 << (i - 1) };
        sending_bags.push(
            (next..next + size)
                .map(|off| (rank + off) % team_size)
                .collect(),
        );
        next += size;
    }
    debug_assert_eq!(next, team_size);
    BagSchedule {
        rank,
        team_size,
        preservation: rank,
        sending_bags,
        remainder,
    }
}

/// Replays the schedule on block ids alone and checks that every received
/// bag is a subset of the receiver's held blocks.
pub fn verify_schedule(team_size: usize) -> Result<()> {
    let schedules: Vec<BagSchedule> = (0..team_size).map(|r| build_bags(team_size, r)).collect();
    let mut held: Vec<Vec<bool>> = vec![vec![true; team_size]; team_size];
    let l = ceil_log2(team_size);
    for i in 1..=l {
        for s in &schedules {
            let (bag, _, _) = s.step(i);
            for &b in bag {
                held[s.rank][b] = false;
            }
        }
        for s in &schedules {
            let (_, _, source) = s.step(i);
            let (incoming, _, _) = schedules[source].step(i);
            for &b in incoming {
                if !held[s.rank][b] {
                    return Err(Error::SubsetViolation {
                        worker: s.rank,
                        step: i,
                        block: b,
                    });
                }
            }
        }
    }
    for (rank, h) in held.iter().enumerate() {
        let left: Vec<usize> = (0..team_size).filter(|&b| h[b]).collect();
        if left != [rank] {
            return Err(Error::InvalidGroup(format!(
                "rank {rank} ends holding blocks {left:?}"
            )));
        }
    }
    Ok(())
}

/// Output of one sparse Reduce-Scatter.
#[derive(Debug, Clone)]
pub struct SrsOutput<T> {
    /// Per global worker: its team-reduced preservation block, sparsified to
    /// the budget. `None` for workers outside every team.
    pub reserved: Vec<Option<SparseBlock<T>>>,
    /// Largest block (in entries) put on the wire.
    pub max_sent_block: usize,
}

fn sparsify_into<T: Scalar>(
    slot: &mut SparseBlock<T>,
    budget: usize,
    worker: WorkerId,
    discards: &mut Vec<Discard<T>>,
) {
    if slot.len() <= budget {
        return;
    }
    let (kept, dropped) = top_k_select(slot, budget);
    *slot = kept;
    discards.push(Discard {
        worker,
        block: dropped,
        weight: DiscardWeight::FULL,
    });
}

/// Runs the sparse Reduce-Scatter inside every team simultaneously.
///
/// `blocks[w]` holds worker `w`'s blocks for positions `0..m` of its team.
/// Every discarded entry is appended to `discards` at the worker that
/// performed the selection.
pub fn run_srs<T: Scalar>(
    fabric: &mut Fabric<T>,
    teams: &[Vec<WorkerId>],
    mut blocks: Vec<Vec<SparseBlock<T>>>,
    budget: usize,
    timing: SrsTiming,
    discards: &mut Vec<Discard<T>>,
) -> Result<SrsOutput<T>> {
    let p = fabric.workers();
    validate_groups(teams, p)?;
    if blocks.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: blocks.len(),
        });
    }

    let mut held: Vec<Vec<Option<SparseBlock<T>>>> = vec![Vec::new(); p];
    let mut schedules: Vec<Option<BagSchedule>> = vec![None; p];
    for team in teams {
        let m = team.len();
        for (rank, &w) in team.iter().enumerate() {
            let mine = std::mem::take(&mut blocks[w.0]);
            if mine.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: mine.len(),
                });
            }
            for (pos, b) in mine.iter().enumerate() {
                if b.block_id() != pos {
                    return Err(Error::BlockMismatch {
                        expected: pos,
                        found: b.block_id(),
                    });
                }
            }
            held[w.0] = mine.into_iter().map(Some).collect();
            schedules[w.0] = Some(build_bags(m, rank));
        }
    }

    let mut max_sent_block = 0;
    let steps = teams.iter().map(|t| ceil_log2(t.len())).max().unwrap_or(0);
    for s in 1..=steps {
        let mut plan: Vec<Option<Outgoing<T>>> = vec![None; p];
        for team in teams {
            if s > ceil_log2(team.len()) {
                continue;
            }
            for &w in team {
                let sched = schedules[w.0].as_ref().expect("scheduled");
                let (bag, target, _) = sched.step(s);
                let mut payload = Vec::with_capacity(bag.len());
                for &b in bag {
                    let mut blk = held[w.0][b].take().expect("bag blocks are held");
                    sparsify_into(&mut blk, budget, w, discards);
                    max_sent_block = max_sent_block.max(blk.len());
                    payload.push(blk);
                }
                plan[w.0] = Some((team[target], payload));
            }
        }
        let inbox = fabric.exchange(plan)?;
        for team in teams {
            if s > ceil_log2(team.len()) {
                continue;
            }
            for &w in team {
                let msg = inbox[w.0].clone().expect("every member has a source");
                for incoming in msg.into_payload() {
                    let id = incoming.block_id();
                    let Some(local) = held[w.0].get_mut(id).and_then(Option::as_mut) else {
                        return Err(Error::SubsetViolation {
                            worker: w.0,
                            step: s,
                            block: id,
                        });
                    };
                    *local = merge_add(local, &incoming)?;
                }
                if timing == SrsTiming::Naive {
                    for blk in held[w.0].iter_mut().flatten() {
                        sparsify_into(blk, budget, w, discards);
                    }
                }
            }
        }
    }

    let mut reserved: Vec<Option<SparseBlock<T>>> = vec![None; p];
    for team in teams {
        for (rank, &w) in team.iter().enumerate() {
            let mut left: Vec<SparseBlock<T>> =
                held[w.0].iter_mut().filter_map(Option::take).collect();
            if left.len() != 1 || left[0].block_id() != rank {
                return Err(Error::InvalidGroup(format!(
                    "worker {w} finished reduce-scatter holding {} blocks",
                    left.len()
                )));
            }
            let mut mine = left.pop().expect("one block left");
            sparsify_into(&mut mine, budget, w, discards);
            reserved[w.0] = Some(mine);
        }
    }
    Ok(SrsOutput {
        reserved,
        max_sent_block,
    })
}

/// Closed-form `(rounds, scalars received)` for a team of `m` workers
/// reducing `k` selected gradients (`k / m` per block).
pub fn expected_cost_srs(m: usize, k: usize) -> (u64, u64) {
    assert!(
        m >= 1 && k.is_multiple_of(m),
        "k must be divisible by the team size"
    );
    (ceil_log2(m) as u64, (2 * k * (m - 1) / m) as u64)
}
