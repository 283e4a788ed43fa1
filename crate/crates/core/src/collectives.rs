//! Reference All-Gather algorithms, the gather-then-sum sparse baseline and a
//! naive dense All-Reduce used as a correctness oracle.
//!
//! Every collective here accepts several disjoint groups at once; the groups
//! advance through the same global rounds, which is how teams and position
//! groups share the fabric in the full pipeline.

use crate::error::{Error, Result};
use crate::fabric::{Fabric, Outgoing, WorkerId};
use crate::scalar::Scalar;
use crate::sparse::{merge_add, top_k_select_dense, GradientVector, SparseBlock};

/// `⌈log2 m⌉` for `m ≥ 1`.
#[inline]
pub fn ceil_log2(m: usize) -> usize {
    assert!(m >= 1);
    (usize::BITS - (m - 1).leading_zeros()) as usize
}

/// Checks that groups are non-empty, disjoint and inside the cluster.
pub(crate) fn validate_groups(groups: &[Vec<WorkerId>], workers: usize) -> Result<()> {
    let mut seen = vec![false; workers];
    for g in groups {
        if g.is_empty() {
            return Err(Error::InvalidGroup("empty group".into()));
        }
        for &w in g {
            if w.0 >= workers {
                return Err(Error::UnknownWorker {
                    worker: w.0,
                    workers,
                });
            }
            if std::mem::replace(&mut seen[w.0], true) {
                return Err(Error::InvalidGroup(format!(
                    "worker {w} appears in more than one group"
                )));
            }
        }
    }
    Ok(())
}

fn take_contribution<T: Scalar>(
    contributions: &mut [Option<SparseBlock<T>>],
    w: WorkerId,
) -> Result<SparseBlock<T>> {
    contributions[w.0]
        .take()
        .ok_or_else(|| Error::InvalidGroup(format!("worker {w} has no contribution")))
}

/// Bruck All-Gather within each group.
///
/// `contributions[w]` is worker `w`'s block. On return, `out[w]` holds every
/// block of `w`'s group ordered by source rank within the group; workers
/// outside all groups get an empty list. Takes `⌈log2 m⌉` rounds; the final
/// reordering is local and free.
pub fn bruck_all_gather<T: Scalar>(
    fabric: &mut Fabric<T>,
    groups: &[Vec<WorkerId>],
    mut contributions: Vec<Option<SparseBlock<T>>>,
) -> Result<Vec<Vec<SparseBlock<T>>>> {
    let p = fabric.workers();
    validate_groups(groups, p)?;
    if groups.is_empty() {
        return Err(Error::InvalidGroup("no groups given".into()));
    }

    // held[w][j] is the block of rank (rank(w) + j) mod m.
    let mut held: Vec<Vec<SparseBlock<T>>> = vec![Vec::new(); p];
    for g in groups {
        for &w in g {
            held[w.0].push(take_contribution(&mut contributions, w)?);
        }
    }

    let steps = groups.iter().map(|g| ceil_log2(g.len())).max().unwrap_or(0);
    for t in 0..steps {
        let dist = 1usize << t;
        let mut plan: Vec<Option<Outgoing<T>>> = vec![None; p];
        for g in groups {
            let m = g.len();
            if dist >= m {
                continue;
            }
            let count = dist.min(m - dist);
            for (rank, &w) in g.iter().enumerate() {
                let target = g[(rank + m - dist) % m];
                plan[w.0] = Some((target, held[w.0][..count].to_vec()));
            }
        }
        let inbox = fabric.exchange(plan)?;
        for (w, msg) in inbox.into_iter().enumerate() {
            if let Some(msg) = msg {
                held[w].extend(msg.into_payload());
            }
        }
    }

    let mut out: Vec<Vec<SparseBlock<T>>> = vec![Vec::new(); p];
    for g in groups {
        let m = g.len();
        for (rank, &w) in g.iter().enumerate() {
            let mine = std::mem::take(&mut held[w.0]);
            debug_assert_eq!(mine.len(), m);
            let mut ordered: Vec<Option<SparseBlock<T>>> = vec![None; m];
            for (j, b) in mine.into_iter().enumerate() {
                ordered[(rank + j) % m] = Some(b);
            }
            out[w.0] = ordered.into_iter().map(Option::unwrap).collect();
        }
    }
    Ok(out)
}

/// Recursive-doubling All-Gather; every group size must be a power of two.
///
/// Same contract as [`bruck_all_gather`], `log2 m` rounds.
pub fn recursive_doubling_all_gather<T: Scalar>(
    fabric: &mut Fabric<T>,
    groups: &[Vec<WorkerId>],
    mut contributions: Vec<Option<SparseBlock<T>>>,
) -> Result<Vec<Vec<SparseBlock<T>>>> {
    let p = fabric.workers();
    validate_groups(groups, p)?;
    if groups.is_empty() {
        return Err(Error::InvalidGroup("no groups given".into()));
    }
    if let Some(g) = groups.iter().find(|g| !g.len().is_power_of_two()) {
        return Err(Error::UnsupportedGroupSize(g.len()));
    }

    // slots[w][r] is the block of rank r, once known.
    let mut slots: Vec<Vec<Option<SparseBlock<T>>>> = vec![Vec::new(); p];
    for g in groups {
        for (rank, &w) in g.iter().enumerate() {
            slots[w.0] = vec![None; g.len()];
            slots[w.0][rank] = Some(take_contribution(&mut contributions, w)?);
        }
    }

    let steps = groups.iter().map(|g| ceil_log2(g.len())).max().unwrap_or(0);
    for t in 0..steps {
        let dist = 1usize << t;
        let mut plan: Vec<Option<Outgoing<T>>> = vec![None; p];
        for g in groups {
            if dist >= g.len() {
                continue;
            }
            for (rank, &w) in g.iter().enumerate() {
                let partner = g[rank ^ dist];
                // Known ranks form the aligned window of width `dist` around `rank`.
                let base = rank & !(dist - 1);
                let payload = slots[w.0][base..base + dist]
                    .iter()
                    .map(|b| b.clone().expect("window is complete"))
                    .collect();
                plan[w.0] = Some((partner, payload));
            }
        }
        let inbox = fabric.exchange(plan)?;
        for g in groups {
            if dist >= g.len() {
                continue;
            }
            for (rank, &w) in g.iter().enumerate() {
                let msg = inbox[w.0].clone().expect("partner always sends");
                let base = (rank ^ dist) & !(dist - 1);
                for (j, b) in msg.into_payload().into_iter().enumerate() {
                    slots[w.0][base + j] = Some(b);
                }
            }
        }
    }

    Ok(slots
        .into_iter()
        .map(|s| s.into_iter().map(|b| b.expect("gather complete")).collect())
        .collect())
}

/// Folds a list of same-position blocks with [`merge_add`] in list order.
pub fn merge_all<T: Scalar>(blocks: &[SparseBlock<T>]) -> Result<Option<SparseBlock<T>>> {
    let mut iter = blocks.iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first.clone();
    for b in iter {
        acc = merge_add(&acc, b)?;
    }
    Ok(Some(acc))
}

/// Gather-then-sum sparse All-Reduce: local top-k, Bruck All-Gather of all
/// `P` sparse sets, index-wise merge. The merged union is not re-sparsified,
/// so its density can reach `P·k`.
pub fn topka_baseline<T: Scalar>(
    fabric: &mut Fabric<T>,
    gradients: &[GradientVector<T>],
    k: usize,
) -> Result<Vec<SparseBlock<T>>> {
    let p = fabric.workers();
    if gradients.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: gradients.len(),
        });
    }
    let dim = gradients[0].dim();
    if k > dim {
        return Err(Error::InvalidK { k, dim });
    }
    let mut contributions = Vec::with_capacity(p);
    for g in gradients {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: g.dim(),
            });
        }
        let (selected, _) = top_k_select_dense(0, 0..dim, g.as_slice(), k);
        contributions.push(Some(selected));
    }
    let group: Vec<WorkerId> = (0..p).map(WorkerId).collect();
    let gathered = bruck_all_gather(fabric, &[group], contributions)?;
    gathered
        .iter()
        .map(|blocks| merge_all(blocks).map(|b| b.expect("group is non-empty")))
        .collect()
}

/// Exact element-wise sum of all workers' gradients, replicated per worker.
/// Sums in rank order; no fabric involvement.
pub fn dense_all_reduce_reference<T: Scalar>(
    gradients: &[GradientVector<T>],
) -> Result<Vec<GradientVector<T>>> {
    let Some(first) = gradients.first() else {
        return Err(Error::InvalidGroup("no workers".into()));
    };
    let mut total = first.clone();
    for g in &gradients[1..] {
        total = total.add(g)?;
    }
    Ok(vec![total; gradients.len()])
}
