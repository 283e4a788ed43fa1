//! Dense and coordinate-format gradient containers, block partitioning,
//! deterministic top-k selection and index-wise sparse merging.

use std::cmp::Ordering;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A worker's dense gradient (or residual) of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> GradientVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "gradient dimension must be at least 1");
        Self {
            values: vec![T::zero(); dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    /// Element-wise sum; both vectors must share a dimension.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self { values })
    }

    /// Dense view of one block of the vector.
    pub fn block(&self, block_id: usize, range: Range<usize>) -> SparseBlock<T> {
        SparseBlock::from_dense(block_id, range.clone(), &self.values[range])
    }
}

/// Coordinate-format list of `(index, value)` pairs confined to one block.
///
/// Indexes are strictly increasing and lie inside `range`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock<T> {
    block_id: usize,
    range: Range<usize>,
    entries: Vec<(usize, T)>,
}

impl<T: Scalar> SparseBlock<T> {
    pub fn new(block_id: usize, range: Range<usize>, entries: Vec<(usize, T)>) -> Result<Self> {
        if range.start > range.end {
            return Err(Error::MalformedBlock {
                block_id,
                reason: format!("empty range {}..{}", range.start, range.end),
            });
        }
        let mut prev: Option<usize> = None;
        for &(index, _) in &entries {
            if !range.contains(&index) {
                return Err(Error::IndexOutOfRange {
                    index,
                    start: range.start,
                    end: range.end,
                });
            }
            if prev.is_some_and(|p| p >= index) {
                return Err(Error::MalformedBlock {
                    block_id,
                    reason: format!("index {index} is not strictly increasing"),
                });
            }
            prev = Some(index);
        }
        Ok(Self {
            block_id,
            range,
            entries,
        })
    }

    pub fn empty(block_id: usize, range: Range<usize>) -> Self {
        Self {
            block_id,
            range,
            entries: Vec::new(),
        }
    }

    /// Every coordinate of a dense slice becomes an entry, zeros included.
    pub fn from_dense(block_id: usize, range: Range<usize>, values: &[T]) -> Self {
        assert_eq!(
            range.len(),
            values.len(),
            "dense slice must cover the range"
        );
        let entries = range.clone().zip(values.iter().copied()).collect();
        Self {
            block_id,
            range,
            entries,
        }
    }

    #[inline]
    pub fn block_id(&self) -> usize {
        self.block_id
    }

    #[inline]
    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    #[inline]
    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Transmission volume: one index and one value per entry.
    #[inline]
    pub fn scalar_volume(&self) -> usize {
        2 * self.entries.len()
    }

    pub fn get(&self, index: usize) -> Option<T> {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .ok()
            .map(|pos| self.entries[pos].1)
    }

    pub fn indexes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    /// Multiplies every value by `1/n`.
    pub fn scaled_down(&self, n: usize) -> Self {
        Self {
            block_id: self.block_id,
            range: self.range.clone(),
            entries: self
                .entries
                .iter()
                .map(|&(i, v)| (i, v.div_count(n)))
                .collect(),
        }
    }

    /// Adds the block into a dense buffer covering the full gradient.
    pub fn scatter_add(&self, dense: &mut [T]) {
        for &(i, v) in &self.entries {
            dense[i] = dense[i] + v;
        }
    }

    pub fn into_entries(self) -> Vec<(usize, T)> {
        self.entries
    }
}

/// Ranking used by every selection in the crate: larger magnitude first,
/// equal magnitudes broken by the smaller index.
#[inline]
fn selection_order<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    b.1.magnitude()
        .partial_cmp(&a.1.magnitude())
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Splits `block` into the `budget` entries of largest magnitude and the rest.
///
/// Ties are resolved by index so that every worker holding the same block
/// selects the same set. Both halves keep ascending index order.
pub fn top_k_select<T: Scalar>(
    block: &SparseBlock<T>,
    budget: usize,
) -> (SparseBlock<T>, SparseBlock<T>) {
    if budget >= block.len() {
        return (
            block.clone(),
            SparseBlock::empty(block.block_id, block.range.clone()),
        );
    }
    let mut ranked = block.entries.clone();
    if budget > 0 {
        ranked.select_nth_unstable_by(budget - 1, selection_order);
    }
    let mut rest = ranked.split_off(budget);
    ranked.sort_unstable_by_key(|&(i, _)| i);
    rest.sort_unstable_by_key(|&(i, _)| i);
    (
        SparseBlock {
            block_id: block.block_id,
            range: block.range.clone(),
            entries: ranked,
        },
        SparseBlock {
            block_id: block.block_id,
            range: block.range.clone(),
            entries: rest,
        },
    )
}

/// Top-k over a dense slice that starts at global index `range.start`.
pub fn top_k_select_dense<T: Scalar>(
    block_id: usize,
    range: Range<usize>,
    values: &[T],
    budget: usize,
) -> (SparseBlock<T>, SparseBlock<T>) {
    top_k_select(&SparseBlock::from_dense(block_id, range, values), budget)
}

/// Index-wise sum of two blocks of the same position.
///
/// Coinciding indexes are added; entries summing to exactly zero are kept.
pub fn merge_add<T: Scalar>(a: &SparseBlock<T>, b: &SparseBlock<T>) -> Result<SparseBlock<T>> {
    if a.block_id != b.block_id {
        return Err(Error::BlockMismatch {
            expected: a.block_id,
            found: b.block_id,
        });
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.entries.len() && j < b.entries.len() {
        let (ia, va) = a.entries[i];
        let (ib, vb) = b.entries[j];
        match ia.cmp(&ib) {
            Ordering::Less => {
                out.push((ia, va));
                i += 1;
            }
            Ordering::Greater => {
                out.push((ib, vb));
                j += 1;
            }
            Ordering::Equal => {
                out.push((ia, va + vb));
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a.entries[i..]);
    out.extend_from_slice(&b.entries[j..]);
    let range = a.range.start.min(b.range.start)..a.range.end.max(b.range.end);
    Ok(SparseBlock {
        block_id: a.block_id,
        range,
        entries: out,
    })
}

/// Contiguous, nearly equal split of `[0, dim)` into `blocks` ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    dim: usize,
    ranges: Vec<Range<usize>>,
}

impl BlockPartition {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.ranges.len()
    }

    #[inline]
    pub fn range(&self, block_id: usize) -> Range<usize> {
        self.ranges[block_id].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// Block owning global index `index`.
    pub fn block_of(&self, index: usize) -> usize {
        self.ranges.partition_point(|r| r.end <= index)
    }
}

/// The first `dim % blocks` ranges get one extra index.
pub fn partition(dim: usize, blocks: usize) -> Result<BlockPartition> {
    if blocks == 0 || blocks > dim {
        return Err(Error::InvalidPartition { dim, blocks });
    }
    let base = dim / blocks;
    let extra = dim % blocks;
    let mut ranges = Vec::with_capacity(blocks);
    let mut start = 0;
    for b in 0..blocks {
        let len = base + usize::from(b < extra);
        ranges.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, dim);
    Ok(BlockPartition { dim, ranges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(id: usize, range: Range<usize>, e: &[(usize, f64)]) -> SparseBlock<f64> {
        SparseBlock::new(id, range, e.to_vec()).unwrap()
    }

    #[test]
    fn top_k_picks_largest_magnitude() {
        let b = block(0, 0..3, &[(0, 3.0), (1, -5.0), (2, 2.0)]);
        let (sel, rest) = top_k_select(&b, 1);
        assert_eq!(sel.entries(), &[(1, -5.0)]);
        assert_eq!(rest.entries(), &[(0, 3.0), (2, 2.0)]);
    }

    #[test]
    fn top_k_tie_prefers_smaller_index() {
        let b = block(0, 0..3, &[(0, 2.0), (1, -2.0), (2, 1.0)]);
        let (sel, _) = top_k_select(&b, 1);
        assert_eq!(sel.entries(), &[(0, 2.0)]);
    }

    #[test]
    fn top_k_budget_covering_everything_is_identity() {
        let b = block(4, 10..20, &[(11, 1.0), (15, -4.0)]);
        let (sel, rest) = top_k_select(&b, 2);
        assert_eq!(sel, b);
        assert!(rest.is_empty());
        let (sel, rest) = top_k_select(&b, 100);
        assert_eq!(sel, b);
        assert!(rest.is_empty());
    }

    #[test]
    fn top_k_zero_budget_discards_all() {
        let b = block(0, 0..4, &[(1, 1.0), (3, 2.0)]);
        let (sel, rest) = top_k_select(&b, 0);
        assert!(sel.is_empty());
        assert_eq!(rest, b);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition(6, 3).unwrap().ranges(), &[0..2, 2..4, 4..6]);
        assert_eq!(partition(7, 3).unwrap().ranges(), &[0..3, 3..5, 5..7]);
        let p = partition(5, 5).unwrap();
        assert_eq!(p.ranges(), &[0..1, 1..2, 2..3, 3..4, 4..5]);
        assert_eq!(p.block_of(3), 3);
    }

    #[test]
    fn partition_rejects_bad_counts() {
        assert_eq!(
            partition(3, 4),
            Err(Error::InvalidPartition { dim: 3, blocks: 4 })
        );
        assert!(partition(3, 0).is_err());
    }

    #[test]
    fn merge_examples() {
        let a = block(1, 0..8, &[(1, 2.0)]);
        let e = SparseBlock::empty(1, 0..8);
        assert_eq!(merge_add(&a, &e).unwrap(), a);

        let a = block(1, 0..8, &[(1, 2.0), (3, 1.0)]);
        let b = block(1, 0..8, &[(3, 4.0), (5, -1.0)]);
        assert_eq!(
            merge_add(&a, &b).unwrap().entries(),
            &[(1, 2.0), (3, 5.0), (5, -1.0)]
        );
    }

    #[test]
    fn merge_keeps_zero_sums() {
        let a = block(0, 0..4, &[(2, 1.5)]);
        let b = block(0, 0..4, &[(2, -1.5)]);
        assert_eq!(merge_add(&a, &b).unwrap().entries(), &[(2, 0.0)]);
    }

    #[test]
    fn merge_rejects_mismatched_blocks() {
        let a = SparseBlock::<f64>::empty(0, 0..4);
        let b = SparseBlock::<f64>::empty(1, 4..8);
        assert_eq!(
            merge_add(&a, &b),
            Err(Error::BlockMismatch {
                expected: 0,
                found: 1
            })
        );
    }

    #[test]
    fn block_constructor_validates() {
        assert!(SparseBlock::new(0, 0..4, vec![(4, 1.0f64)]).is_err());
        assert!(SparseBlock::new(0, 0..4, vec![(2, 1.0f64), (2, 1.0)]).is_err());
        assert!(SparseBlock::new(0, 0..4, vec![(3, 1.0f64), (1, 1.0)]).is_err());
    }
}
