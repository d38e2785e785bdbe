//! Block decomposition of the rating matrix and block scheduling.
//!
//! Two split schemes are supported. The square scheme cuts users and items
//! into `p` contiguous ranges each and groups the `p` grid diagonals; every
//! block of a diagonal shares no user and no item with the others, so a
//! chain may update all of them at once. The column scheme cuts users only;
//! every stripe shares all items, so each stripe is a group by itself.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{bias_corrector, RatingTuple, RatingsBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitScheme {
    Square,
    Column,
}

/// Blocks that are pairwise orthogonal and updated together in a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrthogonalGroup {
    pub block_ids: Vec<usize>,
}

/// Grid decomposition of a rating matrix.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    scheme: SplitScheme,
    row_boundaries: Vec<usize>,
    col_boundaries: Vec<usize>,
    blocks: Vec<RatingsBlock>,
    groups: Vec<OrthogonalGroup>,
    n_users: usize,
    n_items: usize,
}

/// `parts + 1` cut points over `0..n`; the remainder goes to the last range.
fn boundaries(n: usize, parts: usize) -> Vec<usize> {
    let width = n / parts;
    let mut cuts: Vec<usize> = (0..parts).map(|k| k * width).collect();
    cuts.push(n);
    cuts
}

fn locate(cuts: &[usize], x: usize) -> usize {
    // index of the range containing x; cuts[0] = 0, last = n
    cuts.partition_point(|&c| c <= x) - 1
}

impl PartitionPlan {
    fn build(
        scheme: SplitScheme,
        tuples: &[RatingTuple],
        n_users: usize,
        n_items: usize,
        row_parts: usize,
        col_parts: usize,
    ) -> Result<Self> {
        let row_boundaries = boundaries(n_users, row_parts);
        let col_boundaries = boundaries(n_items, col_parts);
        let mut cells: Vec<Vec<RatingTuple>> = vec![Vec::new(); row_parts * col_parts];
        for t in tuples {
            if t.user >= n_users || t.item >= n_items {
                return Err(Error::arg(format!(
                    "tuple ({}, {}) outside a {}x{} rating matrix",
                    t.user, t.item, n_users, n_items
                )));
            }
            let r = locate(&row_boundaries, t.user);
            let c = locate(&col_boundaries, t.item);
            cells[r * col_parts + c].push(*t);
        }
        let blocks = cells
            .into_iter()
            .enumerate()
            .map(|(id, cell)| {
                let (r, c) = (id / col_parts, id % col_parts);
                RatingsBlock::new(
                    id,
                    row_boundaries[r]..row_boundaries[r + 1],
                    col_boundaries[c]..col_boundaries[c + 1],
                    cell,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let groups = match scheme {
            SplitScheme::Square => (0..row_parts)
                .map(|g| OrthogonalGroup {
                    block_ids: (0..row_parts)
                        .map(|r| r * col_parts + (r + g) % col_parts)
                        .collect(),
                })
                .collect(),
            SplitScheme::Column => (0..blocks.len())
                .map(|id| OrthogonalGroup {
                    block_ids: vec![id],
                })
                .collect(),
        };
        Ok(PartitionPlan {
            scheme,
            row_boundaries,
            col_boundaries,
            blocks,
            groups,
            n_users,
            n_items,
        })
    }

    pub fn scheme(&self) -> SplitScheme {
        self.scheme
    }

    pub fn blocks(&self) -> &[RatingsBlock] {
        &self.blocks
    }

    pub fn block(&self, id: usize) -> &RatingsBlock {
        &self.blocks[id]
    }

    pub fn groups(&self) -> &[OrthogonalGroup] {
        &self.groups
    }

    pub fn row_boundaries(&self) -> &[usize] {
        &self.row_boundaries
    }

    pub fn col_boundaries(&self) -> &[usize] {
        &self.col_boundaries
    }

    /// `(rows, cols)` of the block grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.row_boundaries.len() - 1, self.col_boundaries.len() - 1)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn total_ratings(&self) -> usize {
        self.blocks.iter().map(RatingsBlock::len).sum()
    }

    /// One line per block: `block_id row_range col_range N`.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let (r, c) = (b.row_range(), b.col_range());
            let _ = writeln!(
                out,
                "{}\t[{},{})\t[{},{})\t{}",
                b.id(),
                r.start,
                r.end,
                c.start,
                c.end,
                b.len()
            );
        }
        out
    }

    /// Per-user and per-item distributed correctors `h̄ = Σ_s v_s h_s`.
    ///
    /// Entries stay zero for users/items without ratings; they are never
    /// touched by the sparse-support updates.
    pub fn correctors(
        &self,
        minibatch_size: usize,
        visits: &VisitFrequencies,
    ) -> Result<Correctors> {
        let mut user = vec![0.0; self.n_users];
        let mut item = vec![0.0; self.n_items];
        for b in &self.blocks {
            let v = visits.v[b.id()];
            for (i, n_i) in b.user_counts() {
                user[i] += v * bias_corrector(n_i, b.len(), minibatch_size)?;
            }
            for (j, n_j) in b.item_counts() {
                item[j] += v * bias_corrector(n_j, b.len(), minibatch_size)?;
            }
        }
        for h in user.iter_mut().chain(item.iter_mut()) {
            // v-weighted sums of values in (0,1] may overshoot 1 by an ulp
            *h = h.min(1.0);
        }
        Ok(Correctors { user, item })
    }
}

/// Square grid `p × p`; groups are the `p` diagonals.
pub fn split_square(
    tuples: &[RatingTuple],
    n_users: usize,
    n_items: usize,
    p: usize,
) -> Result<PartitionPlan> {
    if p == 0 || p > n_users.min(n_items) {
        return Err(Error::arg(format!(
            "square split needs 1 <= p <= min(L, M) = {}, got {p}",
            n_users.min(n_items)
        )));
    }
    PartitionPlan::build(SplitScheme::Square, tuples, n_users, n_items, p, p)
}

/// `S` row stripes spanning all items; each stripe is its own group.
pub fn split_column(
    tuples: &[RatingTuple],
    n_users: usize,
    n_items: usize,
    s: usize,
) -> Result<PartitionPlan> {
    if s == 0 || s > n_users {
        return Err(Error::arg(format!(
            "column split needs 1 <= S <= L = {n_users}, got {s}"
        )));
    }
    PartitionPlan::build(SplitScheme::Column, tuples, n_users, n_items, s, 1)
}

fn disjoint(x: &Range<usize>, y: &Range<usize>) -> bool {
    x.end <= y.start || y.end <= x.start
}

/// True iff the blocks share neither a row nor a column.
pub fn is_orthogonal(b1: &RatingsBlock, b2: &RatingsBlock) -> bool {
    disjoint(&b1.row_range(), &b2.row_range()) && disjoint(&b1.col_range(), &b2.col_range())
}

/// Cyclic-shift assignment: chain `c` gets group `(c + t) mod G`.
/// Returns the group index per chain.
pub fn schedule_round(plan: &PartitionPlan, chain_count: usize, t: u64) -> Result<Vec<usize>> {
    let g = plan.groups.len();
    if chain_count > g {
        return Err(Error::arg(format!(
            "{chain_count} chains exceed the {g} orthogonal groups"
        )));
    }
    Ok((0..chain_count)
        .map(|c| ((c as u64 + t) % g as u64) as usize)
        .collect())
}

/// Fraction of rounds in which a chain updates each block.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitFrequencies {
    /// Indexed by block id.
    pub v: Vec<f64>,
}

/// Simulates `horizon` rounds of the cyclic schedule and returns, per chain,
/// how often each block is visited.
///
/// Each parameter row is reached through exactly the blocks of its row (or
/// column) stripe, one of which is visited per round, so these frequencies
/// sum to one over every stripe.
pub fn visit_frequencies(
    plan: &PartitionPlan,
    chain_count: usize,
    horizon: u64,
) -> Result<Vec<VisitFrequencies>> {
    if horizon == 0 {
        return Err(Error::arg("schedule horizon must be at least one round"));
    }
    let mut counts = vec![vec![0u64; plan.blocks.len()]; chain_count];
    for t in 0..horizon {
        for (c, g) in schedule_round(plan, chain_count, t)?
            .into_iter()
            .enumerate()
        {
            for &b in &plan.groups[g].block_ids {
                counts[c][b] += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|row| VisitFrequencies {
            v: row.into_iter().map(|n| n as f64 / horizon as f64).collect(),
        })
        .collect())
}

/// Long-run visit frequencies of the cyclic schedule, `1/G` for every block.
pub fn uniform_visits(plan: &PartitionPlan) -> VisitFrequencies {
    VisitFrequencies {
        v: vec![1.0 / plan.groups.len() as f64; plan.blocks.len()],
    }
}

/// Distributed bias correctors for every user and item.
#[derive(Debug, Clone, PartialEq)]
pub struct Correctors {
    pub user: Vec<f64>,
    pub item: Vec<f64>,
}
