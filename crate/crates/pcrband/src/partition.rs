//! Partitioned form of a compact banded system and its per-rank
//! factorization.
//!
//! A banded system split over `p` ranks groups the unknowns as
//! `[xt_0, x_0, xt_1, x_1, ...]`: each rank owns an r-row interface block
//! `xt_i` followed by its interior block `x_i`. Two equations hold per
//! partition:
//!
//! ```text
//! Lt_i x_{i-1} + Dt_i xt_i + Ut_i x_i     = bt_i        (interface rows)
//! L_i  xt_i    + D_i  x_i  + U_i xt_{i+1} = b_i         (interior rows)
//! ```
//!
//! `D_i` is acyclic banded even when the global system is cyclic, so each
//! rank eliminates its interior with shared-memory PCR:
//!
//! ```text
//! D_i S_i = L_i        D_i R_i = U_i        D_i y_i = b_i
//! ```
//!
//! and contributes one row to the reduced block-tridiagonal interface
//! system:
//!
//! ```text
//! Lhat_i = -Lt_i S_{i-1}
//! Dhat_i = Dt_i - Lt_i R_{i-1} - Ut_i S_i
//! Uhat_i = -Ut_i R_i
//! bhat_i = bt_i - Lt_i y_{i-1} - Ut_i y_i
//! ```
//!
//! Band sparsity keeps the cross-rank traffic small: `Lt_i` selects only
//! the last `r` rows of the neighbor's `S`, `R` and `y`, and `Ut_i` only
//! the first `r` rows of the rank's own. Once the interface values are
//! known, interiors follow independently:
//!
//! ```text
//! x_i = y_i - S_i xt_i - R_i xt_{i+1}
//! ```

use crate::banded::{BandedMatrix, PcrPlan, RhsBatch};
use crate::dense::{dense_solve, DenseMat};
use crate::error::{Result, SolverError};
use crate::reduced::{ReducedBlocks, ReducedRow};

/// How the global rows are distributed over ranks.
///
/// `sizes[i]` is the interior row count `N_i`; each rank additionally owns
/// `r` interface rows in front of its interior, so the global row count is
/// `sum(N_i) + p*r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionLayout {
    p: usize,
    r: usize,
    cyclic: bool,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl PartitionLayout {
    /// Equal-size partitioning; remainder rows go to the leading ranks.
    pub fn balanced(n: usize, p: usize, r: usize, cyclic: bool) -> Result<Self> {
        if p == 0 {
            return Err(SolverError::InvalidLayout("p must be >= 1".to_string()));
        }
        let base = n / p;
        let extra = n % p;
        let chunks: Vec<usize> = (0..p).map(|i| base + usize::from(i < extra)).collect();
        let sizes: Vec<usize> = chunks.iter().map(|&c| c.saturating_sub(r)).collect();
        Self::from_sizes(sizes, r, cyclic)
    }

    /// Explicit interior sizes.
    pub fn from_sizes(sizes: Vec<usize>, r: usize, cyclic: bool) -> Result<Self> {
        let p = sizes.len();
        if p == 0 {
            return Err(SolverError::InvalidLayout("p must be >= 1".to_string()));
        }
        // Interface rows reach at most r columns into a neighboring
        // interior, so interiors narrower than r would couple past their
        // adjacent interface blocks.
        for (i, &ni) in sizes.iter().enumerate() {
            if ni < r.max(1) {
                return Err(SolverError::InvalidLayout(format!(
                    "rank {i} interior has {ni} rows, needs at least r = {r}"
                )));
            }
        }
        let mut offsets = Vec::with_capacity(p);
        let mut t = 0usize;
        for &ni in &sizes {
            offsets.push(t);
            t += r + ni;
        }
        Ok(Self {
            p,
            r,
            cyclic,
            sizes,
            offsets,
        })
    }

    pub fn ranks(&self) -> usize {
        self.p
    }

    pub fn half_bandwidth(&self) -> usize {
        self.r
    }

    pub fn cyclic(&self) -> bool {
        self.cyclic
    }

    /// Interior size `N_i`.
    pub fn interior(&self, rank: usize) -> usize {
        self.sizes[rank]
    }

    /// Rows owned by a rank, interface included.
    pub fn chunk(&self, rank: usize) -> usize {
        self.sizes[rank] + self.r
    }

    /// Global index of the rank's first row (its interface block).
    pub fn offset(&self, rank: usize) -> usize {
        self.offsets[rank]
    }

    /// Total global rows.
    pub fn total(&self) -> usize {
        self.offsets[self.p - 1] + self.chunk(self.p - 1)
    }

    pub fn next(&self, rank: usize) -> usize {
        (rank + 1) % self.p
    }

    pub fn prev(&self, rank: usize) -> usize {
        (rank + self.p - 1) % self.p
    }
}

/// One rank's view of the partitioned system.
///
/// The off-diagonal couplings are stored as their nonzero corners only:
/// `l`/`u` are dense `N_i x r` (nonzero in the top/bottom `r x r` corner),
/// while `tilde_l`/`tilde_u` keep just the trailing/leading `r x r` block
/// of the conceptually `r x N` wide interface couplings.
#[derive(Debug, Clone)]
pub struct LocalBlocks {
    pub d: BandedMatrix,
    pub l: RhsBatch,
    pub u: RhsBatch,
    pub tilde_l: DenseMat,
    pub tilde_d: DenseMat,
    pub tilde_u: DenseMat,
    pub b: RhsBatch,
    pub tilde_b: DenseMat,
}

fn check_layout(a: &BandedMatrix, layout: &PartitionLayout) -> Result<()> {
    let n = a.n();
    let r = a.half_bandwidth();
    if layout.total() != n {
        return Err(SolverError::InvalidLayout(format!(
            "layout covers {} rows, matrix has {n}",
            layout.total()
        )));
    }
    if layout.half_bandwidth() != r {
        return Err(SolverError::InvalidLayout(format!(
            "layout half-bandwidth {} != matrix {r}",
            layout.half_bandwidth()
        )));
    }
    if layout.cyclic() != a.cyclic() {
        return Err(SolverError::InvalidLayout(
            "layout and matrix disagree on cyclicity".to_string(),
        ));
    }
    Ok(())
}

/// Matrix-only part of [`split_global`]; the right-hand side can then be
/// split separately for each new `b`.
pub fn split_matrix(a: &BandedMatrix, layout: &PartitionLayout) -> Result<Vec<MatrixBlocks>> {
    check_layout(a, layout)?;
    (0..layout.ranks())
        .map(|rank| split_rank(a, layout, rank))
        .collect()
}

/// Extract the blocks of a single rank.
pub fn split_rank(a: &BandedMatrix, layout: &PartitionLayout, rank: usize) -> Result<MatrixBlocks> {
    check_layout(a, layout)?;
    let n = a.n() as isize;
    let r = a.half_bandwidth();
    let t = layout.offset(rank);
    let ni = layout.interior(rank);

    let mut d_bands = vec![vec![0.0; ni]; 2 * r + 1];
    let mut l = RhsBatch::zeros(ni, r);
    let mut u = RhsBatch::zeros(ni, r);
    let mut tilde_l = DenseMat::zeros(r, r);
    let mut tilde_d = DenseMat::zeros(r, r);
    let mut tilde_u = DenseMat::zeros(r, r);

    // Classify every band entry by its unwrapped signed position relative
    // to this rank's rows; the cyclic wrap is implicit in where the blocks
    // sit, which also keeps a rank that neighbors itself (p = 1)
    // unambiguous.
    let in_matrix = |c: isize| a.cyclic() || (c >= 0 && c < n);

    // Interface rows t .. t+r.
    for j in 0..r {
        let g = (t + j) as isize;
        for off in -(r as isize)..=(r as isize) {
            let v = a.band_entry(g as usize, off);
            if v == 0.0 {
                continue;
            }
            let c = g + off;
            if !in_matrix(c) {
                continue;
            }
            let local = c - t as isize;
            if local < 0 {
                // Trailing columns of the previous rank's interior.
                let from_end = (-local) as usize;
                debug_assert!(from_end <= r);
                tilde_l[(j, r - from_end)] = v;
            } else if (local as usize) < r {
                tilde_d[(j, local as usize)] = v;
            } else {
                let k = local as usize - r;
                debug_assert!(k < r);
                tilde_u[(j, k)] = v;
            }
        }
    }

    // Interior rows t+r .. t+r+ni.
    for li in 0..ni {
        let g = (t + r + li) as isize;
        for off in -(r as isize)..=(r as isize) {
            let v = a.band_entry(g as usize, off);
            if v == 0.0 {
                continue;
            }
            let c = g + off;
            if !in_matrix(c) {
                continue;
            }
            let local = c - (t + r) as isize;
            debug_assert!(local >= -(r as isize));
            if local < 0 {
                // This rank's own interface block.
                l.row_mut(li)[(local + r as isize) as usize] = v;
            } else if (local as usize) < ni {
                d_bands[(off + r as isize) as usize][li] = v;
            } else {
                // Leading columns of the next rank's interface.
                let k = local as usize - ni;
                debug_assert!(k < r);
                u.row_mut(li)[k] = v;
            }
        }
    }

    Ok(MatrixBlocks {
        d: BandedMatrix::new(ni, false, d_bands)?,
        l,
        u,
        tilde_l,
        tilde_d,
        tilde_u,
    })
}

/// Matrix blocks of one rank, without a right-hand side.
#[derive(Debug, Clone)]
pub struct MatrixBlocks {
    pub d: BandedMatrix,
    pub l: RhsBatch,
    pub u: RhsBatch,
    pub tilde_l: DenseMat,
    pub tilde_d: DenseMat,
    pub tilde_u: DenseMat,
}

/// Split a rank's chunk of the global right-hand side into its interface
/// part (first `r` rows) and interior part.
pub fn split_rhs_chunk(chunk: &RhsBatch, r: usize) -> (DenseMat, RhsBatch) {
    let tilde = chunk.slice_rows(0, r).to_dense();
    let interior = chunk.slice_rows(r, chunk.n());
    (tilde, interior)
}

/// Split the global system into per-rank blocks.
pub fn split_global(
    a: &BandedMatrix,
    b: &RhsBatch,
    layout: &PartitionLayout,
) -> Result<Vec<LocalBlocks>> {
    if b.n() != a.n() {
        return Err(SolverError::DimensionMismatch {
            context: "split_global: rhs rows",
            expected: a.n(),
            got: b.n(),
        });
    }
    let mats = split_matrix(a, layout)?;
    let mut out = Vec::with_capacity(layout.ranks());
    for (rank, m) in mats.into_iter().enumerate() {
        let t = layout.offset(rank);
        let chunk = b.slice_rows(t, t + layout.chunk(rank));
        let (tilde_b, bi) = split_rhs_chunk(&chunk, layout.half_bandwidth());
        out.push(LocalBlocks {
            d: m.d,
            l: m.l,
            u: m.u,
            tilde_l: m.tilde_l,
            tilde_d: m.tilde_d,
            tilde_u: m.tilde_u,
            b: bi,
            tilde_b,
        });
    }
    Ok(out)
}

/// Reassemble the dense global matrix from split blocks; the round trip
/// against [`BandedMatrix::to_dense`] must be exact.
pub fn reassemble_dense(blocks: &[MatrixBlocks], layout: &PartitionLayout) -> DenseMat {
    let n = layout.total();
    let r = layout.half_bandwidth();
    let mut a = DenseMat::zeros(n, n);
    for (rank, blk) in blocks.iter().enumerate() {
        let t = layout.offset(rank);
        let ni = layout.interior(rank);
        let prev = layout.prev(rank);
        let prev_tail = layout.offset(prev) + layout.chunk(prev) - r;
        let t_next = layout.offset(layout.next(rank));
        for j in 0..r {
            for k in 0..r {
                a[(t + j, t + k)] += blk.tilde_d[(j, k)];
                a[(t + j, t + r + k)] += blk.tilde_u[(j, k)];
                a[(t + j, prev_tail + k)] += blk.tilde_l[(j, k)];
            }
        }
        for li in 0..ni {
            let g = t + r + li;
            for k in 0..r {
                a[(g, t + k)] += blk.l.at(li, k);
                a[(g, t_next + k)] += blk.u.at(li, k);
            }
            for off in -(r as isize)..=(r as isize) {
                let col = li as isize + off;
                if col >= 0 && col < ni as isize {
                    a[(g, t + r + col as usize)] += blk.d.band_entry(li, off);
                }
            }
        }
    }
    a
}

/// The last `r` rows of a rank's `S` and `R`; this is everything a
/// neighbor needs to build its reduced-row blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryBlocks {
    pub s_tail: DenseMat,
    pub r_tail: DenseMat,
}

/// Pre-factorized per-rank data: the PCR plan of `D_i`, the panels
/// `S_i`, `R_i`, their boundary caches, and the interface blocks needed
/// to assemble the rank's reduced row.
#[derive(Debug, Clone)]
pub struct LocalFactor {
    plan: PcrPlan,
    s: RhsBatch,
    r_panel: RhsBatch,
    tilde_l: DenseMat,
    tilde_d: DenseMat,
    tilde_u: DenseMat,
    n_i: usize,
    r: usize,
}

impl LocalFactor {
    pub fn interior(&self) -> usize {
        self.n_i
    }

    pub fn half_bandwidth(&self) -> usize {
        self.r
    }

    pub fn s(&self) -> &RhsBatch {
        &self.s
    }

    pub fn r_panel(&self) -> &RhsBatch {
        &self.r_panel
    }

    /// Boundary cache exchanged with the next rank.
    pub fn boundary(&self) -> BoundaryBlocks {
        BoundaryBlocks {
            s_tail: tail_rows(&self.s, self.r),
            r_tail: tail_rows(&self.r_panel, self.r),
        }
    }
}

/// Last `r` rows as a dense block.
pub fn tail_rows(b: &RhsBatch, r: usize) -> DenseMat {
    b.slice_rows(b.n() - r, b.n()).to_dense()
}

/// First `r` rows as a dense block.
pub fn head_rows(b: &RhsBatch, r: usize) -> DenseMat {
    b.slice_rows(0, r).to_dense()
}

/// Factorize one rank's interior: build the PCR plan for `D_i` and solve
/// `D_i S_i = L_i`, `D_i R_i = U_i` with r-column batches.
pub fn factorize_local(blocks: &MatrixBlocks) -> Result<LocalFactor> {
    let plan = PcrPlan::new(&blocks.d)?;
    let s = plan.apply(&blocks.l)?;
    let r_panel = plan.apply(&blocks.u)?;
    Ok(LocalFactor {
        plan,
        s,
        r_panel,
        tilde_l: blocks.tilde_l.clone(),
        tilde_d: blocks.tilde_d.clone(),
        tilde_u: blocks.tilde_u.clone(),
        n_i: blocks.d.n(),
        r: blocks.d.half_bandwidth(),
    })
}

/// Solve `D_i y_i = b_i` reusing the pre-factorized reduction coefficients.
pub fn forward_rhs(factor: &LocalFactor, b: &RhsBatch) -> Result<RhsBatch> {
    if b.n() != factor.n_i {
        return Err(SolverError::DimensionMismatch {
            context: "forward_rhs: rhs rows",
            expected: factor.n_i,
            got: b.n(),
        });
    }
    factor.plan.apply(b)
}

/// Build the rank's reduced-row coefficient blocks from its own factor and
/// the previous rank's boundary cache. All products involve only `r x r`
/// sub-blocks.
pub fn assemble_reduced_blocks(factor: &LocalFactor, neighbor: &BoundaryBlocks) -> ReducedBlocks {
    let r = factor.r;
    let s_head = head_rows(&factor.s, r);
    let r_head = head_rows(&factor.r_panel, r);
    let lhat = factor.tilde_l.matmul(&neighbor.s_tail).scaled(-1.0);
    let dhat = factor
        .tilde_d
        .sub(&factor.tilde_l.matmul(&neighbor.r_tail))
        .sub(&factor.tilde_u.matmul(&s_head));
    let uhat = factor.tilde_u.matmul(&r_head).scaled(-1.0);
    ReducedBlocks { lhat, dhat, uhat }
}

/// Build the rank's reduced right-hand side `bhat_i` from its interface
/// rhs, its own `y_i` and the previous rank's `y` tail.
pub fn assemble_reduced_rhs(
    factor: &LocalFactor,
    tilde_b: &DenseMat,
    y: &RhsBatch,
    y_prev_tail: &DenseMat,
) -> DenseMat {
    let y_head = head_rows(y, factor.r);
    tilde_b
        .sub(&factor.tilde_l.matmul(y_prev_tail))
        .sub(&factor.tilde_u.matmul(&y_head))
}

/// Blocks plus right-hand side in one step; the combined form of the
/// reduced-row assembly.
pub fn assemble_reduced(
    factor: &LocalFactor,
    neighbor: &BoundaryBlocks,
    tilde_b: &DenseMat,
    y: &RhsBatch,
    y_prev_tail: &DenseMat,
    owner: usize,
) -> ReducedRow {
    let blocks = assemble_reduced_blocks(factor, neighbor);
    let bhat = assemble_reduced_rhs(factor, tilde_b, y, y_prev_tail);
    ReducedRow {
        blocks,
        bhat,
        owner,
    }
}

/// Back-substitute the interior once both interface solutions are known:
/// `x_i = y_i - S_i xt_i - R_i xt_{i+1}`.
pub fn back_substitute(
    factor: &LocalFactor,
    y: &RhsBatch,
    xt_own: &DenseMat,
    xt_next: &DenseMat,
) -> Result<RhsBatch> {
    if xt_own.rows() != factor.r || xt_next.rows() != factor.r {
        return Err(SolverError::MissingNeighborData {
            rank: 0,
            what: "interface solution of wrong height",
        });
    }
    let m = y.m();
    let mut x = y.clone();
    for i in 0..factor.n_i {
        let row = x.row_mut(i);
        for k in 0..factor.r {
            let sv = factor.s.at(i, k);
            if sv != 0.0 {
                for c in 0..m {
                    row[c] -= sv * xt_own[(k, c)];
                }
            }
            let rv = factor.r_panel.at(i, k);
            if rv != 0.0 {
                for c in 0..m {
                    row[c] -= rv * xt_next[(k, c)];
                }
            }
        }
    }
    Ok(x)
}

/// Single-rank factorization of a cyclic (or acyclic) banded matrix.
///
/// This is the `p = 1` limit of the partitioned algorithm run without a
/// communicator: the reduced system degenerates to one `r x r` equation
/// `(Lhat + Dhat + Uhat) xt = bhat` because both wrap couplings hit the
/// same interface. Used for rank-local solves along undecomposed axes.
#[derive(Debug, Clone)]
pub struct CyclicFactor {
    factor: LocalFactor,
    reduced: DenseMat,
    r: usize,
}

impl CyclicFactor {
    pub fn new(a: &BandedMatrix) -> Result<Self> {
        let layout = PartitionLayout::balanced(a.n(), 1, a.half_bandwidth(), a.cyclic())?;
        let blocks = split_matrix(a, &layout)?.pop().unwrap();
        let factor = factorize_local(&blocks)?;
        let rb = assemble_reduced_blocks(&factor, &factor.boundary());
        // Cyclic wrap folds both couplings onto the single interface; for
        // an acyclic matrix they are zero and this is just Dhat.
        let mut reduced = rb.dhat.clone();
        reduced.add_scaled(1.0, &rb.lhat);
        reduced.add_scaled(1.0, &rb.uhat);
        Ok(Self {
            factor,
            reduced,
            r: a.half_bandwidth(),
        })
    }

    pub fn solve(&self, rhs: &RhsBatch) -> Result<RhsBatch> {
        let (tilde_b, b) = split_rhs_chunk(rhs, self.r);
        let y = forward_rhs(&self.factor, &b)?;
        let y_tail = tail_rows(&y, self.r);
        let bhat = assemble_reduced_rhs(&self.factor, &tilde_b, &y, &y_tail);
        let xt = dense_solve(&self.reduced, &bhat)?;
        let x = back_substitute(&self.factor, &y, &xt, &xt)?;
        let mut out = RhsBatch::zeros(rhs.n(), rhs.m());
        for i in 0..self.r {
            out.row_mut(i).copy_from_slice(xt.row(i));
        }
        for i in 0..x.n() {
            out.row_mut(self.r + i).copy_from_slice(x.row(i));
        }
        Ok(out)
    }
}
