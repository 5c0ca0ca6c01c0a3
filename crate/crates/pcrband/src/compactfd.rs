//! Sixth-order compact finite-difference and interpolation operators on
//! periodic 3-D fields.
//!
//! Each operator is an implicit scheme: an explicit right-hand-side
//! stencil followed by a cyclic tridiagonal solve along the chosen axis,
//! batched over the two perpendicular axes. Three schemes are provided:
//!
//! * collocated first derivative, left-hand side `B[1/3, 1, 1/3]`;
//! * staggered first derivative, left-hand side `B[9/62, 1, 9/62]`;
//! * staggered interpolation, left-hand side `B[3/10, 1, 3/10]`.
//!
//! Staggered operators map between the collocated grid and the half-index
//! grid; the staggered point `i + 1/2` is stored at array index `i`, so
//! both families share one periodic extent. Fields are stored with the
//! third index contiguous. A field may be pencil-decomposed along one
//! axis; the banded solve then runs through the distributed machinery and
//! the stencil pulls a two-plane halo from the neighbor ranks.

use crate::banded::{BandedMatrix, RhsBatch};
use crate::error::{Result, SolverError};
use crate::partition::{CyclicFactor, PartitionLayout};
use crate::solver::RankSystem;
use crate::transport::{Communicator, Frame, Mode, RankId, Tag, World};

/// Direction of a staggered operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Staggering {
    /// Collocated input, staggered output.
    ToStaggered,
    /// Staggered input, collocated output.
    ToCollocated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    CollocatedD1_6,
    StaggeredD1_6(Staggering),
    StaggeredInterp6(Staggering),
}

/// A compact scheme: implicit left-hand-side weight `alpha` and explicit
/// right-hand-side coefficients `(a, b)` on grid spacing `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
    pub h: f64,
    pub periodic: bool,
}

impl SchemeSpec {
    /// Sixth-order collocated first derivative (Lele's tridiagonal
    /// scheme): alpha = 1/3, a = 14/9, b = 1/9.
    pub fn collocated_d1_6(h: f64) -> Self {
        Self {
            kind: SchemeKind::CollocatedD1_6,
            alpha: 1.0 / 3.0,
            a: 14.0 / 9.0,
            b: 1.0 / 9.0,
            h,
            periodic: true,
        }
    }

    /// Sixth-order staggered first derivative: alpha = 9/62, a = 63/62,
    /// b = 17/62.
    pub fn staggered_d1_6(h: f64, dir: Staggering) -> Self {
        Self {
            kind: SchemeKind::StaggeredD1_6(dir),
            alpha: 9.0 / 62.0,
            a: 63.0 / 62.0,
            b: 17.0 / 62.0,
            h,
            periodic: true,
        }
    }

    /// Sixth-order staggered interpolation: alpha = 3/10, a = 3/2,
    /// b = 1/10.
    pub fn staggered_interp_6(dir: Staggering) -> Self {
        Self {
            kind: SchemeKind::StaggeredInterp6(dir),
            alpha: 3.0 / 10.0,
            a: 3.0 / 2.0,
            b: 1.0 / 10.0,
            h: 1.0,
            periodic: true,
        }
    }

    /// The scheme's implicit left-hand side: cyclic tridiagonal with
    /// `alpha` off the diagonal.
    pub fn build_lhs(&self, n: usize) -> Result<BandedMatrix> {
        if n < 5 {
            return Err(SolverError::DimensionMismatch {
                context: "compact scheme extent",
                expected: 5,
                got: n,
            });
        }
        BandedMatrix::uniform(n, true, &[self.alpha, 1.0, self.alpha])
    }

    /// The stencil as two weighted pairs `w * (f[hi] op f[lo])`, with
    /// `op` subtraction for derivatives and addition for interpolation.
    /// Evaluating pairwise keeps derivatives of constant fields exactly
    /// zero in floating point.
    fn pairs(&self) -> ([(f64, isize, isize); 2], bool) {
        let (a, b, h) = (self.a, self.b, self.h);
        match self.kind {
            SchemeKind::CollocatedD1_6 => ([(a / (2.0 * h), 1, -1), (b / (4.0 * h), 2, -2)], true),
            SchemeKind::StaggeredD1_6(Staggering::ToStaggered) => {
                ([(a / h, 1, 0), (b / (3.0 * h), 2, -1)], true)
            }
            SchemeKind::StaggeredD1_6(Staggering::ToCollocated) => {
                ([(a / h, 0, -1), (b / (3.0 * h), 1, -2)], true)
            }
            SchemeKind::StaggeredInterp6(Staggering::ToStaggered) => {
                ([(a / 2.0, 1, 0), (b / 2.0, 2, -1)], false)
            }
            SchemeKind::StaggeredInterp6(Staggering::ToCollocated) => {
                ([(a / 2.0, 0, -1), (b / 2.0, 1, -2)], false)
            }
        }
    }
}

/// A 3-D scalar field on a structured grid; the third index is
/// contiguous in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    n: [usize; 3],
    data: Vec<f64>,
}

impl Field3 {
    pub fn zeros(n: [usize; 3]) -> Self {
        Self {
            n,
            data: vec![0.0; n[0] * n[1] * n[2]],
        }
    }

    pub fn from_fn(n: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(n);
        for i0 in 0..n[0] {
            for i1 in 0..n[1] {
                for i2 in 0..n[2] {
                    out.data[(i0 * n[1] + i1) * n[2] + i2] = f(i0, i1, i2);
                }
            }
        }
        out
    }

    pub fn dims(&self) -> [usize; 3] {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, i0: usize, i1: usize, i2: usize) -> usize {
        (i0 * self.n[1] + i1) * self.n[2] + i2
    }

    #[inline]
    pub fn at(&self, i0: usize, i1: usize, i2: usize) -> f64 {
        self.data[self.idx(i0, i1, i2)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field3) -> f64 {
        assert_eq!(self.n, other.n);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Pointwise combination into a new field.
    pub fn zip_with(&self, other: &Field3, mut f: impl FnMut(f64, f64) -> f64) -> Field3 {
        assert_eq!(self.n, other.n);
        Field3 {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Field3 {
        Field3 {
            n: self.n,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Field3) {
        assert_eq!(self.n, other.n);
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += c * s;
        }
    }

    /// Reorder so the given axis becomes the row index of a batch, the
    /// remaining axes flattened as the batch dimension.
    pub fn to_batch(&self, axis: usize) -> RhsBatch {
        let n = self.n;
        let rows = n[axis];
        let m = n[0] * n[1] * n[2] / rows;
        let mut out = RhsBatch::zeros(rows, m);
        match axis {
            0 => {
                for i0 in 0..rows {
                    out.row_mut(i0)
                        .copy_from_slice(&self.data[i0 * m..(i0 + 1) * m]);
                }
            }
            1 => {
                for i1 in 0..rows {
                    let row = out.row_mut(i1);
                    for i0 in 0..n[0] {
                        for i2 in 0..n[2] {
                            row[i0 * n[2] + i2] = self.data[(i0 * n[1] + i1) * n[2] + i2];
                        }
                    }
                }
            }
            2 => {
                for i2 in 0..rows {
                    let row = out.row_mut(i2);
                    for i0 in 0..n[0] {
                        for i1 in 0..n[1] {
                            row[i0 * n[1] + i1] = self.data[(i0 * n[1] + i1) * n[2] + i2];
                        }
                    }
                }
            }
            _ => panic!("axis out of range"),
        }
        out
    }

    /// Inverse of [`Field3::to_batch`].
    pub fn from_batch(batch: &RhsBatch, n: [usize; 3], axis: usize) -> Field3 {
        let mut out = Field3::zeros(n);
        match axis {
            0 => {
                let m = batch.m();
                for i0 in 0..n[0] {
                    out.data[i0 * m..(i0 + 1) * m].copy_from_slice(batch.row(i0));
                }
            }
            1 => {
                for i1 in 0..n[1] {
                    let row = batch.row(i1);
                    for i0 in 0..n[0] {
                        for i2 in 0..n[2] {
                            out.data[(i0 * n[1] + i1) * n[2] + i2] = row[i0 * n[2] + i2];
                        }
                    }
                }
            }
            2 => {
                for i2 in 0..n[2] {
                    let row = batch.row(i2);
                    for i0 in 0..n[0] {
                        for i1 in 0..n[1] {
                            out.data[(i0 * n[1] + i1) * n[2] + i2] = row[i0 * n[1] + i1];
                        }
                    }
                }
            }
            _ => panic!("axis out of range"),
        }
        out
    }

    /// Copy of plane `i` along `axis`, flattened over the other two axes.
    fn plane(&self, axis: usize, i: usize) -> Vec<f64> {
        let n = self.n;
        match axis {
            0 => self.data[i * n[1] * n[2]..(i + 1) * n[1] * n[2]].to_vec(),
            1 => {
                let mut out = Vec::with_capacity(n[0] * n[2]);
                for i0 in 0..n[0] {
                    let base = (i0 * n[1] + i) * n[2];
                    out.extend_from_slice(&self.data[base..base + n[2]]);
                }
                out
            }
            2 => {
                let mut out = Vec::with_capacity(n[0] * n[1]);
                for i0 in 0..n[0] {
                    for i1 in 0..n[1] {
                        out.push(self.data[(i0 * n[1] + i1) * n[2] + i]);
                    }
                }
                out
            }
            _ => panic!("axis out of range"),
        }
    }
}

/// Apply the explicit right-hand-side stencil along a periodic axis of a
/// single-rank field.
pub fn apply_rhs(spec: &SchemeSpec, field: &Field3, axis: usize) -> Result<Field3> {
    if axis > 2 {
        return Err(SolverError::DimensionMismatch {
            context: "apply_rhs: axis",
            expected: 2,
            got: axis,
        });
    }
    let n = field.n[axis];
    let (pairs, diff) = spec.pairs();
    let batch = field.to_batch(axis);
    let m = batch.m();
    let mut out = RhsBatch::zeros(n, m);
    let wrap = |i: usize, off: isize| ((i as isize + off).rem_euclid(n as isize)) as usize;
    for i in 0..n {
        let dst = out.row_mut(i);
        for &(w, hi, lo) in &pairs {
            let src_hi = batch.row(wrap(i, hi));
            let src_lo = batch.row(wrap(i, lo));
            if diff {
                for (d, (x, y)) in dst.iter_mut().zip(src_hi.iter().zip(src_lo)) {
                    *d += w * (x - y);
                }
            } else {
                for (d, (x, y)) in dst.iter_mut().zip(src_hi.iter().zip(src_lo)) {
                    *d += w * (x + y);
                }
            }
        }
    }
    Ok(Field3::from_batch(&out, field.n, axis))
}

/// A compact operator factored for rank-local application along any axis
/// of the given extent.
#[derive(Debug, Clone)]
pub struct CompactOp {
    spec: SchemeSpec,
    n: usize,
    factor: CyclicFactor,
}

impl CompactOp {
    pub fn new(spec: SchemeSpec, n: usize) -> Result<Self> {
        let lhs = spec.build_lhs(n)?;
        Ok(Self {
            spec,
            n,
            factor: CyclicFactor::new(&lhs)?,
        })
    }

    pub fn spec(&self) -> &SchemeSpec {
        &self.spec
    }

    /// Stencil plus implicit solve along `axis`.
    pub fn apply(&self, field: &Field3, axis: usize) -> Result<Field3> {
        if field.n[axis] != self.n {
            return Err(SolverError::DimensionMismatch {
                context: "compact apply: axis extent",
                expected: self.n,
                got: field.n[axis],
            });
        }
        let rhs = apply_rhs(&self.spec, field, axis)?;
        let x = self.factor.solve(&rhs.to_batch(axis))?;
        Ok(Field3::from_batch(&x, field.n, axis))
    }
}

const TAG_HALO_DOWN: Tag = 0x20;
const TAG_HALO_UP: Tag = 0x21;

/// Two-plane halos from both neighbors along the decomposed axis.
pub struct Halo {
    /// Planes `[-2, -1]` below the chunk.
    pub lo: [Vec<f64>; 2],
    /// Planes `[len, len + 1]` above the chunk.
    pub hi: [Vec<f64>; 2],
}

/// Exchange two boundary planes with both neighbors along `axis`
/// (periodic). Collective over the world.
pub fn exchange_halo(comm: &Communicator, chunk: &Field3, axis: usize) -> Result<Halo> {
    let p = comm.world_size();
    let me = comm.rank().0;
    let next = RankId((me + 1) % p);
    let prev = RankId((me + p - 1) % p);
    let len = chunk.n[axis];
    let plane_len = chunk.data.len() / len;

    // Low planes travel to the previous rank, high planes to the next.
    let mut low = chunk.plane(axis, 0);
    low.extend(chunk.plane(axis, 1));
    comm.send(prev, TAG_HALO_DOWN, Frame::new(2, plane_len, low))?;
    let mut high = chunk.plane(axis, len - 2);
    high.extend(chunk.plane(axis, len - 1));
    comm.send(next, TAG_HALO_UP, Frame::new(2, plane_len, high))?;

    let from_prev = comm.recv(prev, TAG_HALO_UP)?;
    let from_next = comm.recv(next, TAG_HALO_DOWN)?;
    let split = |f: Frame| -> [Vec<f64>; 2] {
        let (a, b) = f.data.split_at(plane_len);
        [a.to_vec(), b.to_vec()]
    };
    Ok(Halo {
        lo: split(from_prev),
        hi: split(from_next),
    })
}

/// Stencil application on a decomposed chunk, reading neighbor planes
/// from the halo. Offsets and batch layout match [`apply_rhs`].
pub fn apply_rhs_chunk(
    spec: &SchemeSpec,
    chunk: &Field3,
    halo: &Halo,
    axis: usize,
) -> Result<Field3> {
    let n = chunk.n[axis];
    let (pairs, diff) = spec.pairs();
    let batch = chunk.to_batch(axis);
    let m = batch.m();
    let mut out = RhsBatch::zeros(n, m);
    let pick = |j: isize| -> &[f64] {
        if j < 0 {
            &halo.lo[(j + 2) as usize]
        } else if j >= n as isize {
            &halo.hi[(j - n as isize) as usize]
        } else {
            batch.row(j as usize)
        }
    };
    for i in 0..n {
        for &(w, hi, lo) in &pairs {
            let src_hi = pick(i as isize + hi);
            let src_lo = pick(i as isize + lo);
            let dst = out.row_mut(i);
            if diff {
                for (d, (x, y)) in dst.iter_mut().zip(src_hi.iter().zip(src_lo)) {
                    *d += w * (x - y);
                }
            } else {
                for (d, (x, y)) in dst.iter_mut().zip(src_hi.iter().zip(src_lo)) {
                    *d += w * (x + y);
                }
            }
        }
    }
    Ok(Field3::from_batch(&out, chunk.n, axis))
}

/// A compact operator whose solve axis is decomposed across the world.
pub struct DistCompactOp {
    spec: SchemeSpec,
    axis: usize,
    sys: RankSystem,
}

impl DistCompactOp {
    /// Collective: factor the distributed left-hand side for a global
    /// extent of `n_global` along `axis`.
    pub fn build(
        comm: &Communicator,
        spec: SchemeSpec,
        n_global: usize,
        axis: usize,
        layout: &PartitionLayout,
    ) -> Result<Self> {
        let lhs = spec.build_lhs(n_global)?;
        Ok(Self {
            spec,
            axis,
            sys: RankSystem::build(comm, &lhs, layout)?,
        })
    }

    /// Collective stencil + solve on this rank's chunk.
    pub fn apply(&self, comm: &Communicator, chunk: &Field3) -> Result<Field3> {
        let halo = exchange_halo(comm, chunk, self.axis)?;
        let rhs = apply_rhs_chunk(&self.spec, chunk, &halo, self.axis)?;
        let (x, _) = self.sys.solve(comm, &rhs.to_batch(self.axis))?;
        Ok(Field3::from_batch(&x, chunk.n, self.axis))
    }
}

/// Slice a global field into per-rank chunks along `axis`.
pub fn split_field(field: &Field3, axis: usize, layout: &PartitionLayout) -> Vec<Field3> {
    let batch = field.to_batch(axis);
    (0..layout.ranks())
        .map(|rank| {
            let t = layout.offset(rank);
            let c = layout.chunk(rank);
            let mut dims = field.n;
            dims[axis] = c;
            let mut local = RhsBatch::zeros(c, batch.m());
            for i in 0..c {
                local.row_mut(i).copy_from_slice(batch.row(t + i));
            }
            Field3::from_batch(&local, dims, axis)
        })
        .collect()
}

/// Reassemble rank chunks into a global field.
pub fn join_field(chunks: &[Field3], axis: usize, layout: &PartitionLayout) -> Field3 {
    let mut dims = chunks[0].n;
    dims[axis] = layout.total();
    let m: usize = dims.iter().product::<usize>() / dims[axis];
    let mut batch = RhsBatch::zeros(dims[axis], m);
    for (rank, chunk) in chunks.iter().enumerate() {
        let t = layout.offset(rank);
        let local = chunk.to_batch(axis);
        for i in 0..local.n() {
            batch.row_mut(t + i).copy_from_slice(local.row(i));
        }
    }
    Field3::from_batch(&batch, dims, axis)
}

/// Whole-field application across `p` simulated ranks decomposed along
/// `axis`: split, run a world, join. Single-rank callers take the same
/// code path with self-communication.
pub fn apply_distributed(
    spec: &SchemeSpec,
    field: &Field3,
    axis: usize,
    p: usize,
    mode: Mode,
) -> Result<Field3> {
    let n = field.n[axis];
    let layout = PartitionLayout::balanced(n, p, 1, true)?;
    let chunks = split_field(field, axis, &layout);
    let spec = *spec;
    let layout_ref = &layout;
    let chunks_ref = &chunks;
    let run = World::run(p, mode, move |comm| {
        let op = DistCompactOp::build(comm, spec, n, axis, layout_ref)?;
        op.apply(comm, &chunks_ref[comm.rank().0])
    })?;
    Ok(join_field(&run.results, axis, &layout))
}

/// Compact derivative of a pencil-decomposed field along `axis`.
pub fn derivative(
    field: &Field3,
    axis: usize,
    spec: &SchemeSpec,
    p: usize,
    mode: Mode,
) -> Result<Field3> {
    apply_distributed(spec, field, axis, p, mode)
}
