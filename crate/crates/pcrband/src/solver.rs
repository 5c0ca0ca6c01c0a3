//! Whole-system driver: factor once per rank, exchange the sparse
//! boundaries, solve the reduced interface system collectively, and back
//! substitute. Each rank touches only its own chunk of the right-hand
//! side; the left-hand side is replicated (it is a band description, not
//! field data).

use crate::banded::{BandedMatrix, RhsBatch};
use crate::dense::DenseMat;
use crate::error::{Result, SolverError};
use crate::partition::{
    assemble_reduced_blocks, assemble_reduced_rhs, back_substitute, factorize_local, forward_rhs,
    split_rank, split_rhs_chunk, tail_rows, BoundaryBlocks, LocalFactor, PartitionLayout,
};
use crate::reduced::{build_schedule, solve_reduced, DetachSchedule, ReducedRow};
use crate::transport::{Communicator, Counters, Frame, Mode, RankId, Tag, TraceEvent, World};

const TAG_SR_BOUNDARY: Tag = 0x10;
const TAG_Y_BOUNDARY: Tag = 0x11;
const TAG_XT_NEXT: Tag = 0x12;

/// One rank's pre-factorized view of a distributed banded system. Build it
/// once, then solve any number of right-hand sides against it.
pub struct RankSystem {
    rank: usize,
    layout: PartitionLayout,
    schedule: DetachSchedule,
    factor: LocalFactor,
    reduced: crate::reduced::ReducedBlocks,
    /// Measured bytes this rank sent for the S/R boundary exchange.
    pub boundary_bytes_sent: u64,
}

/// Per-solve measurements a rank reports back.
#[derive(Debug, Clone, Copy, Default)]
pub struct RankSolveStats {
    /// Bytes sent for the y-boundary exchange of this solve.
    pub y_boundary_bytes_sent: u64,
}

impl RankSystem {
    /// Split, factorize and exchange boundary caches. Collective: every
    /// rank of the world must call it with the same matrix and layout.
    pub fn build(comm: &Communicator, a: &BandedMatrix, layout: &PartitionLayout) -> Result<Self> {
        let rank = comm.rank().0;
        let blocks = split_rank(a, layout, rank)?;
        let factor = factorize_local(&blocks)?;
        let r = factor.half_bandwidth();

        // Only the last r rows of S and R ever cross the rank boundary.
        let own = factor.boundary();
        let mut data = Vec::with_capacity(2 * r * r);
        data.extend_from_slice(own.s_tail.data());
        data.extend_from_slice(own.r_tail.data());
        let before = comm.counters().bytes_sent;
        comm.send(
            RankId(layout.next(rank)),
            TAG_SR_BOUNDARY,
            Frame::new(r, 2 * r, data),
        )?;
        let boundary_bytes_sent = comm.counters().bytes_sent - before;
        let f = comm.recv(RankId(layout.prev(rank)), TAG_SR_BOUNDARY)?;
        let neighbor = BoundaryBlocks {
            s_tail: DenseMat::from_vec(r, r, f.data[..r * r].to_vec()),
            r_tail: DenseMat::from_vec(r, r, f.data[r * r..].to_vec()),
        };
        let reduced = assemble_reduced_blocks(&factor, &neighbor);
        Ok(Self {
            rank,
            layout: layout.clone(),
            schedule: build_schedule(layout.ranks(), layout.cyclic()),
            factor,
            reduced,
            boundary_bytes_sent,
        })
    }

    pub fn schedule(&self) -> &DetachSchedule {
        &self.schedule
    }

    /// Solve for this rank's chunk of the right-hand side (interface rows
    /// first). Collective; returns the rank's chunk of the solution.
    pub fn solve(
        &self,
        comm: &Communicator,
        chunk: &RhsBatch,
    ) -> Result<(RhsBatch, RankSolveStats)> {
        let r = self.factor.half_bandwidth();
        if chunk.n() != self.layout.chunk(self.rank) {
            return Err(SolverError::DimensionMismatch {
                context: "rank solve: chunk rows",
                expected: self.layout.chunk(self.rank),
                got: chunk.n(),
            });
        }
        let m = chunk.m();
        let (tilde_b, b) = split_rhs_chunk(chunk, r);
        let y = forward_rhs(&self.factor, &b)?;

        let y_tail = tail_rows(&y, r);
        let before = comm.counters().bytes_sent;
        comm.send(
            RankId(self.layout.next(self.rank)),
            TAG_Y_BOUNDARY,
            Frame::new(r, m, y_tail.data().to_vec()),
        )?;
        let stats = RankSolveStats {
            y_boundary_bytes_sent: comm.counters().bytes_sent - before,
        };
        let f = comm.recv(RankId(self.layout.prev(self.rank)), TAG_Y_BOUNDARY)?;
        let y_prev_tail = DenseMat::from_vec(r, m, f.data);

        let bhat = assemble_reduced_rhs(&self.factor, &tilde_b, &y, &y_prev_tail);
        let row = ReducedRow {
            blocks: self.reduced.clone(),
            bhat,
            owner: self.rank,
        };
        let xt = solve_reduced(comm, row, &self.schedule)?;

        // The next rank's interface closes this rank's interior.
        comm.send(
            RankId(self.layout.prev(self.rank)),
            TAG_XT_NEXT,
            Frame::new(r, m, xt.data().to_vec()),
        )?;
        let f = comm.recv(RankId(self.layout.next(self.rank)), TAG_XT_NEXT)?;
        let xt_next = DenseMat::from_vec(r, m, f.data);

        let x = back_substitute(&self.factor, &y, &xt, &xt_next)?;
        let mut out = RhsBatch::zeros(chunk.n(), m);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(xt.row(i));
        }
        for i in 0..x.n() {
            out.row_mut(r + i).copy_from_slice(x.row(i));
        }
        Ok((out, stats))
    }
}

/// Result of a whole-system distributed solve.
pub struct GlobalSolve {
    pub x: RhsBatch,
    pub counters: Vec<Counters>,
    pub trace: Vec<TraceEvent>,
    pub schedule: DetachSchedule,
    /// Per rank: measured boundary bytes (S/R plus y) sent toward the next
    /// rank during factorization and right-hand-side assembly.
    pub assembly_bytes_sent: Vec<u64>,
}

/// Solve `A x = b` on `p` simulated ranks with balanced partitioning.
pub fn solve(a: &BandedMatrix, b: &RhsBatch, p: usize, mode: Mode) -> Result<GlobalSolve> {
    let layout = PartitionLayout::balanced(a.n(), p, a.half_bandwidth(), a.cyclic())?;
    let schedule = build_schedule(p, a.cyclic());
    let layout_ref = &layout;
    let run = World::run(p, mode, move |comm| {
        let rank = comm.rank().0;
        let sys = RankSystem::build(comm, a, layout_ref)?;
        let t = layout_ref.offset(rank);
        let chunk = b.slice_rows(t, t + layout_ref.chunk(rank));
        let (x, stats) = sys.solve(comm, &chunk)?;
        Ok((x, sys.boundary_bytes_sent + stats.y_boundary_bytes_sent))
    })?;

    let mut x = RhsBatch::zeros(a.n(), b.m());
    let mut assembly = Vec::with_capacity(p);
    for (rank, (chunk, bytes)) in run.results.into_iter().enumerate() {
        let t = layout.offset(rank);
        for i in 0..chunk.n() {
            x.row_mut(t + i).copy_from_slice(chunk.row(i));
        }
        assembly.push(bytes);
    }
    Ok(GlobalSolve {
        x,
        counters: run.counters,
        trace: run.trace,
        schedule,
        assembly_bytes_sent: assembly,
    })
}
