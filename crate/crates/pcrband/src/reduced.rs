//! Distributed solve of the reduced block-tridiagonal interface system by
//! block PCR, with detach/reattach stages for arbitrary rank counts.
//!
//! Every rank owns one row of `r x r` blocks `(Lhat, Dhat, Uhat)` and an
//! `r x m` right-hand side. A PCR step eliminates against both neighbors,
//! doubling the coupling distance; a cyclic system of even dimension splits
//! into two cyclic halves. Odd-dimension cyclic sub-systems first detach
//! their last row: that row eliminates the upper block of its predecessor
//! and the lower block of the sub-system's first row, whose lower coupling
//! wraps to the new last row. Detached rows are solved afterwards by back
//! substitution (reattach) in reverse detach order.
//!
//! For cyclic systems of dimension `p` this costs `floor(log2 p)` PCR
//! stages, detaches `p - 2^floor(log2 p)` rows, and runs
//! `sum_n(floor(p/2^n) mod 2) - 1` detach stages (and as many reattach
//! stages). Acyclic systems need no detaching and `ceil(log2 p)` stages.

use crate::dense::{dense_inverse, dense_solve, DenseMat};
use crate::error::{Result, SolverError};
use crate::transport::{Communicator, Frame, RankId, Tag};

/// The r x r coefficient blocks of one reduced row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBlocks {
    pub lhat: DenseMat,
    pub dhat: DenseMat,
    pub uhat: DenseMat,
}

/// One rank's row of the reduced interface system.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRow {
    pub blocks: ReducedBlocks,
    /// r x m right-hand side.
    pub bhat: DenseMat,
    pub owner: usize,
}

impl ReducedRow {
    pub fn block_size(&self) -> usize {
        self.blocks.dhat.rows()
    }
}

/// A detached row: the blocks it held at detach time plus the two rows its
/// solution couples to.
#[derive(Debug, Clone)]
pub struct DetachedRow {
    pub row: ReducedRow,
    pub left: usize,
    pub right: usize,
}

/// One detach triple: `row` eliminates into its predecessor `left` and the
/// first row `right` of its sub-system, then leaves the system.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachInfo {
    pub row: usize,
    pub left: usize,
    pub right: usize,
}

/// One active row's partners in a PCR stage. `left == right` happens in
/// two-row cyclic sub-systems, where both wrap couplings meet the same
/// partner and the eliminated couplings fold back onto the diagonal
/// (`fold`). Absent partners mark acyclic boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct PcrRole {
    pub row: usize,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub fold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Detach {
        level: usize,
        detaches: Vec<DetachInfo>,
    },
    Pcr {
        level: usize,
        roles: Vec<PcrRole>,
    },
    Reattach {
        level: usize,
        detaches: Vec<DetachInfo>,
    },
}

/// The precomputed level structure of PCR and detach/reattach stages for a
/// given rank count.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachSchedule {
    pub p: usize,
    pub cyclic: bool,
    pub stages: Vec<Stage>,
    pub pcr_stages: usize,
    pub detach_stages: usize,
    pub detached_rows: usize,
}

/// A sub-system at some level: rows `offset + k*stride` for `k < len`.
#[derive(Debug, Clone, Copy)]
struct SubSystem {
    offset: usize,
    stride: usize,
    len: usize,
}

impl SubSystem {
    fn member(&self, k: usize) -> usize {
        self.offset + k * self.stride
    }
}

/// Build the stage schedule for `p` ranks.
pub fn build_schedule(p: usize, cyclic: bool) -> DetachSchedule {
    assert!(p >= 1);
    let mut stages = Vec::new();
    let mut detach_levels: Vec<Stage> = Vec::new();
    let mut subs = vec![SubSystem {
        offset: 0,
        stride: 1,
        len: p,
    }];
    let mut level = 0usize;
    let mut pcr_stages = 0usize;
    let mut detached_rows = 0usize;

    while subs.iter().any(|s| s.len > 1) {
        if cyclic && subs[0].len % 2 == 1 && subs[0].len > 1 {
            // All cyclic sub-systems at a level share one dimension; each
            // detaches its last member.
            let detaches: Vec<DetachInfo> = subs
                .iter()
                .map(|s| DetachInfo {
                    row: s.member(s.len - 1),
                    left: s.member(s.len - 2),
                    right: s.member(0),
                })
                .collect();
            detached_rows += detaches.len();
            stages.push(Stage::Detach {
                level,
                detaches: detaches.clone(),
            });
            detach_levels.push(Stage::Reattach { level, detaches });
            for s in &mut subs {
                s.len -= 1;
            }
        }

        let mut roles = Vec::new();
        for s in &subs {
            if s.len == 1 {
                // Lone acyclic row: participates with no partners.
                roles.push(PcrRole {
                    row: s.member(0),
                    left: None,
                    right: None,
                    fold: false,
                });
                continue;
            }
            for k in 0..s.len {
                let (left, right) = if cyclic {
                    (
                        Some(s.member((k + s.len - 1) % s.len)),
                        Some(s.member((k + 1) % s.len)),
                    )
                } else {
                    (
                        k.checked_sub(1).map(|j| s.member(j)),
                        (k + 1 < s.len).then(|| s.member(k + 1)),
                    )
                };
                roles.push(PcrRole {
                    row: s.member(k),
                    left,
                    right,
                    fold: cyclic && s.len == 2,
                });
            }
        }
        stages.push(Stage::Pcr { level, roles });
        pcr_stages += 1;

        subs = subs
            .iter()
            .flat_map(|s| {
                let even = SubSystem {
                    offset: s.offset,
                    stride: s.stride * 2,
                    len: s.len - s.len / 2,
                };
                let odd = SubSystem {
                    offset: s.offset + s.stride,
                    stride: s.stride * 2,
                    len: s.len / 2,
                };
                [even, odd].into_iter().filter(|c| c.len > 0)
            })
            .collect();
        level += 1;
    }

    let detach_stages = detach_levels.len();
    // Reattach in reverse detach order: innermost first.
    stages.extend(detach_levels.into_iter().rev());
    DetachSchedule {
        p,
        cyclic,
        stages,
        pcr_stages,
        detach_stages,
        detached_rows,
    }
}

fn singular(ctx: &str, owner: usize) -> impl Fn(SolverError) -> SolverError + '_ {
    move |e| match e {
        SolverError::SingularPivot { index, .. } => SolverError::SingularPivot {
            context: format!("{ctx} (reduced row {owner})"),
            index,
        },
        other => other,
    }
}

/// One block PCR elimination of `row` against its neighbors at the current
/// distance. With `fold` set (two-row cyclic sub-system, `left == right`)
/// the new couplings land on the row itself and are folded into the
/// diagonal, leaving the row decoupled.
pub fn block_pcr_step(
    row: &ReducedRow,
    left: Option<&ReducedRow>,
    right: Option<&ReducedRow>,
    fold: bool,
) -> Result<ReducedRow> {
    let r = row.block_size();
    let zero = DenseMat::zeros(r, r);
    let mut dhat = row.blocks.dhat.clone();
    let mut bhat = row.bhat.clone();
    let mut lhat = zero.clone();
    let mut uhat = zero.clone();

    if let Some(l) = left {
        let g = row.blocks.lhat.matmul(
            &dense_inverse(&l.blocks.dhat).map_err(singular("pcr left neighbor", row.owner))?,
        );
        dhat = dhat.sub(&g.matmul(&l.blocks.uhat));
        bhat = bhat.sub(&g.matmul(&l.bhat));
        lhat = g.matmul(&l.blocks.lhat).scaled(-1.0);
    }
    if let Some(rr) = right {
        let g = row.blocks.uhat.matmul(
            &dense_inverse(&rr.blocks.dhat).map_err(singular("pcr right neighbor", row.owner))?,
        );
        dhat = dhat.sub(&g.matmul(&rr.blocks.lhat));
        bhat = bhat.sub(&g.matmul(&rr.bhat));
        uhat = g.matmul(&rr.blocks.uhat).scaled(-1.0);
    }
    if fold {
        dhat.add_scaled(1.0, &lhat);
        dhat.add_scaled(1.0, &uhat);
        lhat = zero.clone();
        uhat = zero;
    }
    Ok(ReducedRow {
        blocks: ReducedBlocks { lhat, dhat, uhat },
        bhat,
        owner: row.owner,
    })
}

/// Update of the detached row's predecessor: its upper coupling to the
/// detached row is eliminated and re-targets the sub-system's first row.
pub fn detach_update_prev(row: &ReducedRow, detached: &ReducedRow) -> Result<ReducedRow> {
    let g = row
        .blocks
        .uhat
        .matmul(&dense_inverse(&detached.blocks.dhat).map_err(singular("detach", detached.owner))?);
    Ok(ReducedRow {
        blocks: ReducedBlocks {
            lhat: row.blocks.lhat.clone(),
            dhat: row.blocks.dhat.sub(&g.matmul(&detached.blocks.lhat)),
            uhat: g.matmul(&detached.blocks.uhat).scaled(-1.0),
        },
        bhat: row.bhat.sub(&g.matmul(&detached.bhat)),
        owner: row.owner,
    })
}

/// Update of the sub-system's first row: its lower (wrap) coupling to the
/// detached row is eliminated; the replacement lower block lands in the
/// last column of the shrunk sub-system.
pub fn detach_update_first(row: &ReducedRow, detached: &ReducedRow) -> Result<ReducedRow> {
    let g = row
        .blocks
        .lhat
        .matmul(&dense_inverse(&detached.blocks.dhat).map_err(singular("detach", detached.owner))?);
    Ok(ReducedRow {
        blocks: ReducedBlocks {
            lhat: g.matmul(&detached.blocks.lhat).scaled(-1.0),
            dhat: row.blocks.dhat.sub(&g.matmul(&detached.blocks.uhat)),
            uhat: row.blocks.uhat.clone(),
        },
        bhat: row.bhat.sub(&g.matmul(&detached.bhat)),
        owner: row.owner,
    })
}

/// Detach the last row of one odd-dimension cyclic sub-system given in
/// member order. Returns the shrunk sub-system and the detached record.
pub fn detach_step(rows: &[ReducedRow]) -> Result<(Vec<ReducedRow>, DetachedRow)> {
    let m = rows.len();
    assert!(m >= 3 && m % 2 == 1, "detach needs odd dimension >= 3");
    let d = rows[m - 1].clone();
    let mut out = rows[..m - 1].to_vec();
    out[m - 2] = detach_update_prev(&out[m - 2], &d)?;
    out[0] = detach_update_first(&out[0], &d)?;
    Ok((
        out,
        DetachedRow {
            left: rows[m - 2].owner,
            right: rows[0].owner,
            row: d,
        },
    ))
}

/// Solve a detached row by back substitution once its two coupled
/// solutions are known.
pub fn reattach_step(
    record: &DetachedRow,
    x_left: &DenseMat,
    x_right: &DenseMat,
) -> Result<DenseMat> {
    let rhs = record
        .row
        .bhat
        .sub(&record.row.blocks.lhat.matmul(x_left))
        .sub(&record.row.blocks.uhat.matmul(x_right));
    dense_solve(&record.row.blocks.dhat, &rhs).map_err(singular("reattach", record.row.owner))
}

/// Direct solve of a fully decoupled row; the wrap couplings (zero after
/// the final fold, or the genuine self-couplings of a one-rank cyclic
/// system) are added onto the diagonal.
fn direct_solve(row: &ReducedRow) -> Result<DenseMat> {
    let mut a = row.blocks.dhat.clone();
    a.add_scaled(1.0, &row.blocks.lhat);
    a.add_scaled(1.0, &row.blocks.uhat);
    dense_solve(&a, &row.bhat).map_err(singular("direct", row.owner))
}

fn pack_row(row: &ReducedRow) -> Frame {
    let r = row.block_size();
    let m = row.bhat.cols();
    let mut data = Vec::with_capacity(r * (3 * r + m));
    for i in 0..r {
        data.extend_from_slice(row.blocks.lhat.row(i));
        data.extend_from_slice(row.blocks.dhat.row(i));
        data.extend_from_slice(row.blocks.uhat.row(i));
        data.extend_from_slice(row.bhat.row(i));
    }
    Frame::new(r, 3 * r + m, data)
}

fn unpack_row(frame: &Frame, owner: usize) -> ReducedRow {
    let r = frame.rows;
    let m = frame.cols - 3 * r;
    let mut lhat = DenseMat::zeros(r, r);
    let mut dhat = DenseMat::zeros(r, r);
    let mut uhat = DenseMat::zeros(r, r);
    let mut bhat = DenseMat::zeros(r, m);
    for i in 0..r {
        let base = i * frame.cols;
        lhat.row_mut(i).copy_from_slice(&frame.data[base..base + r]);
        dhat.row_mut(i)
            .copy_from_slice(&frame.data[base + r..base + 2 * r]);
        uhat.row_mut(i)
            .copy_from_slice(&frame.data[base + 2 * r..base + 3 * r]);
        bhat.row_mut(i)
            .copy_from_slice(&frame.data[base + 3 * r..base + 3 * r + m]);
    }
    ReducedRow {
        blocks: ReducedBlocks { lhat, dhat, uhat },
        bhat,
        owner,
    }
}

fn pack_mat(m: &DenseMat) -> Frame {
    Frame::new(m.rows(), m.cols(), m.data().to_vec())
}

fn unpack_mat(frame: &Frame) -> DenseMat {
    DenseMat::from_vec(frame.rows, frame.cols, frame.data.clone())
}

/// Message tags of the reduced-system executor, one base per purpose with
/// the stage level added; public so instrumentation can classify traffic.
pub mod tags {
    use crate::transport::Tag;

    pub const PCR: Tag = 0x100;
    pub const DETACH_PREV: Tag = 0x200;
    pub const DETACH_FIRST: Tag = 0x300;
    pub const REATTACH_LEFT: Tag = 0x400;
    pub const REATTACH_RIGHT: Tag = 0x500;

    pub fn is_pcr(tag: Tag) -> bool {
        (PCR..DETACH_PREV).contains(&tag)
    }

    /// Matches exactly one send per detached row.
    pub fn is_detach_prev(tag: Tag) -> bool {
        (DETACH_PREV..DETACH_FIRST).contains(&tag)
    }

    pub fn pcr_level(tag: Tag) -> usize {
        (tag - PCR) as usize
    }
}

use tags::{
    DETACH_FIRST as TAG_DETACH_FIRST, DETACH_PREV as TAG_DETACH_PREV, PCR as TAG_PCR,
    REATTACH_LEFT as TAG_REATTACH_LEFT, REATTACH_RIGHT as TAG_REATTACH_RIGHT,
};

fn stage_tag(base: Tag, level: usize) -> Tag {
    base + level as Tag
}

/// Collective distributed solve of the reduced system. Every rank calls
/// with its own row and the shared schedule; returns this rank's `r x m`
/// interface solution. Communication stages are delimited with labeled
/// barriers so the instrumentation counters can be checked against the
/// schedule totals.
pub fn solve_reduced(
    comm: &Communicator,
    row: ReducedRow,
    schedule: &DetachSchedule,
) -> Result<DenseMat> {
    let my = comm.rank().0;
    debug_assert_eq!(row.owner, my);
    let mut row = row;
    let mut detached: Option<DetachedRow> = None;
    let mut solved: Option<DenseMat> = None;

    for stage in &schedule.stages {
        match stage {
            Stage::Detach { level, detaches } => {
                if detached.is_none() {
                    if let Some(d) = detaches.iter().find(|d| d.row == my) {
                        comm.send(
                            RankId(d.left),
                            stage_tag(TAG_DETACH_PREV, *level),
                            pack_row(&row),
                        )?;
                        comm.send(
                            RankId(d.right),
                            stage_tag(TAG_DETACH_FIRST, *level),
                            pack_row(&row),
                        )?;
                        detached = Some(DetachedRow {
                            row: row.clone(),
                            left: d.left,
                            right: d.right,
                        });
                    } else if let Some(d) = detaches.iter().find(|d| d.left == my) {
                        let f = comm.recv(RankId(d.row), stage_tag(TAG_DETACH_PREV, *level))?;
                        row = detach_update_prev(&row, &unpack_row(&f, d.row))?;
                    } else if let Some(d) = detaches.iter().find(|d| d.right == my) {
                        let f = comm.recv(RankId(d.row), stage_tag(TAG_DETACH_FIRST, *level))?;
                        row = detach_update_first(&row, &unpack_row(&f, d.row))?;
                    }
                }
                comm.stage_barrier(&format!("detach:{level}"))?;
            }
            Stage::Pcr { level, roles } => {
                if detached.is_none() {
                    if let Some(role) = roles.iter().find(|r| r.row == my) {
                        let tag = stage_tag(TAG_PCR, *level);
                        // Sends first: the non-blocking contract means no
                        // ordering constraint between the partners.
                        let mut partners: Vec<usize> = Vec::new();
                        for t in [role.left, role.right].into_iter().flatten() {
                            if !partners.contains(&t) {
                                partners.push(t);
                            }
                        }
                        for &t in &partners {
                            comm.send(RankId(t), tag, pack_row(&row))?;
                        }
                        let mut received: Vec<(usize, ReducedRow)> = Vec::new();
                        for &t in &partners {
                            let f = comm.recv(RankId(t), tag)?;
                            received.push((t, unpack_row(&f, t)));
                        }
                        let find = |id: Option<usize>| {
                            id.and_then(|i| {
                                received
                                    .iter()
                                    .find(|(t, _)| *t == i)
                                    .map(|(_, r)| r.clone())
                            })
                        };
                        let left = find(role.left);
                        let right = find(role.right);
                        row = block_pcr_step(&row, left.as_ref(), right.as_ref(), role.fold)?;
                    }
                }
                comm.stage_barrier(&format!("pcr:{level}"))?;
            }
            Stage::Reattach { level, detaches } => {
                if solved.is_none() && detached.is_none() {
                    // Active rows are decoupled after the final PCR stage.
                    solved = Some(direct_solve(&row)?);
                }
                if let Some(d) = detaches.iter().find(|d| d.row == my) {
                    let rec = detached.as_ref().ok_or(SolverError::MissingNeighborData {
                        rank: my,
                        what: "reattach without a detach record",
                    })?;
                    let xl = unpack_mat(
                        &comm.recv(RankId(d.left), stage_tag(TAG_REATTACH_LEFT, *level))?,
                    );
                    let xr = unpack_mat(
                        &comm.recv(RankId(d.right), stage_tag(TAG_REATTACH_RIGHT, *level))?,
                    );
                    solved = Some(reattach_step(rec, &xl, &xr)?);
                } else {
                    for d in detaches {
                        if d.left != my && d.right != my {
                            continue;
                        }
                        let mine = solved.as_ref().ok_or(SolverError::MissingNeighborData {
                            rank: my,
                            what: "neighbor value requested before solve",
                        })?;
                        if d.left == my {
                            comm.send(
                                RankId(d.row),
                                stage_tag(TAG_REATTACH_LEFT, *level),
                                pack_mat(mine),
                            )?;
                        }
                        if d.right == my {
                            comm.send(
                                RankId(d.row),
                                stage_tag(TAG_REATTACH_RIGHT, *level),
                                pack_mat(mine),
                            )?;
                        }
                    }
                }
                comm.stage_barrier(&format!("reattach:{level}"))?;
            }
        }
    }
    if solved.is_none() && detached.is_none() {
        solved = Some(direct_solve(&row)?);
    }
    solved.ok_or(SolverError::MissingNeighborData {
        rank: my,
        what: "reduced solve finished without a solution",
    })
}

/// Serial reference execution of the same schedule over all rows at once.
/// Applies the identical block operations in owner order, so it matches
/// the distributed path bitwise; used by the verification suites, which
/// also read back the intermediate systems it records.
pub fn solve_reduced_serial(
    rows: &[ReducedRow],
    schedule: &DetachSchedule,
) -> Result<(Vec<DenseMat>, Vec<SystemSnapshot>)> {
    let p = schedule.p;
    assert_eq!(rows.len(), p);
    let mut cur: Vec<ReducedRow> = rows.to_vec();
    let mut links: Vec<Option<(Option<usize>, Option<usize>)>> = (0..p)
        .map(|i| {
            Some(if schedule.cyclic {
                (Some((i + p - 1) % p), Some((i + 1) % p))
            } else {
                (i.checked_sub(1), (i + 1 < p).then_some(i + 1))
            })
        })
        .collect();
    let mut records: Vec<Option<DetachedRow>> = vec![None; p];
    let mut solved: Vec<Option<DenseMat>> = vec![None; p];
    let mut snaps = vec![SystemSnapshot {
        rows: cur.clone(),
        links: links.clone(),
    }];

    for stage in &schedule.stages {
        match stage {
            Stage::Detach { detaches, .. } => {
                for d in detaches {
                    let det = cur[d.row].clone();
                    cur[d.left] = detach_update_prev(&cur[d.left], &det)?;
                    cur[d.right] = detach_update_first(&cur[d.right], &det)?;
                    records[d.row] = Some(DetachedRow {
                        row: det,
                        left: d.left,
                        right: d.right,
                    });
                    links[d.row] = None;
                    if let Some(l) = links[d.left].as_mut() {
                        l.1 = Some(d.right);
                    }
                    if let Some(l) = links[d.right].as_mut() {
                        l.0 = Some(d.left);
                    }
                }
            }
            Stage::Pcr { roles, .. } => {
                let prev = cur.clone();
                let old_links = links.clone();
                for role in roles {
                    let left = role.left.map(|i| &prev[i]);
                    let right = role.right.map(|i| &prev[i]);
                    cur[role.row] = block_pcr_step(&prev[role.row], left, right, role.fold)?;
                    // New couplings reach one hop further along the old
                    // links; a hop landing back on the row itself was
                    // folded into the diagonal.
                    let hop = |id: Option<usize>, side: usize| -> Option<usize> {
                        let via = id?;
                        let l = old_links[via]?;
                        let tgt = if side == 0 { l.0 } else { l.1 }?;
                        (tgt != role.row).then_some(tgt)
                    };
                    links[role.row] = Some((hop(role.left, 0), hop(role.right, 1)));
                }
            }
            Stage::Reattach { detaches, .. } => {
                for (i, rec) in records.iter().enumerate() {
                    if rec.is_none() && solved[i].is_none() {
                        solved[i] = Some(direct_solve(&cur[i])?);
                    }
                }
                for d in detaches {
                    let rec = records[d.row].as_ref().unwrap();
                    let xl = solved[d.left]
                        .clone()
                        .ok_or(SolverError::MissingNeighborData {
                            rank: d.left,
                            what: "serial reattach left",
                        })?;
                    let xr = solved[d.right]
                        .clone()
                        .ok_or(SolverError::MissingNeighborData {
                            rank: d.right,
                            what: "serial reattach right",
                        })?;
                    solved[d.row] = Some(reattach_step(rec, &xl, &xr)?);
                }
            }
        }
        snaps.push(SystemSnapshot {
            rows: cur.clone(),
            links: links.clone(),
        });
    }
    for i in 0..p {
        if solved[i].is_none() && records[i].is_none() {
            solved[i] = Some(direct_solve(&cur[i])?);
        }
    }
    Ok((solved.into_iter().map(|s| s.unwrap()).collect(), snaps))
}

/// Rows and their current coupling targets after some stage, for
/// solution-set checks: any solution of the original system must satisfy
/// every active row of every snapshot.
#[derive(Debug, Clone)]
pub struct SystemSnapshot {
    pub rows: Vec<ReducedRow>,
    /// `links[i] = Some((left, right))` while row `i` is active.
    pub links: Vec<Option<(Option<usize>, Option<usize>)>>,
}

impl SystemSnapshot {
    /// Largest residual of the candidate interface solution over all
    /// active rows.
    pub fn residual(&self, x: &[DenseMat]) -> f64 {
        let mut worst = 0.0f64;
        for (i, link) in self.links.iter().enumerate() {
            let Some((left, right)) = link else { continue };
            let row = &self.rows[i];
            let mut lhs = row.blocks.dhat.matmul(&x[i]);
            if let Some(l) = left {
                lhs.add_scaled(1.0, &row.blocks.lhat.matmul(&x[*l]));
            }
            if let Some(rr) = right {
                lhs.add_scaled(1.0, &row.blocks.uhat.matmul(&x[*rr]));
            }
            worst = worst.max(lhs.max_abs_diff(&row.bhat));
        }
        worst
    }
}

/// Assemble the dense `(p*r) x (p*r)` interface matrix from all rows; the
/// oracle view of the reduced system.
pub fn assemble_dense(rows: &[ReducedRow], cyclic: bool) -> (DenseMat, DenseMat) {
    let p = rows.len();
    let r = rows[0].block_size();
    let m = rows[0].bhat.cols();
    let mut a = DenseMat::zeros(p * r, p * r);
    let mut b = DenseMat::zeros(p * r, m);
    for (i, row) in rows.iter().enumerate() {
        let place = |a: &mut DenseMat, col_block: usize, blk: &DenseMat| {
            for bi in 0..r {
                for bj in 0..r {
                    a[(i * r + bi, col_block * r + bj)] += blk[(bi, bj)];
                }
            }
        };
        place(&mut a, i, &row.blocks.dhat);
        if cyclic || i > 0 {
            place(&mut a, (i + p - 1) % p, &row.blocks.lhat);
        }
        if cyclic || i + 1 < p {
            place(&mut a, (i + 1) % p, &row.blocks.uhat);
        }
        for bi in 0..r {
            for c in 0..m {
                b[(i * r + bi, c)] = row.bhat[(bi, c)];
            }
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{Mode, World};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_row(owner: usize, l: f64, d: f64, u: f64, b: f64) -> ReducedRow {
        ReducedRow {
            blocks: ReducedBlocks {
                lhat: DenseMat::from_vec(1, 1, vec![l]),
                dhat: DenseMat::from_vec(1, 1, vec![d]),
                uhat: DenseMat::from_vec(1, 1, vec![u]),
            },
            bhat: DenseMat::from_vec(1, 1, vec![b]),
            owner,
        }
    }

    fn random_rows(rng: &mut ChaCha8Rng, p: usize, r: usize, m: usize) -> Vec<ReducedRow> {
        (0..p)
            .map(|owner| {
                let mut mk = |dom: bool| {
                    let mut mat = DenseMat::zeros(r, r);
                    for i in 0..r {
                        for j in 0..r {
                            mat[(i, j)] = rng.gen_range(-1.0..1.0);
                        }
                        if dom {
                            mat[(i, i)] += 4.0 + 2.0 * r as f64;
                        }
                    }
                    mat
                };
                let lhat = mk(false);
                let dhat = mk(true);
                let uhat = mk(false);
                let bhat = DenseMat::from_vec(
                    r,
                    m,
                    (0..r * m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                );
                ReducedRow {
                    blocks: ReducedBlocks { lhat, dhat, uhat },
                    bhat,
                    owner,
                }
            })
            .collect()
    }

    #[test]
    fn schedule_formulas_hold_up_to_64() {
        for p in 1..=64usize {
            let s = build_schedule(p, true);
            let log = if p == 1 { 0 } else { p.ilog2() as usize };
            assert_eq!(s.pcr_stages, log, "pcr stages p={p}");
            assert_eq!(s.detached_rows, p - (1 << log), "detached rows p={p}");
            let parity_sum: usize = (0..=log).map(|n| (p >> n) & 1).sum();
            assert_eq!(s.detach_stages, parity_sum - 1, "detach stages p={p}");

            let acy = build_schedule(p, false);
            let celog = (p as f64).log2().ceil() as usize;
            assert_eq!(acy.pcr_stages, celog, "acyclic stages p={p}");
            assert_eq!(acy.detach_stages, 0);
            assert_eq!(acy.detached_rows, 0);
        }
    }

    #[test]
    fn schedule_p8_and_p1() {
        let s = build_schedule(8, true);
        assert_eq!((s.pcr_stages, s.detach_stages, s.detached_rows), (3, 0, 0));
        let s1 = build_schedule(1, true);
        assert!(s1.stages.is_empty());
    }

    #[test]
    fn schedule_p11_matches_worked_example() {
        // Root detaches the last row (10); a PCR step forms two five-row
        // sub-systems which detach rows 8 and 9; two more PCR steps solve
        // the remaining eight rows; reattachment runs innermost first.
        let s = build_schedule(11, true);
        assert_eq!((s.pcr_stages, s.detached_rows, s.detach_stages), (3, 3, 2));
        let kinds: Vec<&str> = s
            .stages
            .iter()
            .map(|st| match st {
                Stage::Detach { .. } => "detach",
                Stage::Pcr { .. } => "pcr",
                Stage::Reattach { .. } => "reattach",
            })
            .collect();
        assert_eq!(
            kinds,
            vec!["detach", "pcr", "detach", "pcr", "pcr", "reattach", "reattach"]
        );
        match &s.stages[0] {
            Stage::Detach { detaches, .. } => {
                assert_eq!(
                    detaches,
                    &vec![DetachInfo {
                        row: 10,
                        left: 9,
                        right: 0
                    }]
                );
            }
            _ => unreachable!(),
        }
        match &s.stages[2] {
            Stage::Detach { detaches, .. } => {
                assert_eq!(
                    detaches,
                    &vec![
                        DetachInfo {
                            row: 8,
                            left: 6,
                            right: 0
                        },
                        DetachInfo {
                            row: 9,
                            left: 7,
                            right: 1
                        }
                    ]
                );
            }
            _ => unreachable!(),
        }
        // Reattach order: level-1 rows (8, 9) before the root row (10).
        match &s.stages[5] {
            Stage::Reattach { detaches, .. } => {
                assert_eq!(
                    detaches.iter().map(|d| d.row).collect::<Vec<_>>(),
                    vec![8, 9]
                );
            }
            _ => unreachable!(),
        }
        match &s.stages[6] {
            Stage::Reattach { detaches, .. } => {
                assert_eq!(detaches.iter().map(|d| d.row).collect::<Vec<_>>(), vec![10]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn pcr_step_uniform_scalar_values() {
        // Scalar cyclic system with rows (1/3, 1, 1/3): one step must give
        // diagonal 7/9 and off-diagonals -1/9.
        let rows: Vec<ReducedRow> = (0..4)
            .map(|i| scalar_row(i, 1.0 / 3.0, 1.0, 1.0 / 3.0, 1.0))
            .collect();
        let out = block_pcr_step(&rows[0], Some(&rows[3]), Some(&rows[1]), false).unwrap();
        assert!((out.blocks.dhat[(0, 0)] - 7.0 / 9.0).abs() < 1e-15);
        assert!((out.blocks.lhat[(0, 0)] + 1.0 / 9.0).abs() < 1e-15);
        assert!((out.blocks.uhat[(0, 0)] + 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn pcr_step_decoupled_row_unchanged() {
        let row = scalar_row(0, 0.0, 2.0, 0.0, 3.0);
        let l = scalar_row(1, 0.5, 1.5, 0.25, 1.0);
        let r = scalar_row(2, 0.1, 1.2, 0.3, -1.0);
        let out = block_pcr_step(&row, Some(&l), Some(&r), false).unwrap();
        assert_eq!(out.blocks.dhat, row.blocks.dhat);
        assert_eq!(out.bhat, row.bhat);
        assert_eq!(out.blocks.lhat, DenseMat::zeros(1, 1));
        assert_eq!(out.blocks.uhat, DenseMat::zeros(1, 1));
    }

    #[test]
    fn p2_fold_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in [1usize, 2] {
            let rows = random_rows(&mut rng, 2, r, 3);
            let a = block_pcr_step(&rows[0], Some(&rows[1]), Some(&rows[1]), true).unwrap();
            let x0 = direct_solve(&a).unwrap();
            let (ad, bd) = assemble_dense(&rows, true);
            let xd = dense_solve(&ad, &bd).unwrap();
            for i in 0..r {
                for c in 0..3 {
                    assert!((x0[(i, c)] - xd[(i, c)]).abs() < 1e-12, "r={r}");
                }
            }
        }
    }

    #[test]
    fn detach_decoupled_row_solves_directly() {
        let rows = vec![
            scalar_row(0, 0.3, 2.0, 0.2, 1.0),
            scalar_row(1, 0.1, 3.0, 0.4, 2.0),
            scalar_row(2, 0.0, 4.0, 0.0, 8.0),
        ];
        let (rest, rec) = detach_step(&rows).unwrap();
        // The detached row had no couplings: neighbors keep their blocks.
        assert_eq!(rest[0].blocks.dhat, rows[0].blocks.dhat);
        assert_eq!(rest[1].blocks.dhat, rows[1].blocks.dhat);
        let x = reattach_step(&rec, &DenseMat::zeros(1, 1), &DenseMat::zeros(1, 1)).unwrap();
        assert!((x[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn detach_preserves_solution_p3() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for r in [1usize, 2] {
            let rows = random_rows(&mut rng, 3, r, 2);
            let (ad, bd) = assemble_dense(&rows, true);
            let xd = dense_solve(&ad, &bd).unwrap();
            let (rest, rec) = detach_step(&rows).unwrap();
            // The two remaining rows, with wrap couplings onto each other,
            // must still be satisfied by the dense solution.
            let xs: Vec<DenseMat> = (0..3)
                .map(|i| {
                    DenseMat::from_vec(
                        r,
                        2,
                        (0..r).flat_map(|bi| xd.row(i * r + bi).to_vec()).collect(),
                    )
                })
                .collect();
            for (k, row) in rest.iter().enumerate() {
                let other = &xs[if k == 0 { 1 } else { 0 }];
                let mut lhs = row.blocks.dhat.matmul(&xs[k]);
                lhs.add_scaled(1.0, &row.blocks.lhat.matmul(other));
                lhs.add_scaled(1.0, &row.blocks.uhat.matmul(other));
                assert!(lhs.max_abs_diff(&row.bhat) < 1e-12, "r={r} row {k}");
            }
            // Reattaching with the dense neighbor values recovers row 2.
            let x2 = reattach_step(&rec, &xs[1], &xs[0]).unwrap();
            assert!(x2.max_abs_diff(&xs[2]) < 1e-11, "r={r}");
        }
    }

    #[test]
    fn serial_solver_matches_dense_for_many_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for cyclic in [true, false] {
            for r in [1usize, 2] {
                for p in [1usize, 2, 3, 4, 5, 7, 8, 11, 16] {
                    let mut rows = random_rows(&mut rng, p, r, 2);
                    if !cyclic {
                        rows[0].blocks.lhat = DenseMat::zeros(r, r);
                        rows[p - 1].blocks.uhat = DenseMat::zeros(r, r);
                    }
                    let schedule = build_schedule(p, cyclic);
                    let (xs, snaps) = solve_reduced_serial(&rows, &schedule).unwrap();
                    let (ad, bd) = assemble_dense(&rows, cyclic);
                    let xd = dense_solve(&ad, &bd).unwrap();
                    for i in 0..p {
                        for bi in 0..r {
                            for c in 0..2 {
                                let got = xs[i][(bi, c)];
                                let want = xd[(i * r + bi, c)];
                                assert!(
                                    (got - want).abs() < 1e-11,
                                    "cyclic={cyclic} r={r} p={p} row {i}: {got} vs {want}"
                                );
                            }
                        }
                    }
                    // Solution-set preservation at every stage.
                    let xs_dense: Vec<DenseMat> = (0..p)
                        .map(|i| {
                            DenseMat::from_vec(
                                r,
                                2,
                                (0..r).flat_map(|bi| xd.row(i * r + bi).to_vec()).collect(),
                            )
                        })
                        .collect();
                    for (si, snap) in snaps.iter().enumerate() {
                        let res = snap.residual(&xs_dense);
                        assert!(
                            res < 1e-10,
                            "cyclic={cyclic} r={r} p={p} snapshot {si} residual {res}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn distributed_matches_serial_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for p in [1usize, 2, 3, 4, 5, 7, 8, 11] {
            let rows = random_rows(&mut rng, p, 1, 2);
            let schedule = build_schedule(p, true);
            let (serial, _) = solve_reduced_serial(&rows, &schedule).unwrap();
            let rows_ref = &rows;
            let schedule_ref = &schedule;
            let run = World::run(p, Mode::Lockstep, move |comm| {
                let me = comm.rank().0;
                solve_reduced(comm, rows_ref[me].clone(), schedule_ref)
            })
            .unwrap();
            for i in 0..p {
                assert_eq!(run.results[i], serial[i], "p={p} rank {i}");
            }
            if p == 1 {
                // Single-rank reduced solve is purely local.
                assert_eq!(run.counters[0].messages_sent, 0);
            }
        }
    }

    #[test]
    fn distributed_stage_counts_match_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for p in [2usize, 3, 8, 11] {
            let rows = random_rows(&mut rng, p, 1, 1);
            let schedule = build_schedule(p, true);
            let rows_ref = &rows;
            let schedule_ref = &schedule;
            let run = World::run(p, Mode::Lockstep, move |comm| {
                let me = comm.rank().0;
                solve_reduced(comm, rows_ref[me].clone(), schedule_ref)
            })
            .unwrap();
            let expect = (schedule.pcr_stages + 2 * schedule.detach_stages) as u64;
            for c in &run.counters {
                assert_eq!(c.stages_entered, expect, "p={p}");
            }
        }
    }

    #[test]
    fn lone_acyclic_row_without_partners_is_direct() {
        // p = 3 acyclic: at the second level row 1 has no partners left.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut rows = random_rows(&mut rng, 3, 1, 1);
        rows[0].blocks.lhat = DenseMat::zeros(1, 1);
        rows[2].blocks.uhat = DenseMat::zeros(1, 1);
        let schedule = build_schedule(3, false);
        let (xs, _) = solve_reduced_serial(&rows, &schedule).unwrap();
        let (ad, bd) = assemble_dense(&rows, false);
        let xd = dense_solve(&ad, &bd).unwrap();
        for i in 0..3 {
            assert!((xs[i][(0, 0)] - xd[(i, 0)]).abs() < 1e-12);
        }
    }
}
