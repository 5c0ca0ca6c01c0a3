//! Compact banded matrices and shared-memory generalized parallel cyclic
//! reduction (PCR).
//!
//! A compact banded matrix stores `w = 2r + 1` diagonals of length `n`.
//! One reduction step combines each row with its `r` neighbors on either
//! side so that the result is staggered with zeros between surviving
//! entries; the row set then splits into two independent half-size
//! sub-systems at doubled stride. `ceil(log2 n)` steps fully diagonalize
//! an acyclic system, so a solve is a single forward pass with no back
//! substitution.
//!
//! The per-row elimination coefficients are governed by a small
//! `2r x 2r` linear system: diagonal for tridiagonal matrices,
//! tridiagonal `4x4` for pentadiagonal ones. Rows missing a neighbor
//! (acyclic boundaries) carry zero coefficients for the absent side.

use crate::dense::{dense_solve, DenseMat, PIVOT_GUARD};
use crate::error::{Result, SolverError};

/// Compact banded matrix stored diagonal-wise.
///
/// `bands[k][i]` holds the entry of row `i` at column offset `k - r`
/// (taken modulo `n` when cyclic). Acyclic matrices keep exact zeros in
/// band slots whose column would fall outside `[0, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    r: usize,
    cyclic: bool,
    bands: Vec<Vec<f64>>,
}

impl BandedMatrix {
    /// Build from explicit diagonals, ordered lower to upper.
    pub fn new(n: usize, cyclic: bool, bands: Vec<Vec<f64>>) -> Result<Self> {
        let w = bands.len();
        if w < 3 || w.is_multiple_of(2) {
            return Err(SolverError::InvalidLayout(format!(
                "bandwidth must be odd and >= 3, got {w}"
            )));
        }
        // A cyclic matrix narrower than its bandwidth would overlap its
        // own wrap; acyclic bands simply truncate.
        if cyclic && n < w {
            return Err(SolverError::DimensionMismatch {
                context: "cyclic banded matrix: n < bandwidth",
                expected: w,
                got: n,
            });
        }
        if n == 0 {
            return Err(SolverError::DimensionMismatch {
                context: "banded matrix: empty",
                expected: 1,
                got: 0,
            });
        }
        for (k, band) in bands.iter().enumerate() {
            if band.len() != n {
                return Err(SolverError::DimensionMismatch {
                    context: "banded matrix: diagonal length",
                    expected: n,
                    got: band.len(),
                });
            }
            if !band.iter().all(|v| v.is_finite()) {
                return Err(SolverError::InvalidLayout(format!(
                    "diagonal {k} contains a non-finite entry"
                )));
            }
        }
        let r = (w - 1) / 2;
        if !cyclic {
            for (k, band) in bands.iter().enumerate() {
                let off = k as isize - r as isize;
                for (i, &v) in band.iter().enumerate() {
                    let col = i as isize + off;
                    if (col < 0 || col >= n as isize) && v != 0.0 {
                        return Err(SolverError::InvalidLayout(format!(
                            "acyclic matrix has nonzero out-of-range entry at row {i}, offset {off}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            n,
            r,
            cyclic,
            bands,
        })
    }

    /// Matrix with the same value on each diagonal, e.g. `B[1/3, 1, 1/3]`.
    /// Acyclic matrices get their out-of-range corner entries zeroed.
    pub fn uniform(n: usize, cyclic: bool, diagonals: &[f64]) -> Result<Self> {
        let w = diagonals.len();
        let r = w / 2;
        let mut bands: Vec<Vec<f64>> = diagonals.iter().map(|&d| vec![d; n]).collect();
        if !cyclic {
            for (k, band) in bands.iter_mut().enumerate() {
                let off = k as isize - r as isize;
                for i in 0..n {
                    let col = i as isize + off;
                    if col < 0 || col >= n as isize {
                        band[i] = 0.0;
                    }
                }
            }
        }
        Self::new(n, cyclic, bands)
    }

    pub fn identity(n: usize) -> Self {
        let mut bands = vec![vec![0.0; n]; 3];
        bands[1] = vec![1.0; n];
        Self {
            n,
            r: 1,
            cyclic: false,
            bands,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Half bandwidth `r = (w - 1) / 2`.
    pub fn half_bandwidth(&self) -> usize {
        self.r
    }

    pub fn bandwidth(&self) -> usize {
        2 * self.r + 1
    }

    pub fn cyclic(&self) -> bool {
        self.cyclic
    }

    pub fn bands(&self) -> &[Vec<f64>] {
        &self.bands
    }

    /// Entry of row `i` at column offset `off` (|off| <= r).
    pub fn band_entry(&self, i: usize, off: isize) -> f64 {
        self.bands[(off + self.r as isize) as usize][i]
    }

    pub fn band_entry_mut(&mut self, i: usize, off: isize) -> &mut f64 {
        &mut self.bands[(off + self.r as isize) as usize][i]
    }

    /// Full `A[i, j]`, resolving the band structure and cyclic wrap.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let n = self.n as isize;
        for off in -(self.r as isize)..=(self.r as isize) {
            let mut col = i as isize + off;
            if self.cyclic {
                col = col.rem_euclid(n);
            }
            if col == j as isize {
                return self.band_entry(i, off);
            }
        }
        0.0
    }

    pub fn to_dense(&self) -> DenseMat {
        let mut d = DenseMat::zeros(self.n, self.n);
        for i in 0..self.n {
            for off in -(self.r as isize)..=(self.r as isize) {
                let col = i as isize + off;
                let v = self.band_entry(i, off);
                if self.cyclic {
                    d[(i, col.rem_euclid(self.n as isize) as usize)] += v;
                } else if col >= 0 && col < self.n as isize {
                    d[(i, col as usize)] += v;
                }
            }
        }
        d
    }

    /// Band-structured product `A * x` over every batch column.
    pub fn matvec(&self, x: &RhsBatch) -> Result<RhsBatch> {
        if x.n != self.n {
            return Err(SolverError::DimensionMismatch {
                context: "matvec: rhs rows",
                expected: self.n,
                got: x.n,
            });
        }
        let m = x.m;
        let mut out = RhsBatch::zeros(self.n, m);
        let n = self.n as isize;
        for i in 0..self.n {
            for off in -(self.r as isize)..=(self.r as isize) {
                let v = self.band_entry(i, off);
                if v == 0.0 {
                    continue;
                }
                let col = i as isize + off;
                let col = if self.cyclic {
                    col.rem_euclid(n)
                } else if col < 0 || col >= n {
                    continue;
                } else {
                    col
                } as usize;
                let src = x.row(col);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// Per-column relative residual `||A x - b||_inf / max(1, ||b||_inf)`.
    pub fn residual_inf(&self, x: &RhsBatch, b: &RhsBatch) -> Result<Vec<f64>> {
        let ax = self.matvec(x)?;
        if b.n != self.n || b.m != x.m {
            return Err(SolverError::DimensionMismatch {
                context: "residual_inf: rhs shape",
                expected: self.n * x.m,
                got: b.n * b.m,
            });
        }
        let mut out = vec![0.0f64; x.m];
        let mut bnorm = vec![0.0f64; x.m];
        for i in 0..self.n {
            let ri = ax.row(i);
            let bi = b.row(i);
            for c in 0..x.m {
                out[c] = out[c].max((ri[c] - bi[c]).abs());
                bnorm[c] = bnorm[c].max(bi[c].abs());
            }
        }
        for c in 0..x.m {
            out[c] /= bnorm[c].max(1.0);
        }
        Ok(out)
    }

    fn max_band_abs(&self) -> f64 {
        self.bands
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |a, &v| a.max(v.abs()))
    }
}

/// A batch of right-hand sides: `n` rows by `m` columns, row-major with
/// the batch index contiguous so every row operation runs along the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RhsBatch {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl RhsBatch {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            values: vec![0.0; n * m],
        }
    }

    pub fn from_vec(n: usize, m: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * m);
        Self { n, m, values }
    }

    /// Single-column batch.
    pub fn column(v: &[f64]) -> Self {
        Self {
            n: v.len(),
            m: 1,
            values: v.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn at(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.m + c]
    }

    /// Copy of rows `[lo, hi)`.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> RhsBatch {
        RhsBatch {
            n: hi - lo,
            m: self.m,
            values: self.values[lo * self.m..hi * self.m].to_vec(),
        }
    }

    /// Extract a single column as a plain vector.
    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.at(i, c)).collect()
    }

    pub fn to_dense(&self) -> DenseMat {
        DenseMat::from_vec(self.n, self.m, self.values.clone())
    }

    pub fn from_dense(d: &DenseMat) -> Self {
        Self {
            n: d.rows(),
            m: d.cols(),
            values: d.data().to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, &v| a.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &RhsBatch) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }
}

/// Elimination coefficients of one row for one reduction step:
/// `k_minus[j-1]` pairs with the neighbor `j` strides below, `k_plus[j-1]`
/// with the neighbor `j` strides above. Absent neighbors carry exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionCoeffs {
    pub k_minus: Vec<f64>,
    pub k_plus: Vec<f64>,
}

/// Index of neighbor `i + delta*stride`, or None when it falls outside an
/// acyclic range. Cyclic indices wrap modulo `n`.
fn neighbor(n: usize, cyclic: bool, i: usize, delta: isize, stride: usize) -> Option<usize> {
    let idx = i as isize + delta * stride as isize;
    if cyclic {
        Some(idx.rem_euclid(n as isize) as usize)
    } else if idx < 0 || idx >= n as isize {
        None
    } else {
        Some(idx as usize)
    }
}

/// Compute the reduction coefficients of row `i` for the given stride.
///
/// The matrix is interpreted at the current reduction stage: band slot `k`
/// of row `j` couples it to row `j + (k - r) * stride`. For `stride == 1`
/// this is the plain matrix. The coefficients zero out the entries of the
/// combined row at odd stride multiples, which is what lets the row set
/// split into two sub-systems.
pub fn compute_reduction_coeffs(
    mat: &BandedMatrix,
    i: usize,
    stride: usize,
) -> Result<ReductionCoeffs> {
    let r = mat.r;
    let dim = 2 * r;
    // Unknown order: k_{-r} .. k_{-1}, k_{+1} .. k_{+r}.
    // Equation order: target offsets -(2r-1), .., -1, +1, .., +(2r-1).
    let col_deltas: Vec<isize> = (1..=r as isize)
        .rev()
        .map(|j| -j)
        .chain(1..=r as isize)
        .collect();
    let targets: Vec<isize> = col_deltas.iter().map(|d| 2 * d - d.signum()).collect();

    let mut sys = DenseMat::zeros(dim, dim);
    let mut rhs = DenseMat::zeros(dim, 1);
    for (qi, &q) in targets.iter().enumerate() {
        rhs[(qi, 0)] = if q.unsigned_abs() <= r {
            mat.band_entry(i, q)
        } else {
            0.0
        };
        for (cj, &d) in col_deltas.iter().enumerate() {
            // A coefficient is pinned to zero when its neighbor row is
            // absent, or when the staggered entry it exists to eliminate
            // lies outside the matrix (both equations are vacuous there).
            let paired_target = 2 * d - d.signum();
            let pinned = neighbor(mat.n, mat.cyclic, i, d, stride).is_none()
                || neighbor(mat.n, mat.cyclic, i, paired_target, stride).is_none();
            if pinned {
                if q == paired_target {
                    sys[(qi, cj)] = 1.0;
                }
            } else if let Some(row) = neighbor(mat.n, mat.cyclic, i, d, stride) {
                let off = q - d;
                if off.unsigned_abs() <= r {
                    sys[(qi, cj)] = mat.band_entry(row, off);
                }
            }
        }
    }

    let k = dense_solve(&sys, &rhs).map_err(|e| match e {
        SolverError::SingularPivot { index, .. } => SolverError::SingularPivot {
            context: format!("reduction coefficients of row {i} at stride {stride}"),
            index,
        },
        other => other,
    })?;
    let k_minus: Vec<f64> = (0..r).map(|j| k[(r - 1 - j, 0)]).collect();
    let k_plus: Vec<f64> = (0..r).map(|j| k[(r + j, 0)]).collect();
    Ok(ReductionCoeffs { k_minus, k_plus })
}

/// Pre-factorized reduction of an acyclic banded matrix: the per-stage
/// elimination coefficients and the fully reduced diagonal. Building the
/// plan once and applying it to many right-hand sides is the repeated-b
/// workflow of the partitioned solver.
#[derive(Debug, Clone)]
pub struct PcrPlan {
    n: usize,
    r: usize,
    /// Per stage: (stride, k_minus[n*r], k_plus[n*r]).
    stages: Vec<PlanStage>,
    final_diag: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PlanStage {
    stride: usize,
    k_minus: Vec<f64>,
    k_plus: Vec<f64>,
}

/// One intermediate reduction state, for verification: the implied banded
/// matrix at a stage together with its stride.
#[derive(Debug, Clone)]
pub struct ReductionStage {
    pub stride: usize,
    pub mat: BandedMatrix,
}

impl PcrPlan {
    pub fn new(mat: &BandedMatrix) -> Result<Self> {
        Self::build(mat, None)
    }

    /// Like [`PcrPlan::new`] but also records the matrix before each stage,
    /// so tests can check that every intermediate system is still solved by
    /// the parent solution.
    pub fn new_with_trace(mat: &BandedMatrix) -> Result<(Self, Vec<ReductionStage>)> {
        let mut trace = Vec::new();
        let plan = Self::build(mat, Some(&mut trace))?;
        Ok((plan, trace))
    }

    fn build(mat: &BandedMatrix, mut trace: Option<&mut Vec<ReductionStage>>) -> Result<Self> {
        if mat.cyclic {
            return Err(SolverError::InvalidLayout(
                "shared-memory PCR requires an acyclic matrix".to_string(),
            ));
        }
        let n = mat.n;
        let r = mat.r;
        let mut work = mat.clone();
        let mut stages = Vec::new();
        let mut stride = 1usize;
        while stride < n {
            if let Some(t) = trace.as_deref_mut() {
                t.push(ReductionStage {
                    stride,
                    mat: work.clone(),
                });
            }
            let mut k_minus = vec![0.0; n * r];
            let mut k_plus = vec![0.0; n * r];
            let mut next = work.clone();
            for i in 0..n {
                let k = compute_reduction_coeffs(&work, i, stride).map_err(|e| match e {
                    SolverError::SingularPivot { context, index } => SolverError::SingularPivot {
                        context: format!("pcr stride {stride}: {context}"),
                        index,
                    },
                    other => other,
                })?;
                // New couplings live at doubled stride: slot t of the next
                // stage reads the combined entry at offset 2t of this stage.
                for t in -(r as isize)..=(r as isize) {
                    let mut v = if (2 * t).unsigned_abs() <= r {
                        work.band_entry(i, 2 * t)
                    } else {
                        0.0
                    };
                    for j in 1..=r {
                        if let Some(up) = neighbor(n, false, i, j as isize, stride) {
                            let off = 2 * t - j as isize;
                            if off.unsigned_abs() <= r {
                                v -= k.k_plus[j - 1] * work.band_entry(up, off);
                            }
                        }
                        if let Some(dn) = neighbor(n, false, i, -(j as isize), stride) {
                            let off = 2 * t + j as isize;
                            if off.unsigned_abs() <= r {
                                v -= k.k_minus[j - 1] * work.band_entry(dn, off);
                            }
                        }
                    }
                    *next.band_entry_mut(i, t) = v;
                }
                for j in 0..r {
                    k_minus[i * r + j] = k.k_minus[j];
                    k_plus[i * r + j] = k.k_plus[j];
                }
            }
            work = next;
            stages.push(PlanStage {
                stride,
                k_minus,
                k_plus,
            });
            stride *= 2;
        }

        let guard = PIVOT_GUARD * work.max_band_abs();
        let mut final_diag = vec![0.0; n];
        for i in 0..n {
            let d = work.band_entry(i, 0);
            if d.abs() <= guard {
                return Err(SolverError::SingularPivot {
                    context: "pcr final diagonal".to_string(),
                    index: i,
                });
            }
            final_diag[i] = d;
        }
        Ok(Self {
            n,
            r,
            stages,
            final_diag,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of reduction stages, `ceil(log2 n)`.
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Apply the stored reduction to a batch of right-hand sides.
    pub fn apply(&self, rhs: &RhsBatch) -> Result<RhsBatch> {
        self.apply_traced(rhs, None)
    }

    /// Apply while optionally recording the right-hand side before each
    /// stage (paired with [`PcrPlan::new_with_trace`] snapshots).
    pub fn apply_traced(
        &self,
        rhs: &RhsBatch,
        mut trace: Option<&mut Vec<RhsBatch>>,
    ) -> Result<RhsBatch> {
        if rhs.n != self.n {
            return Err(SolverError::DimensionMismatch {
                context: "pcr apply: rhs rows",
                expected: self.n,
                got: rhs.n,
            });
        }
        let n = self.n;
        let r = self.r;
        let m = rhs.m;
        let mut cur = rhs.clone();
        let mut next = RhsBatch::zeros(n, m);
        for stage in &self.stages {
            if let Some(t) = trace.as_deref_mut() {
                t.push(cur.clone());
            }
            for i in 0..n {
                let (lo, hi) = (i * m, (i + 1) * m);
                next.values[lo..hi].copy_from_slice(&cur.values[lo..hi]);
                for j in 1..=r {
                    let kp = stage.k_plus[i * r + j - 1];
                    if kp != 0.0 {
                        if let Some(up) = neighbor(n, false, i, j as isize, stage.stride) {
                            let src = &cur.values[up * m..(up + 1) * m];
                            for (d, s) in next.values[lo..hi].iter_mut().zip(src) {
                                *d -= kp * s;
                            }
                        }
                    }
                    let km = stage.k_minus[i * r + j - 1];
                    if km != 0.0 {
                        if let Some(dn) = neighbor(n, false, i, -(j as isize), stage.stride) {
                            let src = &cur.values[dn * m..(dn + 1) * m];
                            for (d, s) in next.values[lo..hi].iter_mut().zip(src) {
                                *d -= km * s;
                            }
                        }
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        if let Some(t) = trace {
            t.push(cur.clone());
        }
        for i in 0..n {
            let d = self.final_diag[i];
            for v in cur.row_mut(i) {
                *v /= d;
            }
        }
        Ok(cur)
    }
}

/// Direct solve of an acyclic compact banded system by generalized PCR.
///
/// Runs exactly `ceil(log2 n)` reduction stages; out-of-range neighbors
/// are treated as absent, so no padding rows are introduced.
pub fn pcr_full_solve(mat: &BandedMatrix, rhs: &RhsBatch) -> Result<RhsBatch> {
    PcrPlan::new(mat)?.apply(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_dd(
        rng: &mut ChaCha8Rng,
        n: usize,
        r: usize,
        cyclic: bool,
    ) -> BandedMatrix {
        let w = 2 * r + 1;
        let mut bands = vec![vec![0.0; n]; w];
        for i in 0..n {
            let mut off_sum = 0.0f64;
            for k in 0..w {
                if k == r {
                    continue;
                }
                let col = i as isize + k as isize - r as isize;
                if !cyclic && (col < 0 || col >= n as isize) {
                    continue;
                }
                let v: f64 = rng.gen_range(-1.0..1.0);
                bands[k][i] = v;
                off_sum += v.abs();
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            bands[r][i] = sign * (off_sum + rng.gen_range(0.5..1.5));
        }
        BandedMatrix::new(n, cyclic, bands).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize) -> RhsBatch {
        RhsBatch::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn coeffs_uniform_tridiagonal_interior() {
        let mat = BandedMatrix::uniform(8, false, &[1.0 / 3.0, 1.0, 1.0 / 3.0]).unwrap();
        let k = compute_reduction_coeffs(&mat, 4, 1).unwrap();
        assert!((k.k_minus[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((k.k_plus[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn coeffs_boundary_row_zero_for_absent_neighbor() {
        let mat = BandedMatrix::uniform(8, false, &[1.0 / 3.0, 1.0, 1.0 / 3.0]).unwrap();
        let k = compute_reduction_coeffs(&mat, 0, 1).unwrap();
        assert_eq!(k.k_minus[0], 0.0);
        assert!((k.k_plus[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn coeffs_pentadiagonal_reduces_to_tridiagonal_answer() {
        // Pentadiagonal matrix whose outer diagonals vanish: the 4x4
        // coefficient system must reproduce the tridiagonal coefficients,
        // checked against the dense oracle on the same 4x4 system.
        let mat = BandedMatrix::uniform(9, false, &[0.0, 1.0 / 3.0, 1.0, 1.0 / 3.0, 0.0]).unwrap();
        let k = compute_reduction_coeffs(&mat, 4, 1).unwrap();
        assert_eq!(k.k_minus[1], 0.0);
        assert_eq!(k.k_plus[1], 0.0);
        assert!((k.k_minus[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((k.k_plus[0] - 1.0 / 3.0).abs() < 1e-14);

        // Dense oracle on the explicit 4x4 system of the same row.
        let i = 4;
        let a = |row: isize, col: isize| mat.get((i + row) as usize, (i + col) as usize);
        let sys = DenseMat::from_rows(&[
            &[a(-2, -3), a(-1, -3), 0.0, 0.0],
            &[a(-2, -1), a(-1, -1), a(1, -1), 0.0],
            &[0.0, a(-1, 1), a(1, 1), a(2, 1)],
            &[0.0, 0.0, a(1, 3), a(2, 3)],
        ]);
        let rhs = DenseMat::column(&[0.0, a(0, -1), a(0, 1), 0.0]);
        let kk = dense_solve(&sys, &rhs).unwrap();
        assert!((kk[(0, 0)] - k.k_minus[1]).abs() < 1e-14);
        assert!((kk[(1, 0)] - k.k_minus[0]).abs() < 1e-14);
        assert!((kk[(2, 0)] - k.k_plus[0]).abs() < 1e-14);
        assert!((kk[(3, 0)] - k.k_plus[1]).abs() < 1e-14);
    }

    #[test]
    fn coeffs_substitution_zeroes_staggered_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, r) in &[(8usize, 1usize), (11, 1), (13, 2), (16, 2)] {
            let mat = random_dd(&mut rng, n, r, false);
            let scale = mat.max_band_abs();
            for i in 0..n {
                let k = compute_reduction_coeffs(&mat, i, 1).unwrap();
                let dense = mat.to_dense();
                // Combined row i minus the neighbor combination.
                let mut row: Vec<f64> = dense.row(i).to_vec();
                for j in 1..=r {
                    if i + j < n {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v -= k.k_plus[j - 1] * dense[(i + j, c)];
                        }
                    }
                    if i >= j {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v -= k.k_minus[j - 1] * dense[(i - j, c)];
                        }
                    }
                }
                for q in [-3isize, -1, 1, 3] {
                    if q.unsigned_abs() > 2 * r - 1 {
                        continue;
                    }
                    let col = i as isize + q;
                    if col >= 0 && col < n as isize {
                        assert!(
                            row[col as usize].abs() <= 1e-13 * scale,
                            "n={n} r={r} row {i} offset {q} left {}",
                            row[col as usize]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn identity_solve_is_exact() {
        let mat = BandedMatrix::identity(10);
        let rhs = RhsBatch::from_vec(10, 2, (0..20).map(|v| v as f64 - 9.5).collect());
        let x = pcr_full_solve(&mat, &rhs).unwrap();
        assert_eq!(x, rhs);
    }

    #[test]
    fn uniform_tridiagonal_recovers_ones() {
        let mat = BandedMatrix::uniform(8, false, &[1.0 / 3.0, 1.0, 1.0 / 3.0]).unwrap();
        let ones = RhsBatch::from_vec(8, 1, vec![1.0; 8]);
        let b = mat.matvec(&ones).unwrap();
        let x = pcr_full_solve(&mat, &b).unwrap();
        assert!(x.max_abs_diff(&ones) < 1e-13);
    }

    #[test]
    fn stage_count_is_ceil_log2() {
        for n in [3usize, 4, 5, 7, 8, 9, 16, 17, 33, 64] {
            let mat = BandedMatrix::uniform(n, false, &[0.3, 1.0, 0.3]).unwrap();
            let plan = PcrPlan::new(&mat).unwrap();
            let expect = (n as f64).log2().ceil() as usize;
            assert_eq!(plan.stage_count(), expect, "n={n}");
        }
    }

    #[test]
    fn pentadiagonal_batch_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mat = random_dd(&mut rng, 13, 2, false);
        let b = random_batch(&mut rng, 13, 4);
        let x = pcr_full_solve(&mat, &b).unwrap();
        let xd = dense_solve(&mat.to_dense(), &b.to_dense()).unwrap();
        let diff = x.to_dense().max_abs_diff(&xd);
        assert!(diff < 1e-12 * xd.max_abs().max(1.0), "diff {diff}");
    }

    #[test]
    fn random_sizes_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for r in [1usize, 2] {
            for n in [4usize, 5, 8, 11, 16, 23, 33, 64] {
                if n < 2 * r + 1 {
                    continue;
                }
                for m in [1usize, 8] {
                    let mat = random_dd(&mut rng, n, r, false);
                    let b = random_batch(&mut rng, n, m);
                    let x = pcr_full_solve(&mat, &b).unwrap();
                    let res = mat.residual_inf(&x, &b).unwrap();
                    for (c, v) in res.iter().enumerate() {
                        assert!(*v < 1e-12, "n={n} r={r} m={m} col {c} residual {v}");
                    }
                    let xd = dense_solve(&mat.to_dense(), &b.to_dense()).unwrap();
                    let diff = x.to_dense().max_abs_diff(&xd);
                    assert!(diff < 1e-11, "n={n} r={r} m={m} dense diff {diff}");
                }
            }
        }
    }

    #[test]
    fn batch_solve_matches_column_solves_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in [1usize, 2] {
            let mat = random_dd(&mut rng, 12, r, false);
            let b = random_batch(&mut rng, 12, 5);
            let x = pcr_full_solve(&mat, &b).unwrap();
            for c in 0..5 {
                let bc = RhsBatch::column(&b.column_values(c));
                let xc = pcr_full_solve(&mat, &bc).unwrap();
                assert_eq!(xc.values(), x.column_values(c).as_slice(), "r={r} column {c}");
            }
        }
    }

    #[test]
    fn coeffs_accept_explicit_strides() {
        // The stride interprets band slots as couplings at that spacing:
        // handing a recorded stage matrix back with its stride reproduces
        // the coefficients the plan used.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mat = random_dd(&mut rng, 13, 2, false);
        let (_, stages) = PcrPlan::new_with_trace(&mat).unwrap();
        let second = &stages[1];
        assert_eq!(second.stride, 2);
        for i in 0..13 {
            let k = compute_reduction_coeffs(&second.mat, i, second.stride).unwrap();
            // Neighbors out of range at this stride carry exact zeros.
            if i < 2 {
                assert_eq!(k.k_minus[0], 0.0);
            }
            if i >= 9 {
                assert_eq!(k.k_plus[1], 0.0);
            }
        }
    }

    #[test]
    fn every_stage_keeps_the_parent_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(n, r) in &[(8usize, 1usize), (11, 1), (16, 2)] {
            let mat = random_dd(&mut rng, n, r, false);
            let b = random_batch(&mut rng, n, 1);
            let x = dense_solve(&mat.to_dense(), &b.to_dense()).unwrap();
            let (plan, stages) = PcrPlan::new_with_trace(&mat).unwrap();
            let mut rhs_trace = Vec::new();
            plan.apply_traced(&b, Some(&mut rhs_trace)).unwrap();
            // rhs_trace has one extra snapshot (before the final divide).
            assert_eq!(rhs_trace.len(), stages.len() + 1);
            for (s, stage) in stages.iter().enumerate() {
                let bs = &rhs_trace[s];
                for i in 0..n {
                    let mut lhs = 0.0;
                    for off in -(r as isize)..=(r as isize) {
                        let col = i as isize + off * stage.stride as isize;
                        if col >= 0 && col < n as isize {
                            lhs += stage.mat.band_entry(i, off) * x[(col as usize, 0)];
                        }
                    }
                    assert!(
                        (lhs - bs.at(i, 0)).abs() < 1e-12 * bs.max_abs().max(1.0),
                        "stage {s} row {i}: {} vs {}",
                        lhs,
                        bs.at(i, 0)
                    );
                }
            }
        }
    }

    #[test]
    fn singular_diagonal_is_reported() {
        let mat = BandedMatrix::new(4, false, vec![vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]);
        let mat = mat.unwrap();
        let rhs = RhsBatch::zeros(4, 1);
        match pcr_full_solve(&mat, &rhs) {
            Err(SolverError::SingularPivot { .. }) => {}
            other => panic!("expected singular pivot, got {other:?}"),
        }
    }

    #[test]
    fn matvec_cyclic_row_sums() {
        let mat = BandedMatrix::uniform(8, true, &[1.0 / 3.0, 1.0, 1.0 / 3.0]).unwrap();
        let ones = RhsBatch::from_vec(8, 1, vec![1.0; 8]);
        let y = mat.matvec(&ones).unwrap();
        for i in 0..8 {
            assert!((y.at(i, 0) - 5.0 / 3.0).abs() < 1e-15);
        }
        let x = RhsBatch::from_vec(8, 2, (0..16).map(|v| v as f64 - 7.5).collect());
        assert_eq!(BandedMatrix::identity(8).matvec(&x).unwrap(), x);
    }

    #[test]
    fn acyclic_constructor_rejects_corner_entries() {
        let mut bands = vec![vec![0.1; 4], vec![1.0; 4], vec![0.1; 4]];
        bands[2][3] = 0.5; // would couple row 3 to column 4
        assert!(BandedMatrix::new(4, false, bands).is_err());
    }

    #[test]
    fn residual_of_dense_solution_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mat = random_dd(&mut rng, 16, 2, true);
        let b = random_batch(&mut rng, 16, 3);
        let x = dense_solve(&mat.to_dense(), &b.to_dense()).unwrap();
        let res = mat.residual_inf(&RhsBatch::from_dense(&x), &b).unwrap();
        assert!(res.iter().all(|&v| v < 1e-12));
    }
}
