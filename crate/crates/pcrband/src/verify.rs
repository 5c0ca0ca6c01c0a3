//! Oracle-equivalence and invariant suites.
//!
//! Every check compares the solver stack against an independent reference
//! (dense Gaussian elimination, closed-form identities, combinatorial
//! stage formulas) and reports a pass/fail line. The CLI `verify` command
//! runs them all; the acceptance test target pins the subset that gates a
//! release. All randomness is seeded and all runs use the lockstep
//! transport, so reports are byte-identical across reruns.

use crate::banded::{pcr_full_solve, BandedMatrix, RhsBatch};
use crate::compactfd::{apply_distributed, apply_rhs, CompactOp, Field3, SchemeSpec, Staggering};
use crate::dense::{dense_solve, DenseMat};
use crate::error::SolverError;
use crate::reduced::{build_schedule, tags, Stage};
use crate::solver;
use crate::transport::{Mode, TraceEvent};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// One verification outcome.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn pass(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: false,
            detail: detail.into(),
        }
    }

    fn from_bound(name: impl Into<String>, value: f64, tol: f64) -> Self {
        let name = name.into();
        let detail = format!("{value:.3e} (tol {tol:.1e})");
        if value <= tol {
            Check::pass(name, detail)
        } else {
            Check::fail(name, detail)
        }
    }
}

/// Random diagonally dominant banded matrix.
pub fn random_dd_matrix(rng: &mut ChaCha8Rng, n: usize, r: usize, cyclic: bool) -> BandedMatrix {
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
        bands[r][i] = off_sum + rng.gen_range(0.5..1.5);
    }
    BandedMatrix::new(n, cyclic, bands).expect("random matrix is well formed")
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize) -> RhsBatch {
    RhsBatch::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Dense-solver self checks against exact values.
pub fn check_dense_oracle() -> Vec<Check> {
    let mut out = Vec::new();
    let mut h = DenseMat::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            h[(i, j)] = 1.0 / ((i + j + 1) as f64);
        }
    }
    let e1 = DenseMat::column(&[1.0, 0.0, 0.0, 0.0]);
    match dense_solve(&h, &e1) {
        Ok(x) => {
            let exact = [16.0, -120.0, 240.0, -140.0];
            let err = (0..4)
                .map(|i| (x[(i, 0)] - exact[i]).abs() / exact[i].abs())
                .fold(0.0f64, f64::max);
            out.push(Check::from_bound("dense/hilbert4-exact-inverse", err, 1e-9));
        }
        Err(e) => out.push(Check::fail("dense/hilbert4-exact-inverse", e.to_string())),
    }
    let sing = DenseMat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
    let b = DenseMat::column(&[1.0, 1.0]);
    out.push(match dense_solve(&sing, &b) {
        Err(SolverError::SingularPivot { .. }) => {
            Check::pass("dense/singular-rejected", "SingularPivot raised")
        }
        other => Check::fail(
            "dense/singular-rejected",
            format!("expected SingularPivot, got ok={}", other.is_ok()),
        ),
    });
    out
}

/// Shared-memory PCR vs the dense oracle over a size sweep.
pub fn check_shared_pcr(seed: u64, sizes: &[usize]) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_res = 0.0f64;
    for &n in sizes {
        for r in [1usize, 2] {
            if n < r + 1 {
                continue;
            }
            for m in [1usize, 8] {
                let a = random_dd_matrix(&mut rng, n, r, false);
                let b = random_batch(&mut rng, n, m);
                match pcr_full_solve(&a, &b) {
                    Ok(x) => {
                        let res = a
                            .residual_inf(&x, &b)
                            .unwrap()
                            .into_iter()
                            .fold(0.0f64, f64::max);
                        worst_res = worst_res.max(res);
                        let xd = dense_solve(&a.to_dense(), &b.to_dense()).unwrap();
                        worst = worst.max(x.to_dense().max_abs_diff(&xd));
                    }
                    Err(e) => {
                        return vec![Check::fail(
                            "pcr/dense-equivalence",
                            format!("n={n} r={r} m={m}: {e}"),
                        )]
                    }
                }
            }
        }
    }
    vec![
        Check::from_bound("pcr/residual", worst_res, 1e-12),
        Check::from_bound("pcr/dense-equivalence", worst, 1e-11),
    ]
}

/// Split/reassemble round trip is exact.
pub fn check_partition_roundtrip(seed: u64) -> Check {
    use crate::partition::{reassemble_dense, split_matrix, PartitionLayout};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    for &(n, r, cyclic, p) in &[
        (24usize, 1usize, true, 3usize),
        (24, 1, false, 4),
        (28, 2, true, 3),
        (28, 2, false, 2),
    ] {
        let a = random_dd_matrix(&mut rng, n, r, cyclic);
        let layout = PartitionLayout::balanced(n, p, r, cyclic).unwrap();
        let blocks = match split_matrix(&a, &layout) {
            Ok(b) => b,
            Err(e) => return Check::fail("partition/roundtrip", e.to_string()),
        };
        if reassemble_dense(&blocks, &layout) != a.to_dense() {
            return Check::fail(
                "partition/roundtrip",
                format!("n={n} r={r} cyclic={cyclic} p={p}: reassembly differs"),
            );
        }
    }
    Check::pass("partition/roundtrip", "bitwise equal on all cases")
}

/// Stage-count formulas against the schedule builder for p in [1, 64].
pub fn check_schedule_formulas() -> Check {
    for p in 1..=64usize {
        let s = build_schedule(p, true);
        let log = if p == 1 { 0 } else { p.ilog2() as usize };
        let parity: usize = (0..=log).map(|k| (p >> k) & 1).sum();
        if s.pcr_stages != log || s.detached_rows != p - (1 << log) || s.detach_stages != parity - 1
        {
            return Check::fail("schedule/formulas", format!("cyclic p={p} mismatch"));
        }
        let acy = build_schedule(p, false);
        let celog = (p as f64).log2().ceil() as usize;
        if acy.pcr_stages != celog || acy.detach_stages != 0 || acy.detached_rows != 0 {
            return Check::fail("schedule/formulas", format!("acyclic p={p} mismatch"));
        }
    }
    let s11 = build_schedule(11, true);
    if (s11.pcr_stages, s11.detached_rows, s11.detach_stages) != (3, 3, 2) {
        return Check::fail("schedule/formulas", "p=11 example mismatch");
    }
    Check::pass(
        "schedule/formulas",
        "all p in [1,64], cyclic and acyclic; p=11 gives (3,3,2)",
    )
}

/// Run an instrumented distributed solve for every p in [1, 64] and count
/// the stages and detached rows actually executed.
pub fn check_instrumented_stage_counts(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    for p in 1..=64usize {
        let n = 3 * p.max(2);
        let a = random_dd_matrix(&mut rng, n, 1, true);
        let b = random_batch(&mut rng, n, 1);
        let out = match solver::solve(&a, &b, p, Mode::Lockstep) {
            Ok(o) => o,
            Err(e) => return Check::fail("schedule/instrumented", format!("p={p}: {e}")),
        };
        let mut pcr_labels = std::collections::BTreeSet::new();
        let mut detach_labels = std::collections::BTreeSet::new();
        let mut reattach_labels = std::collections::BTreeSet::new();
        let mut detach_sends = 0usize;
        for ev in &out.trace {
            match ev {
                TraceEvent::Stage { label, .. } => {
                    if let Some(l) = label.strip_prefix("pcr:") {
                        pcr_labels.insert(l.to_string());
                    } else if let Some(l) = label.strip_prefix("detach:") {
                        detach_labels.insert(l.to_string());
                    } else if let Some(l) = label.strip_prefix("reattach:") {
                        reattach_labels.insert(l.to_string());
                    }
                }
                TraceEvent::Send { tag, .. } if tags::is_detach_prev(*tag) => {
                    detach_sends += 1;
                }
                _ => {}
            }
        }
        let log = if p == 1 { 0 } else { p.ilog2() as usize };
        let parity: usize = (0..=log).map(|k| (p >> k) & 1).sum();
        let expect = (log, p - (1 << log), parity - 1);
        let got = (pcr_labels.len(), detach_sends, detach_labels.len());
        if got != expect || reattach_labels.len() != expect.2 {
            return Check::fail(
                "schedule/instrumented",
                format!("p={p}: executed {got:?}, formulas say {expect:?}"),
            );
        }
        // Stage counters: pcr + detach + reattach barriers on every rank.
        let total = (expect.0 + 2 * expect.2) as u64;
        if out.counters.iter().any(|c| c.stages_entered != total) {
            return Check::fail(
                "schedule/instrumented",
                format!("p={p}: stage counters disagree with {total}"),
            );
        }
    }
    Check::pass(
        "schedule/instrumented",
        "executed stage and detach counts match the formulas for p in [1,64]",
    )
}

/// Per-rank PCR partner sets observed in the message trace equal the
/// schedule's roles (run at p = 11, the worked example).
pub fn check_partner_trace(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A);
    let p = 11;
    let n = 3 * p;
    let a = random_dd_matrix(&mut rng, n, 1, true);
    let b = random_batch(&mut rng, n, 1);
    let out = match solver::solve(&a, &b, p, Mode::Lockstep) {
        Ok(o) => o,
        Err(e) => return Check::fail("schedule/partner-trace", e.to_string()),
    };
    // Observed: per (level, sender) -> set of PCR destinations.
    let mut observed = std::collections::BTreeMap::<(usize, usize), Vec<usize>>::new();
    for ev in &out.trace {
        if let TraceEvent::Send { from, to, tag, .. } = ev {
            if tags::is_pcr(*tag) {
                observed
                    .entry((tags::pcr_level(*tag), *from))
                    .or_default()
                    .push(*to);
            }
        }
    }
    observed.values_mut().for_each(|v| {
        v.sort_unstable();
        v.dedup();
    });
    let schedule = build_schedule(p, true);
    let mut expected = std::collections::BTreeMap::<(usize, usize), Vec<usize>>::new();
    for stage in &schedule.stages {
        if let Stage::Pcr { level, roles } = stage {
            for role in roles {
                let mut partners: Vec<usize> =
                    [role.left, role.right].into_iter().flatten().collect();
                partners.sort_unstable();
                partners.dedup();
                if !partners.is_empty() {
                    expected.insert((*level, role.row), partners);
                }
            }
        }
    }
    if observed == expected {
        Check::pass(
            "schedule/partner-trace",
            "p=11 message trace matches the schedule's partner structure",
        )
    } else {
        Check::fail("schedule/partner-trace", "trace/schedule partner mismatch")
    }
}

/// The acceptance oracle grid: every (p, r, cyclic) against dense.
pub fn check_oracle_equivalence(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0E);
    let n = 64;
    let m = 8;
    let mut worst_res = 0.0f64;
    let mut worst_dev = 0.0f64;
    for cyclic in [true, false] {
        for r in [1usize, 2] {
            let a = random_dd_matrix(&mut rng, n, r, cyclic);
            let b = random_batch(&mut rng, n, m);
            let xd = dense_solve(&a.to_dense(), &b.to_dense()).unwrap();
            for p in [1usize, 2, 3, 4, 5, 7, 8, 11, 16] {
                match solver::solve(&a, &b, p, Mode::Lockstep) {
                    Ok(out) => {
                        let res = a
                            .residual_inf(&out.x, &b)
                            .unwrap()
                            .into_iter()
                            .fold(0.0f64, f64::max);
                        worst_res = worst_res.max(res);
                        worst_dev = worst_dev.max(out.x.to_dense().max_abs_diff(&xd));
                    }
                    Err(e) => {
                        return vec![Check::fail(
                            "distributed/oracle-equivalence",
                            format!("cyclic={cyclic} r={r} p={p}: {e}"),
                        )]
                    }
                }
            }
        }
    }
    vec![
        Check::from_bound("distributed/residual", worst_res, 1e-12),
        Check::from_bound("distributed/dense-deviation", worst_dev, 1e-11),
    ]
}

/// Solutions agree pairwise across every rank count.
pub fn check_p_independence(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1D);
    let n = 64;
    let ps = [1usize, 2, 3, 4, 5, 7, 8, 11, 16];
    let mut worst = 0.0f64;
    for cyclic in [true, false] {
        for r in [1usize, 2] {
            let a = random_dd_matrix(&mut rng, n, r, cyclic);
            let b = random_batch(&mut rng, n, 8);
            let mut sols = Vec::new();
            for &p in &ps {
                match solver::solve(&a, &b, p, Mode::Lockstep) {
                    Ok(out) => sols.push(out.x),
                    Err(e) => {
                        return Check::fail(
                            "distributed/p-independence",
                            format!("cyclic={cyclic} r={r} p={p}: {e}"),
                        )
                    }
                }
            }
            for i in 0..sols.len() {
                for j in i + 1..sols.len() {
                    worst = worst.max(sols[i].max_abs_diff(&sols[j]));
                }
            }
        }
    }
    Check::from_bound("distributed/p-independence", worst, 1e-12)
}

/// The boundary exchange carries exactly r*(2r + m) values per direction.
pub fn check_comm_sparsity(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1);
    let mut out = Vec::new();
    for r in [1usize, 2] {
        let n = 36;
        let m = 5;
        let a = random_dd_matrix(&mut rng, n, r, true);
        let b = random_batch(&mut rng, n, m);
        match solver::solve(&a, &b, 3, Mode::Lockstep) {
            Ok(run) => {
                let expect = 8 * (r * (2 * r + m)) as u64;
                let ok = run.assembly_bytes_sent.iter().all(|&v| v == expect);
                let name = format!("transport/boundary-bytes-r{r}");
                if ok {
                    out.push(Check::pass(
                        name,
                        format!("{expect} bytes = r*(2r+m) values per direction"),
                    ));
                } else {
                    out.push(Check::fail(
                        name,
                        format!("{:?} != {expect}", run.assembly_bytes_sent),
                    ));
                }
            }
            Err(e) => out.push(Check::fail(
                format!("transport/boundary-bytes-r{r}"),
                e.to_string(),
            )),
        }
    }
    out
}

/// Compact schemes: constant identities plus sixth-order convergence.
pub fn check_compact_schemes() -> Vec<Check> {
    let mut out = Vec::new();
    let n = 32;
    let c = 2.5;
    let f = Field3::from_fn([n, 1, 1], |_, _, _| c);
    let interp = SchemeSpec::staggered_interp_6(Staggering::ToStaggered);
    let op = CompactOp::new(interp, n).unwrap();
    let rel = op.apply(&f, 0).unwrap().max_abs_diff(&f) / c;
    out.push(Check::from_bound("compact/interp-constant", rel, 1e-14));
    let rhs = apply_rhs(&interp, &f, 0).unwrap();
    let rhs_err = (0..n)
        .map(|i| (rhs.at(i, 0, 0) - 1.6 * c).abs())
        .fold(0.0f64, f64::max);
    out.push(Check::from_bound(
        "compact/interp-row-sum",
        rhs_err / c,
        1e-14,
    ));

    let h = 2.0 * PI / n as f64;
    let deriv_const = {
        let spec = SchemeSpec::collocated_d1_6(h);
        let op = CompactOp::new(spec, n).unwrap();
        op.apply(&f, 0).unwrap().max_abs()
    };
    out.push(Check::from_bound(
        "compact/derivative-constant",
        deriv_const,
        1e-13,
    ));

    // Convergence order between N = 32 and N = 64 for all three schemes.
    let order = |kind: usize| -> f64 {
        let mut errs = Vec::new();
        for n in [32usize, 64] {
            let h = 2.0 * PI / n as f64;
            let spec = match kind {
                0 => SchemeSpec::collocated_d1_6(h),
                1 => SchemeSpec::staggered_d1_6(h, Staggering::ToStaggered),
                _ => SchemeSpec::staggered_interp_6(Staggering::ToStaggered),
            };
            let f = Field3::from_fn([n, 1, 1], |i, _, _| (i as f64 * h).sin());
            let op = CompactOp::new(spec, n).unwrap();
            let got = op.apply(&f, 0).unwrap();
            let mut err = 0.0f64;
            for i in 0..n {
                let x = match kind {
                    0 => i as f64 * h,
                    _ => (i as f64 + 0.5) * h,
                };
                let exact = if kind == 2 { x.sin() } else { x.cos() };
                err = err.max((got.at(i, 0, 0) - exact).abs());
            }
            errs.push(err);
        }
        (errs[0] / errs[1]).log2()
    };
    for (kind, name) in [
        (0, "compact/order-collocated-derivative"),
        (1, "compact/order-staggered-derivative"),
        (2, "compact/order-staggered-interpolation"),
    ] {
        let o = order(kind);
        let detail = format!("observed order {o:.3} (expect 5.5..6.5)");
        out.push(if (5.5..=6.5).contains(&o) {
            Check::pass(name, detail)
        } else {
            Check::fail(name, detail)
        });
    }

    // Decomposed and single-rank applications agree.
    let f3 = Field3::from_fn([n, 4, 4], |i, _, _| (i as f64 * h).sin());
    let spec = SchemeSpec::collocated_d1_6(h);
    let single = apply_distributed(&spec, &f3, 0, 1, Mode::Lockstep).unwrap();
    let multi = apply_distributed(&spec, &f3, 0, 4, Mode::Lockstep).unwrap();
    out.push(Check::from_bound(
        "compact/p-independence",
        multi.max_abs_diff(&single),
        1e-12,
    ));
    out
}

/// Two lockstep runs of the same solve produce identical traces, counters
/// and bitwise identical numbers.
pub fn check_determinism(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE);
    let a = random_dd_matrix(&mut rng, 33, 1, true);
    let b = random_batch(&mut rng, 33, 3);
    let one = solver::solve(&a, &b, 5, Mode::Lockstep);
    let two = solver::solve(&a, &b, 5, Mode::Lockstep);
    match (one, two) {
        (Ok(x), Ok(y)) => {
            if x.x == y.x && x.trace == y.trace && x.counters == y.counters {
                Check::pass(
                    "transport/lockstep-determinism",
                    "identical trace, counters and bits across reruns",
                )
            } else {
                Check::fail("transport/lockstep-determinism", "reruns differ")
            }
        }
        _ => Check::fail("transport/lockstep-determinism", "solve failed"),
    }
}

/// A singular system is reported as SingularPivot through the full
/// distributed path.
pub fn check_singular_rejected() -> Check {
    let n = 16;
    let a = BandedMatrix::new(n, true, vec![vec![1.0; n], vec![0.0; n], vec![1.0; n]]).unwrap();
    let b = RhsBatch::from_vec(n, 1, vec![1.0; n]);
    match solver::solve(&a, &b, 2, Mode::Lockstep) {
        Err(SolverError::SingularPivot { .. }) => {
            Check::pass("distributed/singular-rejected", "SingularPivot raised")
        }
        Err(e) => Check::fail("distributed/singular-rejected", format!("wrong error: {e}")),
        Ok(_) => Check::fail("distributed/singular-rejected", "solve unexpectedly passed"),
    }
}

/// Everything, in report order.
pub fn all_checks(seed: u64, sizes: &[usize]) -> Vec<Check> {
    let mut out = Vec::new();
    out.extend(check_dense_oracle());
    out.extend(check_shared_pcr(seed, sizes));
    out.push(check_partition_roundtrip(seed));
    out.push(check_schedule_formulas());
    out.push(check_instrumented_stage_counts(seed));
    out.push(check_partner_trace(seed));
    out.extend(check_oracle_equivalence(seed));
    out.push(check_p_independence(seed));
    out.extend(check_comm_sparsity(seed));
    out.extend(check_compact_schemes());
    out.push(check_determinism(seed));
    out.push(check_singular_rejected());
    out
}

pub const DEFAULT_SIZES: [usize; 6] = [4, 8, 11, 16, 33, 64];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let checks = all_checks(42, &DEFAULT_SIZES);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(checks.len() > 15);
    }

    #[test]
    fn report_is_deterministic() {
        let a = all_checks(7, &[8, 16]);
        let b = all_checks(7, &[8, 16]);
        let fmt = |cs: &[Check]| {
            cs.iter()
                .map(|c| format!("{}|{}|{}", c.name, c.passed, c.detail))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(fmt(&a), fmt(&b));
    }
}
