//! Command-line driver: verification suites, file-driven solves, scaling
//! benchmarks with simulated ranks, and the Taylor-Green vortex demo.

mod formats;

use clap::{Parser, Subcommand, ValueEnum};
use pcrband::banded::RhsBatch;
use pcrband::partition::PartitionLayout;
use pcrband::solver::{self, RankSystem};
use pcrband::tgv::{run_tgv, FlowConfig};
use pcrband::transport::{Mode, World};
use pcrband::verify;
use pcrband::BandedMatrix;
use rand_like::fill_rhs;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "pcrband",
    about = "Distributed direct solver for compact banded systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Strong,
    Weak,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the oracle-equivalence and invariant suites.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Acyclic PCR test sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Strong/weak scaling of the B[1/3, 1, 1/3] benchmark system; CSV on
    /// stdout.
    Bench {
        #[arg(long, value_enum)]
        mode: BenchMode,
        /// Rank counts, comma separated (include 1 for speedup columns).
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        /// Rows per rank (weak) or total rows (strong).
        #[arg(long)]
        n0: usize,
        /// Right-hand-side batch width.
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Timed repetitions per configuration.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Solve a banded system from matrix and right-hand-side files.
    Solve {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        rhs: PathBuf,
        #[arg(long, default_value_t = 1)]
        ranks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Taylor-Green vortex and write per-step diagnostics CSV.
    Tgv {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        ranks: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Verify { seed, sizes } => cmd_verify(seed, sizes),
        Cmd::Bench {
            mode,
            ranks,
            n0,
            batch,
            reps,
        } => report(cmd_bench(mode, &ranks, n0, batch, reps)),
        Cmd::Solve {
            matrix,
            rhs,
            ranks,
            out,
        } => report(cmd_solve(&matrix, &rhs, ranks, &out)),
        Cmd::Tgv {
            n,
            steps,
            ranks,
            out,
        } => report(cmd_tgv(n, steps, ranks, &out)),
    }
}

fn report(r: Result<(), String>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_verify(seed: u64, sizes: Option<Vec<usize>>) -> ExitCode {
    let sizes = sizes.unwrap_or_else(|| verify::DEFAULT_SIZES.to_vec());
    let checks = verify::all_checks(seed, &sizes);
    let mut failed = 0;
    for c in &checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("[{mark}] {:<42} {}", c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} failed (seed {seed}, sizes {sizes:?})",
        checks.len(),
        failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Deterministic pseudo-random right-hand sides for the benchmark system.
mod rand_like {
    use pcrband::banded::RhsBatch;
    use rand::{Rng, SeedableRng};

    pub fn fill_rhs(seed: u64, n: usize, m: usize) -> RhsBatch {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RhsBatch::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }
}

struct BenchRow {
    mode: &'static str,
    p: usize,
    n: usize,
    batch: usize,
    wall_seconds: f64,
    pcr_stages: usize,
    detach_stages: usize,
    messages: u64,
    bytes: u64,
    speedup: f64,
}

fn cmd_bench(
    mode: BenchMode,
    ranks: &[usize],
    n0: usize,
    batch: usize,
    reps: usize,
) -> Result<(), String> {
    if ranks.contains(&0) {
        return Err("rank counts must be >= 1".to_string());
    }
    if reps == 0 {
        return Err("reps must be >= 1".to_string());
    }
    let mode_name = match mode {
        BenchMode::Strong => "strong",
        BenchMode::Weak => "weak",
    };
    let mut rows: Vec<BenchRow> = Vec::new();
    for &p in ranks {
        let n = match mode {
            BenchMode::Strong => n0,
            BenchMode::Weak => n0 * p,
        };
        let a = BandedMatrix::uniform(n, true, &[1.0 / 3.0, 1.0, 1.0 / 3.0])
            .map_err(|e| e.to_string())?;
        let b = fill_rhs(0x9e3779b9 ^ n as u64, n, batch);

        // Correctness plus message instrumentation in lockstep mode.
        let check = solver::solve(&a, &b, p, Mode::Lockstep).map_err(|e| e.to_string())?;
        let res = a
            .residual_inf(&check.x, &b)
            .map_err(|e| e.to_string())?
            .into_iter()
            .fold(0.0f64, f64::max);
        if res > 1e-12 {
            return Err(format!("p={p}: benchmark residual {res:.3e} exceeds 1e-12"));
        }
        let messages: u64 = check.counters.iter().map(|c| c.messages_sent).sum();
        let bytes: u64 = check.counters.iter().map(|c| c.bytes_sent).sum();

        // Wall time in the concurrent mode, averaged over reps.
        let wall = timed_solve(&a, &b, p, reps)?;
        rows.push(BenchRow {
            mode: mode_name,
            p,
            n,
            batch,
            wall_seconds: wall,
            pcr_stages: check.schedule.pcr_stages,
            detach_stages: check.schedule.detach_stages,
            messages,
            bytes,
            speedup: f64::NAN,
        });
    }
    let t1 = rows.iter().find(|r| r.p == 1).map(|r| r.wall_seconds);
    for row in &mut rows {
        if let Some(t1) = t1 {
            row.speedup = match mode {
                BenchMode::Strong => t1 / row.wall_seconds,
                BenchMode::Weak => row.p as f64 * t1 / row.wall_seconds,
            };
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "mode,p,n,batch,wall_seconds,pcr_stages,detach_stages,messages,bytes,speedup"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.p,
            r.n,
            r.batch,
            r.wall_seconds,
            r.pcr_stages,
            r.detach_stages,
            r.messages,
            r.bytes,
            r.speedup
        );
    }
    print!("{out}");
    Ok(())
}

fn timed_solve(a: &BandedMatrix, b: &RhsBatch, p: usize, reps: usize) -> Result<f64, String> {
    let layout = PartitionLayout::balanced(a.n(), p, a.half_bandwidth(), a.cyclic())
        .map_err(|e| e.to_string())?;
    let layout_ref = &layout;
    let run = World::run(p, Mode::Concurrent, move |comm| {
        let rank = comm.rank().0;
        let sys = RankSystem::build(comm, a, layout_ref)?;
        let t = layout_ref.offset(rank);
        let chunk = b.slice_rows(t, t + layout_ref.chunk(rank));
        comm.stage_barrier("bench:warm")?;
        let t0 = Instant::now();
        for _ in 0..reps {
            sys.solve(comm, &chunk)?;
        }
        comm.stage_barrier("bench:done")?;
        Ok(t0.elapsed().as_secs_f64())
    })
    .map_err(|e| e.to_string())?;
    Ok(run.results[0] / reps as f64)
}

fn cmd_solve(matrix: &Path, rhs: &Path, ranks: usize, out: &Path) -> Result<(), String> {
    let a = formats::read_matrix(matrix)?;
    let b = formats::read_rhs(rhs)?;
    let solved = solver::solve(&a, &b, ranks, Mode::Lockstep).map_err(|e| e.to_string())?;
    let res = a
        .residual_inf(&solved.x, &b)
        .map_err(|e| e.to_string())?
        .into_iter()
        .fold(0.0f64, f64::max);
    std::fs::write(out, formats::format_rhs(&solved.x))
        .map_err(|e| format!("{}: {e}", out.display()))?;
    eprintln!(
        "solved {}x{} system on {ranks} ranks, max relative residual {res:.3e}",
        a.n(),
        a.n()
    );
    Ok(())
}

fn cmd_tgv(n: usize, steps: usize, ranks: usize, out: &Path) -> Result<(), String> {
    let cfg = FlowConfig::default();
    let run = run_tgv(&cfg, n, steps, ranks, Mode::Lockstep).map_err(|e| e.to_string())?;
    let mut csv = String::new();
    let _ = writeln!(
        csv,
        "step,time,mass,momentum_x,momentum_y,momentum_z,total_energy,kinetic_energy,enstrophy"
    );
    for d in run.diagnostics.iter().skip(1) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            d.step,
            d.time,
            d.mass,
            d.momentum[0],
            d.momentum[1],
            d.momentum[2],
            d.total_energy,
            d.kinetic_energy,
            d.enstrophy
        );
    }
    std::fs::write(out, csv).map_err(|e| format!("{}: {e}", out.display()))?;
    eprintln!(
        "tgv {n}^3, {steps} steps on {ranks} ranks, dt = {}, wrote {}",
        run.dt,
        out.display()
    );
    Ok(())
}
