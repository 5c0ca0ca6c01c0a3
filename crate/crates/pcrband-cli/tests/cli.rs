//! End-to-end tests of the command-line interface: file formats, exit
//! codes, CSV schemas and rerun determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pcrband"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pcrband-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn parse_rhs_file(path: &Path) -> (usize, usize, Vec<f64>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(header[0], "rhs");
    let n: usize = header[1].parse().unwrap();
    let m: usize = header[2].parse().unwrap();
    let vals: Vec<f64> = lines
        .flat_map(|l| l.split_whitespace().map(|v| v.parse::<f64>().unwrap()))
        .collect();
    assert_eq!(vals.len(), n * m);
    (n, m, vals)
}

#[test]
fn solve_matches_shipped_expected_output() {
    let dir = tmpdir("solve");
    let out = dir.join("x.txt");
    for ranks in ["1", "2", "3"] {
        let status = bin()
            .args(["solve", "--matrix"])
            .arg(data("sample_matrix.txt"))
            .arg("--rhs")
            .arg(data("sample_rhs.txt"))
            .args(["--ranks", ranks, "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        let (_, _, got) = parse_rhs_file(&out);
        let (_, _, expect) = parse_rhs_file(&data("expected_solution.txt"));
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12, "ranks={ranks}: {g} vs {e}");
        }
    }
}

#[test]
fn malformed_header_fails_with_line_number() {
    let dir = tmpdir("badheader");
    let bad = dir.join("bad.txt");
    std::fs::write(&bad, "banded 8 3\n1 1 1\n").unwrap();
    let out = bin()
        .args(["solve", "--matrix"])
        .arg(&bad)
        .arg("--rhs")
        .arg(data("sample_rhs.txt"))
        .args(["--ranks", "1", "--out"])
        .arg(dir.join("x.txt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

#[test]
fn singular_system_exits_nonzero() {
    let dir = tmpdir("singular");
    let mat = dir.join("singular.txt");
    // Zero diagonal, ones off-diagonal: the final PCR pivot vanishes.
    std::fs::write(
        &mat,
        "banded 6 3 true\n1 1 1 1 1 1\n0 0 0 0 0 0\n1 1 1 1 1 1\n",
    )
    .unwrap();
    let rhs = dir.join("b.txt");
    std::fs::write(&rhs, "rhs 6 1\n1\n1\n1\n1\n1\n1\n").unwrap();
    let out = bin()
        .args(["solve", "--matrix"])
        .arg(&mat)
        .arg("--rhs")
        .arg(&rhs)
        .args(["--ranks", "2", "--out"])
        .arg(dir.join("x.txt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("singular"), "stderr: {stderr}");
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn verify_reruns_are_byte_identical() {
    let args = ["verify", "--seed", "7", "--sizes", "8,16"];
    let a = run_ok(&args);
    let b = run_ok(&args);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8_lossy(&a.stdout);
    assert!(text.contains("0 failed"), "report:\n{text}");
}

#[test]
fn tgv_csv_has_one_row_per_step_and_constant_mass() {
    let dir = tmpdir("tgv");
    let out = dir.join("diag.csv");
    run_ok(&[
        "tgv",
        "--n",
        "32",
        "--steps",
        "10",
        "--ranks",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "step,time,mass,momentum_x,momentum_y,momentum_z,total_energy,kinetic_energy,enstrophy"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    let masses: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    for m in &masses {
        assert!(((m - masses[0]) / masses[0]).abs() < 1e-11);
    }

    // Lockstep reruns reproduce the file byte for byte.
    let out2 = dir.join("diag2.csv");
    run_ok(&[
        "tgv",
        "--n",
        "32",
        "--steps",
        "10",
        "--ranks",
        "2",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn bench_csv_schema_stage_counts_and_speedups() {
    let out = run_ok(&[
        "bench",
        "--mode",
        "weak",
        "--ranks",
        "1,2,4,7,8",
        "--n0",
        "32",
        "--batch",
        "4",
        "--reps",
        "2",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,p,n,batch,wall_seconds,pcr_stages,detach_stages,messages,bytes,speedup"
    );
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 5);

    // Weak scaling stage counts follow floor(log2 p); p = 7 detaches,
    // p = 8 does not.
    let stage_of = |row: &Vec<String>| -> (usize, usize, usize) {
        (
            row[1].parse().unwrap(),
            row[5].parse().unwrap(),
            row[6].parse().unwrap(),
        )
    };
    let got: Vec<(usize, usize, usize)> = rows.iter().map(stage_of).collect();
    assert_eq!(
        got,
        vec![(1, 0, 0), (2, 1, 0), (4, 2, 0), (7, 2, 2), (8, 3, 0)]
    );

    // The speedup column recomputes exactly from the time column.
    let t1: f64 = rows[0][4].parse().unwrap();
    for row in &rows {
        let p: f64 = row[1].parse().unwrap();
        let tp: f64 = row[4].parse().unwrap();
        let speedup: f64 = row[9].parse().unwrap();
        let recomputed = p * t1 / tp;
        assert_eq!(speedup.to_bits(), recomputed.to_bits(), "p = {p}");
    }
}

#[test]
fn bench_strong_mode_speedup_definition() {
    let out = run_ok(&[
        "bench", "--mode", "strong", "--ranks", "1,2,4", "--n0", "64", "--batch", "4", "--reps",
        "2",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let t1: f64 = rows[0][4].parse().unwrap();
    for row in &rows {
        let n: usize = row[2].parse().unwrap();
        assert_eq!(n, 64, "strong mode keeps the global size fixed");
        let tp: f64 = row[4].parse().unwrap();
        let speedup: f64 = row[9].parse().unwrap();
        assert_eq!(speedup.to_bits(), (t1 / tp).to_bits());
    }
}
