//! Text file formats for matrices and right-hand sides.
//!
//! Matrix files: a header line `banded <n> <w> <cyclic>` followed by `w`
//! lines, one diagonal each from lowest to highest, with `n` whitespace
//! separated values per line. Right-hand sides: `rhs <n> <m>` followed by
//! `n` rows of `m` values. Values are written in shortest round-trip
//! decimal form, so files reproduce the exact binary floats.

use pcrband::{BandedMatrix, RhsBatch};
use std::fmt::Write as _;
use std::path::Path;

/// Parse failure with a 1-based line number.
#[derive(Debug)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

fn fail<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        message: message.into(),
    })
}

fn parse_values(line: &str, lineno: usize, expect: usize) -> Result<Vec<f64>, ParseError> {
    let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    match vals {
        Ok(v) if v.len() == expect => Ok(v),
        Ok(v) => fail(
            lineno,
            format!("expected {expect} values, found {}", v.len()),
        ),
        Err(e) => fail(lineno, format!("bad number: {e}")),
    }
}

pub fn parse_matrix(text: &str) -> Result<BandedMatrix, ParseError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (ln, header) = match lines.next() {
        Some(x) => x,
        None => return fail(1, "empty file"),
    };
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "banded" {
        return fail(ln + 1, "expected header `banded <n> <w> <cyclic>`");
    }
    let n: usize = parts[1].parse().map_err(|e| ParseError {
        line: ln + 1,
        message: format!("bad n: {e}"),
    })?;
    let w: usize = parts[2].parse().map_err(|e| ParseError {
        line: ln + 1,
        message: format!("bad w: {e}"),
    })?;
    let cyclic = match parts[3] {
        "true" | "1" => true,
        "false" | "0" => false,
        other => return fail(ln + 1, format!("bad cyclic flag `{other}`")),
    };
    let mut bands = Vec::with_capacity(w);
    for _ in 0..w {
        let (ln, line) = match lines.next() {
            Some(x) => x,
            None => return fail(0, format!("expected {w} diagonal lines")),
        };
        bands.push(parse_values(line, ln + 1, n)?);
    }
    BandedMatrix::new(n, cyclic, bands).map_err(|e| ParseError {
        line: 1,
        message: e.to_string(),
    })
}

pub fn parse_rhs(text: &str) -> Result<RhsBatch, ParseError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (ln, header) = match lines.next() {
        Some(x) => x,
        None => return fail(1, "empty file"),
    };
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "rhs" {
        return fail(ln + 1, "expected header `rhs <n> <m>`");
    }
    let n: usize = parts[1].parse().map_err(|e| ParseError {
        line: ln + 1,
        message: format!("bad n: {e}"),
    })?;
    let m: usize = parts[2].parse().map_err(|e| ParseError {
        line: ln + 1,
        message: format!("bad m: {e}"),
    })?;
    let mut values = Vec::with_capacity(n * m);
    for _ in 0..n {
        let (ln, line) = match lines.next() {
            Some(x) => x,
            None => return fail(0, format!("expected {n} value rows")),
        };
        values.extend(parse_values(line, ln + 1, m)?);
    }
    Ok(RhsBatch::from_vec(n, m, values))
}

#[cfg(test)]
pub fn format_matrix(a: &BandedMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "banded {} {} {}", a.n(), a.bandwidth(), a.cyclic());
    for band in a.bands() {
        let line: Vec<String> = band.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn format_rhs(b: &RhsBatch) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "rhs {} {}", b.n(), b.m());
    for i in 0..b.n() {
        let line: Vec<String> = b.row(i).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn read_matrix(path: &Path) -> Result<BandedMatrix, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_matrix(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn read_rhs(path: &Path) -> Result<RhsBatch, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_rhs(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip() {
        let a = BandedMatrix::uniform(6, true, &[1.0 / 3.0, 1.0, 1.0 / 3.0]).unwrap();
        let text = format_matrix(&a);
        let b = parse_matrix(&text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rhs_roundtrip_preserves_bits() {
        let b = RhsBatch::from_vec(3, 2, vec![0.1, -2.5e-17, 1.0 / 3.0, 7.0, 1e300, -0.0]);
        let text = format_rhs(&b);
        let c = parse_rhs(&text).unwrap();
        assert_eq!(b.values(), c.values());
    }

    #[test]
    fn malformed_inputs_carry_line_numbers() {
        let err = parse_matrix("banded 4 3\n1 1 1 1\n").unwrap_err();
        assert_eq!(err.line, 1);
        let err = parse_matrix("banded 4 3 true\n1 1 1\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = parse_rhs("rhs 2 2\n1 2\n3 oops\n").unwrap_err();
        assert_eq!(err.line, 3);
    }
}
