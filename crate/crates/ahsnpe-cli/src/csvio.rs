//! Minimal CSV reading and writing for numeric tables. Values are printed
//! with f64's Display (shortest round-trip form), so a written table parses
//! back to bitwise-identical numbers. No quoting: headers are plain
//! identifiers and cells are numbers.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;

/// Writes a header row and one row per matrix row.
pub fn write_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        bail!("header has {} columns but matrix has {}", header.len(), m.ncols());
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a CSV written by [`write_matrix`]: returns the header and the
/// numeric body. A header-only file yields a 0-row matrix with the header's
/// column count.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .with_context(|| format!("{}: empty CSV", path.display()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let ncols = header.len();
    let mut values = Vec::new();
    let mut nrows = 0usize;
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ncols {
            bail!(
                "{} row {}: expected {} cells, found {}",
                path.display(),
                lineno + 2,
                ncols,
                cells.len()
            );
        }
        for c in cells {
            let v: f64 = c
                .trim()
                .parse()
                .with_context(|| format!("{} row {}: bad number {c:?}", path.display(), lineno + 2))?;
            values.push(v);
        }
        nrows += 1;
    }
    Ok((header, DMatrix::from_row_slice(nrows, ncols, &values)))
}

/// Column names `prefix_0..prefix_{n-1}`.
pub fn indexed_header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}_{j}")).collect()
}

/// Column names `prefix_i_j` for a flattened d x d matrix in row-major
/// order.
pub fn square_header(prefix: &str, d: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            names.push(format!("{prefix}_{i}_{j}"));
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_awkward_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let m = DMatrix::from_row_slice(2, 2, &[0.1, -1e-300, f64::MAX, 2.0 / 3.0]);
        write_matrix(&path, &indexed_header("v", 2), &m).unwrap();
        let (header, back) = read_matrix(&path).unwrap();
        assert_eq!(header, vec!["v_0", "v_1"]);
        assert_eq!(m, back);
    }

    #[test]
    fn rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        assert!(read_matrix(&path).is_err());
    }
}
