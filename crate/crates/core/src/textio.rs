//! Small helpers for the text formats: numbers are written with 17
//! significant digits so every f64 round-trips losslessly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a matrix as comma-separated rows.
pub(crate) fn write_csv_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), rows * cols);
    let mut text = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| fmt_g17(data[r * cols + c])).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a rectangular comma-separated matrix.
pub(crate) fn read_csv_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut width = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(format!(
                    "{}: line {}: bad number {field:?}",
                    path.display(),
                    ln + 1
                ))
            })?;
            data.push(v);
            width += 1;
        }
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::format(format!(
                    "{}: line {} has {width} fields, expected {c}",
                    path.display(),
                    ln + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::format(format!("{}: empty matrix", path.display())));
    }
    Ok((rows, cols.unwrap(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_round_trips_awkward_values() {
        for v in [0.1, 1.0 / 3.0, f64::MIN_POSITIVE, -1e300, 0.95] {
            let parsed: f64 = fmt_g17(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn csv_matrix_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let data = vec![0.1, 2.0 / 3.0, -5e-9, 1.0, 0.0, 42.0];
        write_csv_matrix(&path, 2, 3, &data).unwrap();
        let (r, c, back) = read_csv_matrix(&path).unwrap();
        assert_eq!((r, c), (2, 3));
        for (a, b) in back.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
