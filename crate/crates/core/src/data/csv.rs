//! CSV ingestion: header row, one sample per line, label in the final column.

use std::path::Path;

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn load_csv(path: &Path, domain: Domain) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file, expected a header row", path.display())))?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(Error::Format(format!(
            "{}: need at least one feature column and a label column",
            path.display()
        )));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Data(format!(
                "{} line {}: expected {} fields, found {}",
                path.display(),
                lineno + 1,
                width,
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(width - 1);
        for f in &fields[..width - 1] {
            row.push(f.trim().parse::<f64>().map_err(|e| {
                Error::Data(format!("{} line {}: bad feature value {f:?}: {e}", path.display(), lineno + 1))
            })?);
        }
        let label = fields[width - 1].trim().parse::<usize>().map_err(|e| {
            Error::Data(format!(
                "{} line {}: bad label {:?}: {e}",
                path.display(),
                lineno + 1,
                fields[width - 1]
            ))
        })?;
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no samples after the header", path.display())));
    }
    let samples = Matrix::from_rows(&rows)?;
    Dataset::new(samples, labels, domain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_load_simple_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,b,label\n0.5,1.0,3\n0.25,-1.5,7\n").unwrap();
        let d = load_csv(&p, Domain::Source).unwrap();
        assert_eq!(d.samples.shape(), (2, 2));
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.samples.get(1, 1), -1.5);
    }

    #[test]
    fn test_bad_field_count_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,label\n1.0,2\n1.0\n").unwrap();
        let err = load_csv(&p, Domain::Source).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn test_empty_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "").unwrap();
        assert!(load_csv(&p, Domain::Source).is_err());
    }
}
