//! CSV datasets: header row, final column is the response.

use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::rng::RngStream;
use crate::targets::{GpData, LogisticData};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: row {row}: cannot parse '{value}'")]
    Parse { path: String, row: usize, value: String },
    #[error("{path}: {msg}")]
    Shape { path: String, msg: String },
}

/// A numeric table split into covariates and response.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: Vec<String>,
    pub x: Matrix,
    pub y: Vector,
}

/// Row and covariate counts of the reference datasets, keyed by file stem.
/// Logistic counts include the intercept column.
pub const KNOWN_SHAPES: [(&str, usize, usize); 6] = [
    ("ripley", 250, 3),
    ("pima", 532, 8),
    ("heart", 270, 14),
    ("german", 1000, 25),
    ("boston", 455, 13),
    ("pendulum", 315, 9),
];

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let p = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|source| DataError::Csv { path: p.clone(), source })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|source| DataError::Csv { path: p.clone(), source })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 {
        return Err(DataError::Shape { path: p, msg: "need at least one covariate and a response".into() });
    }
    let mut values = Vec::new();
    let mut n = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| DataError::Csv { path: p.clone(), source })?;
        if rec.len() != header.len() {
            return Err(DataError::Shape { path: p, msg: format!("row {} has {} fields", row + 1, rec.len()) });
        }
        for v in rec.iter() {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| DataError::Parse { path: p.clone(), row: row + 1, value: v.to_string() })?;
            values.push(x);
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Shape { path: p, msg: "no data rows".into() });
    }
    let cols = header.len();
    let all = Matrix::from_row_slice(n, cols, &values);
    Ok(Dataset {
        header,
        x: all.columns(0, cols - 1).into_owned(),
        y: all.column(cols - 1).into_owned(),
    })
}

/// Centers and scales each column in place; constant columns are only centered.
pub fn standardize_columns(x: &mut Matrix) -> (Vector, Vector) {
    let n = x.nrows() as f64;
    let mut means = Vector::zeros(x.ncols());
    let mut sds = Vector::zeros(x.ncols());
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        col.apply(|v| *v = (*v - m) / sd);
        means[j] = m;
        sds[j] = sd;
    }
    (means, sds)
}

pub fn standardize_vector(y: &mut Vector) {
    let mut m = Matrix::from_column_slice(y.len(), 1, y.as_slice());
    standardize_columns(&mut m);
    y.copy_from_slice(m.as_slice());
}

pub fn append_intercept(x: &Matrix) -> Matrix {
    x.clone().insert_column(x.ncols(), 1.0)
}

/// Warns when a file named after a reference dataset has unexpected dimensions.
pub fn check_known_shape(path: &Path, n: usize, d: usize) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_ascii_lowercase();
    if let Some(&(_, en, ed)) = KNOWN_SHAPES.iter().find(|(name, _, _)| *name == stem) {
        if (en, ed) != (n, d) {
            warn!("{}: expected {en}x{ed}, found {n}x{d}", path.display());
        }
    }
}

/// Logistic-regression data: optionally standardized covariates plus a
/// trailing intercept column.
pub fn load_logistic(path: &Path, standardize: bool) -> Result<LogisticData, DataError> {
    let mut ds = load_csv(path)?;
    if standardize {
        standardize_columns(&mut ds.x);
    }
    let x = append_intercept(&ds.x);
    check_known_shape(path, x.nrows(), x.ncols());
    LogisticData::new(x, ds.y).map_err(|msg| DataError::Shape { path: path.display().to_string(), msg })
}

/// GP regression data with standardized inputs and response. With
/// `subsample = Some((m, stream))`, `m` rows are drawn without replacement
/// before standardization.
pub fn load_gp(path: &Path, subsample: Option<(usize, RngStream)>) -> Result<GpData, DataError> {
    let ds = load_csv(path)?;
    check_known_shape(path, ds.x.nrows(), ds.x.ncols());
    let (mut x, mut y) = match subsample {
        Some((m, stream)) if m < ds.x.nrows() => {
            let mut idx = sample(&mut stream.rng(), ds.x.nrows(), m).into_vec();
            idx.sort_unstable();
            (ds.x.select_rows(idx.iter()), ds.y.select_rows(idx.iter()))
        }
        _ => (ds.x, ds.y),
    };
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(DataError::Shape { path: path.display().to_string(), msg: "non-finite values".into() });
    }
    standardize_columns(&mut x);
    standardize_vector(&mut y);
    Ok(GpData { x, y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn tmp_csv(name: &str, body: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        (dir, p)
    }

    #[test]
    fn splits_response_column() {
        let (_d, p) = tmp_csv("t.csv", "a,b,y\n1,2,0\n3,4,1\n5,6,1\n");
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.header, ["a", "b", "y"]);
        assert_eq!(ds.x.shape(), (3, 2));
        assert_eq!(ds.x[(2, 1)], 6.0);
        assert_eq!(ds.y.as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_garbage() {
        let (_d, p) = tmp_csv("t.csv", "a,y\n1,x\n");
        assert!(matches!(load_csv(&p), Err(DataError::Parse { .. })));
        let (_d2, p2) = tmp_csv("t.csv", "a,y\n");
        assert!(matches!(load_csv(&p2), Err(DataError::Shape { .. })));
    }

    #[test]
    fn standardized_columns_have_unit_scale() {
        let mut x = Matrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0]);
        standardize_columns(&mut x);
        let c0 = x.column(0);
        assert_abs_diff_eq!(c0.sum(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c0.norm_squared() / 3.0, 1.0, epsilon = 1e-12);
        assert!(x.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logistic_loader_adds_intercept() {
        let (_d, p) = tmp_csv("t.csv", "a,b,y\n1,2,0\n3,4,1\n5,9,1\n0,0,0\n");
        let ld = load_logistic(&p, true).unwrap();
        assert_eq!(ld.x.ncols(), 3);
        assert!(ld.x.column(2).iter().all(|&v| v == 1.0));
    }

    fn data_dir() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
    }

    #[test]
    fn shipped_datasets_match_reference_shapes() {
        let r = load_logistic(&data_dir().join("ripley.csv"), true).unwrap();
        assert_eq!(r.x.shape(), (250, 3));
        let p = load_logistic(&data_dir().join("pima.csv"), true).unwrap();
        assert_eq!(p.x.shape(), (532, 8));
        let b = load_gp(&data_dir().join("boston.csv"), None).unwrap();
        assert_eq!(b.x.shape(), (455, 13));
        assert_abs_diff_eq!(b.y.sum(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn subsample_is_deterministic() {
        let path = data_dir().join("boston.csv");
        let a = load_gp(&path, Some((50, RngStream::new(3, 0)))).unwrap();
        let b = load_gp(&path, Some((50, RngStream::new(3, 0)))).unwrap();
        assert_eq!(a.x.shape(), (50, 13));
        assert_eq!(a.y, b.y);
    }
}
