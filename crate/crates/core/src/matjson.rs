//! Serde adapters: matrices as arrays of rows, vectors as flat arrays.
//!
//! A matrix with zero rows serializes as `[]` and reads back as `0×0`; callers
//! that know the intended shape fix it up with [`reshape_empty`].

use crate::numerics::{Mat, Vector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix: rows have different lengths".into());
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("matrix contains non-finite entries".into());
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Replace an empty matrix by an empty matrix of the expected shape.
pub fn reshape_empty(m: Mat, rows: usize, cols: usize) -> Mat {
    if m.is_empty() && rows * cols == 0 {
        Mat::zeros(rows, cols)
    } else {
        m
    }
}

pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
    to_rows(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    from_rows(&rows).map_err(D::Error::custom)
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(D::Error::custom("vector contains non-finite entries"));
        }
        Ok(Vector::from_vec(v))
    }
}
