//! Row-major JSON form for `nalgebra` matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct RowMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let data = m.transpose().as_slice().to_vec();
    RowMajor {
        rows: m.nrows(),
        cols: m.ncols(),
        data,
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let r = RowMajor::deserialize(d)?;
    if r.rows * r.cols != r.data.len() {
        return Err(serde::de::Error::custom(format!(
            "matrix {}x{} with {} entries",
            r.rows,
            r.cols,
            r.data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
