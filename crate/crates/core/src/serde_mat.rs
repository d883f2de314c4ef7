//! Serde adapters for `nalgebra` types. Matrices are written as
//! `{"rows": r, "cols": c, "data": [...]}` with `data` in row-major order and
//! vectors as plain arrays.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct RowMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn to_row_major(m: &DMatrix<f64>) -> RowMajor {
    RowMajor {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.transpose().iter().copied().collect(),
    }
}

fn from_row_major<E: serde::de::Error>(r: RowMajor) -> Result<DMatrix<f64>, E> {
    if r.data.len() != r.rows * r.cols {
        return Err(E::custom(format!(
            "matrix data has {} entries, expected {} x {} = {}",
            r.data.len(),
            r.rows,
            r.cols,
            r.rows * r.cols
        )));
    }
    Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_row_major(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        from_row_major(RowMajor::deserialize(d)?)
    }
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

pub mod vectors {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        Ok(Vec::<Vec<f64>>::deserialize(d)?
            .into_iter()
            .map(DVector::from_vec)
            .collect())
    }
}

/// `f64` where `+∞` is written as `null`.
pub mod extended {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        (if *v == f64::INFINITY { None } else { Some(*v) }).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
