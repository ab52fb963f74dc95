//! Serialization of nalgebra values as plain JSON arrays.

use nalgebra::DVector;
use serde::ser::Serializer;

pub fn vector<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}
