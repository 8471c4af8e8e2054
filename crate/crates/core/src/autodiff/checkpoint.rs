//! Flat named-array parameter snapshots.

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

pub fn snapshot(store: &ParamStore) -> Vec<NamedArray> {
    store
        .iter()
        .map(|(_, p)| NamedArray {
            name: p.name.clone(),
            shape: [p.value.rows(), p.value.cols()],
            values: p.value.data().to_vec(),
        })
        .collect()
}

/// Copies arrays into `store`, matching by name and shape.
pub fn restore(store: &mut ParamStore, arrays: &[NamedArray]) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} arrays, model has {}",
            arrays.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, arr) in ids.into_iter().zip(arrays) {
        let p = store.get(id);
        if p.name != arr.name || [p.value.rows(), p.value.cols()] != arr.shape {
            return Err(Error::Validation(format!(
                "checkpoint array '{}' {:?} does not match parameter '{}' {:?}",
                arr.name,
                arr.shape,
                p.name,
                p.value.shape()
            )));
        }
        *store.value_mut(id) = Tensor::new(arr.shape[0], arr.shape[1], arr.values.clone())?;
    }
    Ok(())
}

pub fn to_json(store: &ParamStore) -> Result<String> {
    Ok(serde_json::to_string(&snapshot(store))?)
}

pub fn from_json(store: &mut ParamStore, text: &str) -> Result<()> {
    let arrays: Vec<NamedArray> = serde_json::from_str(text)?;
    restore(store, &arrays)
}
