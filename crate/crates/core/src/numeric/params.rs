use super::{Matrix, Real};
use crate::{Error, Result};

/// A structure owning named tensors in a fixed traversal order.
///
/// Trainable tensors come first in each component; `buffers` adds
/// non-trainable state such as normalization running statistics.
pub trait Parameterized<T: Real> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>);

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>);

    fn named_tensors(&self, buffers: bool) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.tensors("", buffers, &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of trainable scalars.
pub fn param_count<T: Real, M: Parameterized<T>>(model: &M) -> usize {
    model
        .named_tensors(false)
        .iter()
        .map(|(_, m)| m.data().len())
        .sum()
}

/// A copy with every tensor (buffers included) set to zero; used as a
/// gradient accumulator.
pub fn zeroed<T: Real, M: Parameterized<T> + Clone>(model: &M) -> M {
    let mut z = model.clone();
    let mut ts = Vec::new();
    z.tensors_mut(true, &mut ts);
    for t in ts {
        t.fill(T::zero());
    }
    z
}

pub fn flatten_params<T: Real, M: Parameterized<T>>(model: &M) -> Vec<T> {
    model
        .named_tensors(false)
        .iter()
        .flat_map(|(_, m)| m.data().iter().copied())
        .collect()
}

pub fn load_flat_params<T: Real, M: Parameterized<T>>(model: &mut M, flat: &[T]) -> Result<()> {
    let mut ts = Vec::new();
    model.tensors_mut(false, &mut ts);
    let total: usize = ts.iter().map(|t| t.data().len()).sum();
    if total != flat.len() {
        return Err(Error::shape(
            "load_flat_params",
            format!("{} values for {total} parameters", flat.len()),
        ));
    }
    let mut offset = 0;
    for t in ts {
        let n = t.data().len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(())
}
