//! Named parameter export/import for checkpointing.

use thiserror::Error;

use crate::param::Module;
use crate::scalar::Scalar;

/// One named array: trainable parameter or persistent buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("state has {found} arrays, module expects {expected}")]
    Count { expected: usize, found: usize },
    #[error("array #{index}: expected `{expected}`, found `{found}`")]
    Name { index: usize, expected: String, found: String },
    #[error("array `{name}`: expected {expected} values, found {found}")]
    Size { name: String, expected: usize, found: usize },
}

/// All parameters followed by all buffers, in visit order.
pub fn export_state<T: Scalar, M: Module<T> + ?Sized>(module: &mut M) -> Vec<NamedArray<T>> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, p| {
        out.push(NamedArray {
            name: name.to_string(),
            shape: p.shape.clone(),
            values: p.value.clone(),
        })
    });
    module.visit_buffers("", &mut |name, b| {
        out.push(NamedArray {
            name: name.to_string(),
            shape: vec![b.value.len()],
            values: b.value.clone(),
        })
    });
    out
}

/// Load arrays produced by [`export_state`] into a module of the same layout.
pub fn import_state<T: Scalar, M: Module<T> + ?Sized>(
    module: &mut M,
    arrays: &[NamedArray<T>],
) -> Result<(), StateError> {
    let mut expected = 0;
    module.visit_params("", &mut |_, _| expected += 1);
    module.visit_buffers("", &mut |_, _| expected += 1);
    if expected != arrays.len() {
        return Err(StateError::Count { expected, found: arrays.len() });
    }
    let mut err = None;
    let mut idx = 0;
    let mut check = |name: &str, len: usize, idx: usize| -> Option<&NamedArray<T>> {
        let a = &arrays[idx];
        if a.name != name {
            err.get_or_insert(StateError::Name {
                index: idx,
                expected: name.to_string(),
                found: a.name.clone(),
            });
            return None;
        }
        if a.values.len() != len {
            err.get_or_insert(StateError::Size {
                name: name.to_string(),
                expected: len,
                found: a.values.len(),
            });
            return None;
        }
        Some(a)
    };
    module.visit_params("", &mut |name, p| {
        if let Some(a) = check(name, p.len(), idx) {
            p.value.copy_from_slice(&a.values);
        }
        idx += 1;
    });
    module.visit_buffers("", &mut |name, b| {
        if let Some(a) = check(name, b.value.len(), idx) {
            b.value.copy_from_slice(&a.values);
        }
        idx += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
