pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod filter;
pub(crate) mod linalg;
pub(crate) mod norm;
pub(crate) mod reduce;
pub(crate) mod shape;

use super::Tensor;

/// Wraps a gradient list where every entry is present.
pub(crate) fn all<T>(grads: impl IntoIterator<Item = Tensor<T>>) -> Vec<Option<Tensor<T>>> {
    grads.into_iter().map(Some).collect()
}
