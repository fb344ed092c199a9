//! Label-conditioned networks and their frozen snapshots.

mod arch;
mod checkpoint;
mod conv;
mod network;

pub use arch::{Architecture, LayerSpec};
pub use checkpoint::{snapshot, CheckpointFile, FrozenCheckpoint, StoredTensor};
pub use network::{Network, ParamSlot, Trace};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{softmax_rows, Tensor};

/// The uninformative second input: a uniform distribution over all classes.
pub fn empty_signal(n_classes: usize) -> Result<Vec<f64>> {
    if n_classes == 0 {
        return Err(config_err("empty signal needs at least one class"));
    }
    Ok(vec![1.0 / n_classes as f64; n_classes])
}

/// `[n, n_classes]` batch of empty signals.
pub fn empty_batch(n: usize, n_classes: usize) -> Result<Tensor> {
    Ok(Tensor::repeat_row(&empty_signal(n_classes)?, n))
}

pub fn one_hot(class: usize, n_classes: usize) -> Result<Vec<f64>> {
    if class >= n_classes {
        return Err(shape_err(format!(
            "class {class} outside a {n_classes}-way head"
        )));
    }
    let mut v = vec![0.0; n_classes];
    v[class] = 1.0;
    Ok(v)
}

pub fn one_hot_batch(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * n_classes);
    for &y in labels {
        data.extend(one_hot(y, n_classes)?);
    }
    Tensor::from_vec(&[labels.len(), n_classes], data)
}

/// Applies the network to its own softmaxed prediction once:
/// `y0 = f(x, empty)`, `y1 = f(x, softmax(y0))`.
pub fn recurse(net: &Network, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let empty = empty_batch(x.batch(), net.n_classes())?;
    let y0 = net.forward(x, &empty)?;
    let y1 = net.forward(x, &softmax_rows(&y0))?;
    Ok((y0, y1))
}
