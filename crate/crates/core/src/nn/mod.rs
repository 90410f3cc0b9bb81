//! From-scratch differentiable numerics: tensors, a reverse-mode graph,
//! ConvLSTM/LSTM cells, Adam, checkpoints and finite-difference checking.

pub mod adam;
pub mod cells;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use cells::{
    convlstm_cell, convlstm_step, lstm_cell, lstm_step, ConvLstmCellParams, ConvLstmLayer, Gate, LstmCellParams,
    LstmLayer,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use graph::{Graph, NodeId};
pub use params::{he_uniform, Param, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{argument, Result};
use crate::scalar::Scalar;

/// `sum(mask * (pred - target)^2) / sum(mask)` on plain tensors.
pub fn masked_mse<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, mask: &Tensor<F>) -> Result<F> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let l = g.masked_mse(p, target.clone(), mask.clone())?;
    Ok(g.value(l).data()[0])
}

/// Fails with the offending parameter's name if any gradient is non-finite.
pub fn ensure_finite_grads<F: Scalar>(store: &ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
    for (p, g) in store.iter().zip(grads) {
        if !g.all_finite() {
            return Err(crate::Error::Training(format!("non-finite gradient for parameter {}", p.name)));
        }
    }
    if grads.len() != store.len() {
        return Err(argument("gradient count does not match parameter count"));
    }
    Ok(())
}
