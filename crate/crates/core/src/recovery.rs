//! Zero-pad pruned-space adapter factors back to the full backbone shape.
//!
//! `Bᴿ = S_row · Bᴾ` and `Aᴿ = Aᴾ · S_colᵀ` with binary selection matrices;
//! here the selections are applied as index scatters.

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::DenseMatrix;
use crate::pruning::LayerPrune;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredAdapter {
    pub adapter: LoraAdapter,
    pub prune: LayerPrune,
}

pub fn recover(adapter: &LoraAdapter, prune: &LayerPrune, full_dims: (usize, usize)) -> Result<RecoveredAdapter> {
    let layer = adapter.layer_name();
    let fail = |reason: String| Error::Recovery {
        layer: layer.to_string(),
        reason,
    };
    if prune.name != layer {
        return Err(fail(format!("prune map is for layer `{}`", prune.name)));
    }
    if (adapter.d_out(), adapter.d_in()) != prune.pruned_dims() {
        return Err(fail(format!(
            "adapter is {}x{} but the map retains {}x{}",
            adapter.d_out(),
            adapter.d_in(),
            prune.rows.len(),
            prune.cols.len()
        )));
    }
    prune
        .validate(full_dims)
        .map_err(|e| fail(e.to_string()))?;

    let rank = adapter.rank();
    let mut b = DenseMatrix::zeros(full_dims.0, rank);
    for (src, &dst) in prune.rows.iter().enumerate() {
        b.row_mut(dst).copy_from_slice(adapter.b().row(src));
    }
    let mut a = DenseMatrix::zeros(rank, full_dims.1);
    for k in 0..rank {
        let src = adapter.a().row(k);
        let dst = a.row_mut(k);
        for (j, &col) in prune.cols.iter().enumerate() {
            dst[col] = src[j];
        }
    }
    let adapter = LoraAdapter::new(layer, b, a, adapter.alpha()).map_err(|e| fail(e.to_string()))?;
    Ok(RecoveredAdapter {
        adapter,
        prune: prune.clone(),
    })
}
