//! Structured pruning: score whole groups (output rows of a single layer, or
//! hidden units of a two-layer chain), keep the top fraction, and slice the
//! backbone down to the retained index sets.

use serde::{Deserialize, Serialize};

use crate::backbone::{mse_weight_gradients, Backbone, Batch, Layer, Topology};
use crate::error::{Error, Result};
use crate::matrix::norm;

/// Slack used when turning `(1 − ratio) · G` into a group count, so ratios
/// such as 2/3 do not round up an extra group through representation error.
const KEEP_COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Importance score per structured group, plus the layer layout needed to
/// turn a group selection into per-layer index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupImportance {
    pub topology: Topology,
    pub layers: Vec<LayerShape>,
    pub scores: Vec<f64>,
}

/// Retained indices for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub name: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl LayerPrune {
    /// Keep everything in a `rows × cols` layer.
    pub fn full(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows: (0..rows).collect(),
            cols: (0..cols).collect(),
        }
    }

    pub fn pruned_dims(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    /// Check indices are nonempty, strictly increasing and inside `full_dims`.
    pub fn validate(&self, full_dims: (usize, usize)) -> Result<()> {
        check_indices(&self.name, "row", &self.rows, full_dims.0)?;
        check_indices(&self.name, "column", &self.cols, full_dims.1)
    }
}

fn check_indices(layer: &str, what: &str, idx: &[usize], bound: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Map(format!("layer `{layer}` retains no {what}s")));
    }
    if let Some(&i) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::Map(format!(
            "layer `{layer}`: {what} index {i} out of bounds ({bound})"
        )));
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Map(format!(
            "layer `{layer}`: {what} indices must be strictly increasing"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMap {
    pub layers: Vec<LayerPrune>,
    pub params_before: u64,
    pub params_after: u64,
}

impl PruneMap {
    /// Map that keeps every parameter of `backbone`.
    pub fn identity(backbone: &Backbone) -> Self {
        let layers: Vec<LayerPrune> = backbone
            .layers()
            .iter()
            .map(|l| LayerPrune::full(l.name.clone(), l.weight.rows(), l.weight.cols()))
            .collect();
        let total = backbone.param_count() as u64;
        Self {
            layers,
            params_before: total,
            params_after: total,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerPrune> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// `(S − Sᴾ) / S`.
    pub fn ratio(&self) -> Result<f64> {
        pruning_ratio(self.params_before, self.params_after)
    }

    /// Full validation against a backbone: names, bounds, ordering, coupling
    /// and parameter bookkeeping.
    pub fn validate(&self, backbone: &Backbone) -> Result<()> {
        if self.layers.len() != backbone.layers().len() {
            return Err(Error::Map(format!(
                "map has {} layers, backbone has {}",
                self.layers.len(),
                backbone.layers().len()
            )));
        }
        let mut after = 0u64;
        for (lp, layer) in self.layers.iter().zip(backbone.layers()) {
            if lp.name != layer.name {
                return Err(Error::Map(format!(
                    "map layer `{}` does not match backbone layer `{}`",
                    lp.name, layer.name
                )));
            }
            lp.validate(layer.weight.shape())?;
            after += (lp.rows.len() * lp.cols.len()) as u64;
        }
        if backbone.topology() == Topology::Chain && self.layers[0].rows != self.layers[1].cols {
            return Err(Error::Map(
                "chain coupling violated: hidden rows of the first layer differ from columns of the second".into(),
            ));
        }
        if self.params_before != backbone.param_count() as u64 || self.params_after != after {
            return Err(Error::Map(format!(
                "parameter counts {}/{} disagree with backbone {}/{after}",
                self.params_before,
                self.params_after,
                backbone.param_count()
            )));
        }
        Ok(())
    }
}

/// First-order group importance.
///
/// With a calibration batch each weight contributes `|∂L/∂w · w|` under the
/// MSE surrogate; without one the group's L2 norm is used. For a chain the
/// group score of hidden unit `j` is the product of the first layer's row-`j`
/// score and the second layer's column-`j` score.
pub fn group_importance(backbone: &Backbone, calibration: Option<&Batch>) -> Result<GroupImportance> {
    if backbone.layers().is_empty() || backbone.param_count() == 0 {
        return Err(Error::Param("cannot score an empty backbone".into()));
    }
    let layers: Vec<LayerShape> = backbone
        .layers()
        .iter()
        .map(|l| LayerShape {
            name: l.name.clone(),
            rows: l.weight.rows(),
            cols: l.weight.cols(),
        })
        .collect();

    let weights = backbone.weights();
    let saliency = match calibration {
        Some(batch) => {
            if batch.inputs.cols() != backbone.d_in() || batch.targets.cols() != backbone.d_out() {
                return Err(Error::Shape {
                    op: "calibration batch",
                    left: (batch.inputs.cols(), batch.targets.cols()),
                    right: (backbone.d_in(), backbone.d_out()),
                });
            }
            let (_, grads) = mse_weight_gradients(&weights, batch)?;
            Some(grads)
        }
        None => None,
    };

    let row_score = |l: usize, i: usize| -> f64 {
        let w = weights[l];
        match &saliency {
            Some(g) => w.row(i).iter().zip(g[l].row(i)).map(|(w, g)| (w * g).abs()).sum(),
            None => norm(w.row(i)),
        }
    };
    let col_score = |l: usize, j: usize| -> f64 {
        let w = weights[l];
        match &saliency {
            Some(g) => (0..w.rows()).map(|i| (w.get(i, j) * g[l].get(i, j)).abs()).sum(),
            None => norm(&w.column(j)),
        }
    };

    let scores: Vec<f64> = match backbone.topology() {
        Topology::Single => (0..weights[0].rows()).map(|i| row_score(0, i)).collect(),
        Topology::Chain => (0..weights[0].rows())
            .map(|j| row_score(0, j) * col_score(1, j))
            .collect(),
    };
    Ok(GroupImportance {
        topology: backbone.topology(),
        layers,
        scores,
    })
}

/// Retain the top `⌈(1 − ratio) · G⌉` groups (at least one), breaking score
/// ties in favour of the lower index.
pub fn select_groups(importance: &GroupImportance, prune_ratio: f64) -> Result<PruneMap> {
    if !(0.0..=1.0).contains(&prune_ratio) {
        return Err(Error::Param(format!("prune ratio {prune_ratio} outside [0, 1]")));
    }
    let groups = importance.scores.len();
    if groups == 0 {
        return Err(Error::Param("no groups to select from".into()));
    }
    if let Some(bad) = importance.scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Data(format!("invalid importance score {bad}")));
    }
    let keep = (((1.0 - prune_ratio) * groups as f64 - KEEP_COUNT_SLACK).ceil() as usize).clamp(1, groups);

    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_by(|&a, &b| importance.scores[b].total_cmp(&importance.scores[a]).then(a.cmp(&b)));
    let mut retained: Vec<usize> = order[..keep].to_vec();
    retained.sort_unstable();

    let shapes = &importance.layers;
    let layers = match importance.topology {
        Topology::Single => {
            let s = &shapes[0];
            vec![LayerPrune {
                name: s.name.clone(),
                rows: retained,
                cols: (0..s.cols).collect(),
            }]
        }
        Topology::Chain => {
            let (first, second) = (&shapes[0], &shapes[1]);
            vec![
                LayerPrune {
                    name: first.name.clone(),
                    rows: retained.clone(),
                    cols: (0..first.cols).collect(),
                },
                LayerPrune {
                    name: second.name.clone(),
                    rows: (0..second.rows).collect(),
                    cols: retained,
                },
            ]
        }
    };
    let params_before = shapes.iter().map(|s| (s.rows * s.cols) as u64).sum();
    let params_after = layers.iter().map(|l| (l.rows.len() * l.cols.len()) as u64).sum();
    Ok(PruneMap {
        layers,
        params_before,
        params_after,
    })
}

/// Slice every layer to `W₀[I_row, I_col]`.
pub fn apply_prune(backbone: &Backbone, map: &PruneMap) -> Result<Backbone> {
    map.validate(backbone)?;
    let sliced: Vec<Layer> = backbone
        .layers()
        .iter()
        .zip(&map.layers)
        .map(|(l, lp)| Ok(Layer::new(l.name.clone(), l.weight.select(&lp.rows, &lp.cols)?)))
        .collect::<Result<_>>()?;
    match backbone.topology() {
        Topology::Single => Ok(Backbone::single(sliced.into_iter().next().expect("one layer"))),
        Topology::Chain => {
            let mut it = sliced.into_iter();
            let first = it.next().expect("two layers");
            let second = it.next().expect("two layers");
            Backbone::chain(first, second)
        }
    }
}

/// `(S − Sᴾ) / S`.
pub fn pruning_ratio(s_before: u64, s_after: u64) -> Result<f64> {
    if s_before == 0 {
        return Err(Error::Accounting("parameter count before pruning is zero".into()));
    }
    if s_after > s_before {
        return Err(Error::Accounting(format!(
            "pruned size {s_after} exceeds original size {s_before}"
        )));
    }
    Ok((s_before - s_after) as f64 / s_before as f64)
}
