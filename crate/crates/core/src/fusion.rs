//! One-shot cloud fusion of client updates and application to the backbone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::{matmul, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    /// Entry-wise mean of the dense updates.
    Fedavg,
    /// Mean of `B` over a frozen `A` shared by every client.
    Ffa,
    /// Mean of `A` composed with mean of `B`.
    Fedsa,
}

impl FusionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::Fedavg => "fedavg",
            FusionMethod::Ffa => "ffa",
            FusionMethod::Fedsa => "fedsa",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fedavg" => Ok(FusionMethod::Fedavg),
            "ffa" => Ok(FusionMethod::Ffa),
            "fedsa" => Ok(FusionMethod::Fedsa),
            other => Err(format!("unknown fusion method `{other}` (expected fedavg, ffa or fedsa)")),
        }
    }
}

fn mean(mats: &[&DenseMatrix], what: &'static str) -> Result<DenseMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Input(format!("no {what} to average")))?;
    // Shifted form m₀ + Σ(m_i − m₀)/N: identical inputs average to m₀ exactly.
    let mut acc = DenseMatrix::zeros(first.rows(), first.cols());
    for m in &mats[1..] {
        let diff = m.sub(first).map_err(|_| Error::Shape {
            op: what,
            left: first.shape(),
            right: m.shape(),
        })?;
        acc = acc.add(&diff)?;
    }
    let n = mats.len() as f64;
    let data = first.data().iter().zip(acc.data()).map(|(f, d)| f + d / n).collect();
    Ok(DenseMatrix::from_raw(first.rows(), first.cols(), data))
}

/// `(1/N) Σ ΔW_i`.
pub fn fedavg(updates: &[DenseMatrix]) -> Result<DenseMatrix> {
    let refs: Vec<&DenseMatrix> = updates.iter().collect();
    mean(&refs, "fedavg")
}

/// `scale · mean(B_i) · mean(A_i)`: the factor-averaging variant of FedAvg.
/// Differs from [`fedavg`] over materialised updates whenever the `A_i`
/// differ.
pub fn fedavg_factors(adapters: &[LoraAdapter]) -> Result<DenseMatrix> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::Input("no adapters to average".into()))?;
    let bs: Vec<&DenseMatrix> = adapters.iter().map(|a| a.b()).collect();
    let as_: Vec<&DenseMatrix> = adapters.iter().map(|a| a.a()).collect();
    Ok(matmul(&mean(&bs, "fedavg_factors")?, &mean(&as_, "fedavg_factors")?)?.scale(first.scaling()))
}

/// `scale · mean(B_i) · A₀`.
pub fn ffa_fuse(b_factors: &[DenseMatrix], a_frozen: &DenseMatrix, scale: f64) -> Result<DenseMatrix> {
    let refs: Vec<&DenseMatrix> = b_factors.iter().collect();
    Ok(matmul(&mean(&refs, "ffa_fuse")?, a_frozen)?.scale(scale))
}

/// FFA fusion straight from client adapters; every client must carry a
/// bitwise-identical frozen `A`.
pub fn ffa_fuse_adapters(adapters: &[LoraAdapter]) -> Result<DenseMatrix> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::Input("no adapters to fuse".into()))?;
    let bits = |m: &DenseMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let reference = bits(first.a());
    for (i, ad) in adapters.iter().enumerate().skip(1) {
        if ad.a().shape() != first.a().shape() || bits(ad.a()) != reference {
            return Err(Error::Protocol(format!(
                "client {i} does not share the frozen A factor of client 0"
            )));
        }
        if ad.scaling() != first.scaling() {
            return Err(Error::Protocol(format!("client {i} uses a different scaling")));
        }
    }
    let bs: Vec<DenseMatrix> = adapters.iter().map(|a| a.b().clone()).collect();
    ffa_fuse(&bs, first.a(), first.scaling())
}

/// `scale · mean(B_i) · mean(A_i)`.
pub fn fedsa_fuse(a_factors: &[DenseMatrix], b_factors: &[DenseMatrix], scale: f64) -> Result<DenseMatrix> {
    if a_factors.len() != b_factors.len() {
        return Err(Error::Input(format!(
            "{} A factors but {} B factors",
            a_factors.len(),
            b_factors.len()
        )));
    }
    let a_refs: Vec<&DenseMatrix> = a_factors.iter().collect();
    let b_refs: Vec<&DenseMatrix> = b_factors.iter().collect();
    Ok(matmul(&mean(&b_refs, "fedsa_fuse")?, &mean(&a_refs, "fedsa_fuse")?)?.scale(scale))
}

/// `W_new = W₀ + ΔW_fusion` for every layer, in backbone order.
pub fn apply_fusion(backbone: &Backbone, fused: &[DenseMatrix]) -> Result<Backbone> {
    if fused.len() != backbone.layers().len() {
        return Err(Error::Input(format!(
            "{} fused updates for {} layers",
            fused.len(),
            backbone.layers().len()
        )));
    }
    let weights = backbone
        .layers()
        .iter()
        .zip(fused)
        .map(|(l, d)| {
            l.weight.add(d).map_err(|_| {
                Error::Input(format!(
                    "fused update for layer `{}` is {:?}, layer is {:?}",
                    l.name,
                    d.shape(),
                    l.weight.shape()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    backbone.with_weights(weights)
}
