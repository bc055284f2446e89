//! Low-rank adapters: a factor pair `(B, A)` whose update is
//! `ΔW = (alpha / rank) · B · A`.

use crate::error::{Error, Result};
use crate::matrix::{matmul, DenseMatrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layer_name: String,
    b: DenseMatrix,
    a: DenseMatrix,
    alpha: f64,
}

impl LoraAdapter {
    /// `b` is `d_out × r`, `a` is `r × d_in`.
    pub fn new(layer_name: impl Into<String>, b: DenseMatrix, a: DenseMatrix, alpha: f64) -> Result<Self> {
        let rank = b.cols();
        if rank == 0 {
            return Err(Error::Param("adapter rank must be at least 1".into()));
        }
        if a.rows() != rank {
            return Err(Error::Shape {
                op: "lora factors",
                left: b.shape(),
                right: a.shape(),
            });
        }
        if rank > b.rows().min(a.cols()) {
            return Err(Error::Param(format!(
                "adapter rank {rank} exceeds min({}, {})",
                b.rows(),
                a.cols()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Param(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            layer_name: layer_name.into(),
            b,
            a,
            alpha,
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    /// Same adapter with new factors of identical shape.
    pub(crate) fn with_factors(&self, b: DenseMatrix, a: DenseMatrix) -> Self {
        debug_assert_eq!(b.shape(), self.b.shape());
        debug_assert_eq!(a.shape(), self.a.shape());
        Self {
            layer_name: self.layer_name.clone(),
            b,
            a,
            alpha: self.alpha,
        }
    }
}

/// Standard initialisation: `B = 0`, `A ~ N(0, 1/d_in)` from the seeded
/// stream, so the initial update is exactly zero.
pub fn init_adapter(
    layer_name: impl Into<String>,
    d_out: usize,
    d_in: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::Param(format!(
            "rank {rank} must lie in 1..={} for a {d_out}x{d_in} layer",
            d_out.min(d_in)
        )));
    }
    let mut stream = rng::stream(seed, 0);
    let a = rng::gaussian(&mut stream, rank, d_in, 1.0 / (d_in as f64).sqrt());
    LoraAdapter::new(layer_name, DenseMatrix::zeros(d_out, rank), a, alpha)
}

/// The dense update `(alpha / rank) · B · A`.
pub fn materialize(adapter: &LoraAdapter) -> DenseMatrix {
    matmul(&adapter.b, &adapter.a)
        .expect("adapter factors are conformant")
        .scale(adapter.scaling())
}
