//! Direction-wise conflict detection and resolution across recovered adapter
//! updates of one layer.
//!
//! The updates are concatenated column-wise and their leading left singular
//! vectors form a shared basis `U`. Each update is projected to
//! `Z_i = Uᵀ ΔW_i`; row `k` of `Z_i` is adapter `i`'s representation along
//! shared direction `k`. Per direction:
//!
//! * energy `α_{i,k} = ‖z_{i,k}‖`,
//! * consensus `z̄_k = Σ α z / Σ α`,
//! * conflict `c_k = Σ α (1 − cos(z, z̄)) / (2 Σ α)` in `[0, 1]`,
//! * gate `g_k = 1 − c_k` and consistency `s_{i,k} = max(0, cos(z, z̄))`.
//!
//! The resolved update is `U · Z_i^fuse` with row `k` of `Z_i^fuse` equal to
//! `g_k s_{i,k} z_{i,k}`.
//!
//! A zero consensus has cosine 0 with every row, so fully cancelling
//! directions score `c_k = 0.5` and are removed from every adapter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::{cosine, matmul, matmul_tn, norm, svd_thin, DenseMatrix, JACOBI_TOL};

/// Total energy along a direction at or below which the direction carries no
/// signal: consensus is the zero vector and `c_k = 0`.
pub const ENERGY_TOL: f64 = 1e-12;

/// Orthonormal basis of the dominant left directions shared by a set of
/// updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSubspace {
    /// `d_out × r_sub`, orthonormal columns.
    pub basis: DenseMatrix,
    /// Singular values of the retained directions.
    pub singular_values: Vec<f64>,
}

impl SharedSubspace {
    pub fn dims(&self) -> usize {
        self.basis.cols()
    }
}

/// Scores for a single shared direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub conflict: f64,
    pub gate: f64,
    pub consensus: Vec<f64>,
    /// `α_{i,k}` per adapter.
    pub energies: Vec<f64>,
    /// `s_{i,k}` per adapter.
    pub consistency: Vec<f64>,
}

/// Per-layer outcome of conflict analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub singular_values: Vec<f64>,
    pub directions: Vec<DirectionReport>,
}

impl ConflictReport {
    /// Arithmetic mean of `c_k` over the shared directions.
    pub fn mean_conflict(&self) -> Result<f64> {
        mean_conflict(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconflictedAdapterSet {
    pub updates: Vec<DenseMatrix>,
    pub report: ConflictReport,
    pub subspace: SharedSubspace,
}

fn check_common_shape(updates: &[DenseMatrix]) -> Result<(usize, usize)> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Input("at least one update is required".into()))?;
    if let Some(bad) = updates.iter().find(|u| u.shape() != first.shape()) {
        return Err(Error::Input(format!(
            "updates must share a shape: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    Ok(first.shape())
}

/// Leading left singular vectors of `[ΔW_1, …, ΔW_N]`: at most `max_dirs` of
/// them and only those with `σ ≥ tol · σ_max`.
pub fn shared_subspace(updates: &[DenseMatrix], max_dirs: usize, tol: f64) -> Result<SharedSubspace> {
    let (rows, _) = check_common_shape(updates)?;
    if max_dirs == 0 {
        return Err(Error::Param("max_dirs must be at least 1".into()));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Param(format!("subspace tolerance must lie in (0, 1), got {tol}")));
    }
    let parts: Vec<&DenseMatrix> = updates.iter().collect();
    let stacked = DenseMatrix::hcat(&parts)?;
    if stacked.is_empty() {
        return Err(Error::Input("updates are empty".into()));
    }
    let svd = svd_thin(&stacked, JACOBI_TOL)?;
    let keep = svd.rank_at(tol).min(max_dirs);
    let basis = DenseMatrix::from_fn(rows, keep, |i, j| svd.u.get(i, j));
    Ok(SharedSubspace {
        basis,
        singular_values: svd.singular_values[..keep].to_vec(),
    })
}

/// `Z = Uᵀ · ΔW`.
pub fn project(subspace: &SharedSubspace, update: &DenseMatrix) -> Result<DenseMatrix> {
    matmul_tn(&subspace.basis, update)
}

/// Energy, consensus and conflict score for every direction.
pub fn conflict_scores(projections: &[DenseMatrix]) -> Result<Vec<DirectionReport>> {
    let (dirs, width) = check_common_shape(projections)?;
    let mut out = Vec::with_capacity(dirs);
    for k in 0..dirs {
        let rows: Vec<&[f64]> = projections.iter().map(|z| z.row(k)).collect();
        let energies: Vec<f64> = rows.iter().map(|r| norm(r)).collect();
        let total: f64 = energies.iter().sum();
        let mut consensus = vec![0.0; width];
        if total > ENERGY_TOL {
            for (r, &e) in rows.iter().zip(&energies) {
                for (c, &x) in consensus.iter_mut().zip(r.iter()) {
                    *c += e * x;
                }
            }
            for c in &mut consensus {
                *c /= total;
            }
        }
        let cosines: Vec<f64> = rows
            .iter()
            .map(|r| cosine(r, &consensus))
            .collect::<Result<_>>()?;
        let conflict = if total > ENERGY_TOL {
            let raw: f64 = energies
                .iter()
                .zip(&cosines)
                .map(|(e, c)| e * (1.0 - c))
                .sum::<f64>()
                / (2.0 * total);
            raw.clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(DirectionReport {
            conflict,
            gate: 1.0 - conflict,
            consensus,
            energies,
            consistency: cosines.iter().map(|c| c.max(0.0)).collect(),
        });
    }
    Ok(out)
}

/// Gate and attenuate each adapter's projection: row `k` of the output for
/// adapter `i` is `g_k · s_{i,k} · z_{i,k}`.
pub fn resolve_projections(projections: &[DenseMatrix]) -> Result<(Vec<DenseMatrix>, Vec<DirectionReport>)> {
    let directions = conflict_scores(projections)?;
    let fused = projections
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let mut out = z.clone();
            for (k, d) in directions.iter().enumerate() {
                let w = d.gate * d.consistency[i];
                for x in out.row_mut(k) {
                    *x *= w;
                }
            }
            out
        })
        .collect();
    Ok((fused, directions))
}

/// Full de-confliction of one layer's recovered updates.
pub fn deconflict(updates: &[DenseMatrix], max_dirs: usize, tol: f64) -> Result<DeconflictedAdapterSet> {
    let subspace = shared_subspace(updates, max_dirs, tol)?;
    deconflict_in(subspace, updates)
}

/// De-confliction against a caller-provided shared basis.
pub fn deconflict_in(subspace: SharedSubspace, updates: &[DenseMatrix]) -> Result<DeconflictedAdapterSet> {
    let (rows, cols) = check_common_shape(updates)?;
    if subspace.basis.rows() != rows {
        return Err(Error::Shape {
            op: "deconflict",
            left: subspace.basis.shape(),
            right: (rows, cols),
        });
    }
    if subspace.dims() == 0 {
        return Ok(DeconflictedAdapterSet {
            updates: vec![DenseMatrix::zeros(rows, cols); updates.len()],
            report: ConflictReport {
                singular_values: Vec::new(),
                directions: Vec::new(),
            },
            subspace,
        });
    }
    let projections: Vec<DenseMatrix> = updates
        .iter()
        .map(|u| project(&subspace, u))
        .collect::<Result<_>>()?;
    let (fused, directions) = resolve_projections(&projections)?;
    let resolved = fused
        .iter()
        .map(|z| matmul(&subspace.basis, z))
        .collect::<Result<_>>()?;
    Ok(DeconflictedAdapterSet {
        updates: resolved,
        report: ConflictReport {
            singular_values: subspace.singular_values.clone(),
            directions,
        },
        subspace,
    })
}

/// Conflict analysis without reconstruction.
pub fn analyze(updates: &[DenseMatrix], max_dirs: usize, tol: f64) -> Result<ConflictReport> {
    let subspace = shared_subspace(updates, max_dirs, tol)?;
    if subspace.dims() == 0 {
        return Ok(ConflictReport {
            singular_values: Vec::new(),
            directions: Vec::new(),
        });
    }
    let projections: Vec<DenseMatrix> = updates
        .iter()
        .map(|u| project(&subspace, u))
        .collect::<Result<_>>()?;
    Ok(ConflictReport {
        singular_values: subspace.singular_values,
        directions: conflict_scores(&projections)?,
    })
}

/// Conflict analysis in a fixed shared frame, e.g. to score resolved updates
/// along the same directions they were resolved in.
pub fn analyze_in(subspace: &SharedSubspace, updates: &[DenseMatrix]) -> Result<ConflictReport> {
    let (rows, cols) = check_common_shape(updates)?;
    if subspace.basis.rows() != rows {
        return Err(Error::Shape {
            op: "analyze_in",
            left: subspace.basis.shape(),
            right: (rows, cols),
        });
    }
    if subspace.dims() == 0 {
        return Ok(ConflictReport {
            singular_values: Vec::new(),
            directions: Vec::new(),
        });
    }
    let projections: Vec<DenseMatrix> = updates
        .iter()
        .map(|u| project(subspace, u))
        .collect::<Result<_>>()?;
    Ok(ConflictReport {
        singular_values: subspace.singular_values.clone(),
        directions: conflict_scores(&projections)?,
    })
}

/// Mean direction-wise conflict `c̄`.
pub fn mean_conflict(report: &ConflictReport) -> Result<f64> {
    if report.directions.is_empty() {
        return Err(Error::Accounting("conflict report has no directions".into()));
    }
    let sum: f64 = report.directions.iter().map(|d| d.conflict).sum();
    Ok(sum / report.directions.len() as f64)
}

/// Factor a dense update as a rank-`rank` adapter via truncated SVD, splitting
/// `σ` evenly between the factors and setting `alpha = rank` so the scaling is
/// exactly one.
pub fn refactor(update: &DenseMatrix, rank: usize, layer: &str) -> Result<LoraAdapter> {
    let (rows, cols) = update.shape();
    let rank = rank.clamp(1, rows.min(cols).max(1));
    let svd = svd_thin(update, JACOBI_TOL)?;
    let root: Vec<f64> = svd.singular_values.iter().map(|s| s.sqrt()).collect();
    let b = DenseMatrix::from_fn(rows, rank, |i, k| svd.u.get(i, k) * root[k]);
    let a = DenseMatrix::from_fn(rank, cols, |k, j| root[k] * svd.v.get(j, k));
    LoraAdapter::new(layer, b, a, rank as f64)
}

/// Re-express `update` over a frozen `A`: returns an adapter sharing `A` and
/// `alpha` with `frozen` whose `B` minimises `‖scale · B · A − update‖_F`.
/// Exact whenever the rows of `update` lie in the row space of `A`.
pub fn refactor_onto(update: &DenseMatrix, frozen: &LoraAdapter) -> Result<LoraAdapter> {
    if update.shape() != (frozen.d_out(), frozen.d_in()) {
        return Err(Error::Shape {
            op: "refactor_onto",
            left: update.shape(),
            right: (frozen.d_out(), frozen.d_in()),
        });
    }
    // pinv(A) = V · diag(1/σ) · Uᵀ with A = U Σ Vᵀ.
    let svd = svd_thin(frozen.a(), JACOBI_TOL)?;
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let inv: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| if s > smax * 1e-12 { 1.0 / s } else { 0.0 })
        .collect();
    let vs = DenseMatrix::from_fn(svd.v.rows(), svd.v.cols(), |i, k| svd.v.get(i, k) * inv[k]);
    let pinv = crate::matrix::matmul_nt(&vs, &svd.u)?;
    let b = matmul(update, &pinv)?.scale(1.0 / frozen.scaling());
    LoraAdapter::new(frozen.layer_name(), b, frozen.a().clone(), frozen.alpha())
}
