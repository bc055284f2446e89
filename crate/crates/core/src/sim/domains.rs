//! Synthetic multi-domain regression tasks.
//!
//! Each domain `i` perturbs the backbone's end-to-end map `W₀` by a rank-`r`
//! teacher `ΔT_i = U_i V_iᵀ`. The left factors mix a block shared by all
//! domains with a private block, `U_i = √ρ · U_shared + √(1 − ρ) · U_i'`, so
//! the overlap `ρ` sets how strongly the domains compete for the same output
//! directions. Cross-domain tasks ask for both deltas at once.

use crate::backbone::{mse, Backbone, Batch, Layer, Topology};
use crate::error::{Error, Result};
use crate::io::config::Config;
use crate::matrix::{matmul, matmul_nt, svd_thin, DenseMatrix, JACOBI_TOL};
use crate::rng::{self, streams};

/// Relative singular-value threshold used to confirm teacher rank.
const TEACHER_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomain {
    pub id: usize,
    pub teacher_delta: DenseMatrix,
    pub train: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainTask {
    pub pair: (usize, usize),
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub backbone: Backbone,
    pub domains: Vec<SyntheticDomain>,
    pub cross: Vec<CrossDomainTask>,
    /// Public calibration batch for pruning importance, if requested.
    pub calibration: Option<Batch>,
}

/// End-to-end linear map of a backbone.
pub fn effective_map(backbone: &Backbone) -> DenseMatrix {
    let layers = backbone.layers();
    let mut map = layers[0].weight.clone();
    for l in &layers[1..] {
        map = matmul(&l.weight, &map).expect("backbone layers are conformant");
    }
    map
}

fn standard_inputs(rng: &mut rand_chacha::ChaCha20Rng, n: usize, d_in: usize) -> DenseMatrix {
    rng::gaussian(rng, n, d_in, 1.0)
}

/// Targets `X · Mᵀ` plus optional Gaussian noise.
fn targets(
    rng: &mut rand_chacha::ChaCha20Rng,
    inputs: &DenseMatrix,
    map: &DenseMatrix,
    noise: f64,
) -> DenseMatrix {
    let clean = matmul_nt(inputs, map).expect("map matches input width");
    if noise == 0.0 {
        return clean;
    }
    let eps = rng::gaussian(rng, clean.rows(), clean.cols(), noise);
    clean.add(&eps).expect("same shape")
}

/// Orthonormalise the columns of `m` (modified Gram-Schmidt).
fn orthonormal_columns(m: &DenseMatrix) -> Result<DenseMatrix> {
    let (rows, cols) = m.shape();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v = m.column(j);
        for _ in 0..2 {
            for prev in &q {
                let d: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= d * p;
                }
            }
        }
        let n = crate::matrix::norm(&v);
        if n < 1e-8 {
            return Err(Error::Config(vec![
                "domain: degenerate teacher basis; try another seed".into(),
            ]));
        }
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    Ok(DenseMatrix::from_fn(rows, cols, |i, j| q[j][i]))
}

fn build_backbone(cfg: &Config, seed: u64) -> Result<Backbone> {
    let d = &cfg.domain;
    let mut rng = rng::stream(seed, streams::BACKBONE);
    match d.topology {
        Topology::Single => {
            let w = rng::gaussian(&mut rng, d.d_out, d.d_in, 1.0 / (d.d_in as f64).sqrt());
            Ok(Backbone::single(Layer::new("fc", w)))
        }
        Topology::Chain => {
            let w1 = rng::gaussian(&mut rng, d.hidden, d.d_in, 1.0 / (d.d_in as f64).sqrt());
            let w2 = rng::gaussian(&mut rng, d.d_out, d.hidden, 1.0 / (d.hidden as f64).sqrt());
            Backbone::chain(Layer::new("fc1", w1), Layer::new("fc2", w2))
        }
    }
}

/// Teacher deltas plus the shared left block (used for calibration).
fn build_teachers(cfg: &Config, seed: u64) -> Result<(Vec<DenseMatrix>, DenseMatrix)> {
    let d = &cfg.domain;
    let n = cfg.num_clients;
    let r = d.teacher_rank;
    let mut rng = rng::stream(seed, streams::TEACHER);
    let raw = rng::gaussian(&mut rng, d.d_out, (n + 1) * r, 1.0);
    let q = orthonormal_columns(&raw)?;
    let block = |b: usize| DenseMatrix::from_fn(d.d_out, r, |i, j| q.get(i, b * r + j));
    let shared = block(n);
    let (ws, wp) = (d.overlap.sqrt(), (1.0 - d.overlap).sqrt());
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n {
        let private = block(i);
        let u = shared.scale(ws).add(&private.scale(wp))?;
        let v = rng::gaussian(&mut rng, d.d_in, r, 1.0 / (d.d_in as f64).sqrt());
        let delta = matmul_nt(&u, &v)?.scale(d.teacher_scale);
        let found = svd_thin(&delta, JACOBI_TOL)?.rank_at(TEACHER_RANK_TOL);
        if found != r {
            return Err(Error::Config(vec![format!(
                "domain.teacher_rank: domain {i} teacher has rank {found}, expected {r}"
            )]));
        }
        deltas.push(delta);
    }
    Ok((deltas, shared))
}

/// Build the backbone, one domain per client, every cross-domain pair, and
/// the optional calibration batch. Deterministic in `seed`.
pub fn gen_domains(cfg: &Config, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let d = &cfg.domain;
    let backbone = build_backbone(cfg, seed)?;
    let w0 = effective_map(&backbone);
    let (deltas, shared) = build_teachers(cfg, seed)?;

    let mut rng = rng::stream(seed, streams::DATA);
    let mut domains = Vec::with_capacity(deltas.len());
    for (id, delta) in deltas.iter().enumerate() {
        let map = w0.add(delta)?;
        let x_train = standard_inputs(&mut rng, d.train_samples, d.d_in);
        let y_train = targets(&mut rng, &x_train, &map, d.noise);
        let x_test = standard_inputs(&mut rng, d.test_samples, d.d_in);
        let y_test = targets(&mut rng, &x_test, &map, 0.0);
        domains.push(SyntheticDomain {
            id,
            teacher_delta: delta.clone(),
            train: Batch::new(x_train, y_train)?,
            test: Batch::new(x_test, y_test)?,
        });
    }

    let mut cross = Vec::new();
    for a in 0..deltas.len() {
        for b in a + 1..deltas.len() {
            let map = w0.add(&deltas[a])?.add(&deltas[b])?;
            let x = standard_inputs(&mut rng, d.cross_samples, d.d_in);
            let y = targets(&mut rng, &x, &map, 0.0);
            let task = CrossDomainTask {
                pair: (a, b),
                test: Batch::new(x, y)?,
            };
            check_hardness(&w0, &deltas, &task, cfg.eval.hardness_floor)?;
            cross.push(task);
        }
    }

    let calibration = if cfg.prune.calibration_size > 0 {
        let mut rng = rng::stream(seed, streams::CALIBRATION);
        let v = rng::gaussian(&mut rng, d.d_in, d.teacher_rank, 1.0 / (d.d_in as f64).sqrt());
        let public = matmul_nt(&shared, &v)?.scale(d.teacher_scale);
        let map = w0.add(&public)?;
        let x = standard_inputs(&mut rng, cfg.prune.calibration_size, d.d_in);
        let y = targets(&mut rng, &x, &map, 0.0);
        Some(Batch::new(x, y)?)
    } else {
        None
    };

    Ok(Scenario {
        backbone,
        domains,
        cross,
        calibration,
    })
}

/// Each teacher alone must leave at least `floor` MSE on the pair's task.
fn check_hardness(w0: &DenseMatrix, deltas: &[DenseMatrix], task: &CrossDomainTask, floor: f64) -> Result<()> {
    let (a, b) = task.pair;
    for single in [a, b] {
        let map = w0.add(&deltas[single])?;
        let pred = matmul_nt(&task.test.inputs, &map)?;
        let residual = mse(&pred, &task.test.targets)?;
        if residual < floor {
            return Err(Error::Config(vec![format!(
                "eval.hardness_floor: domain {single} alone reaches MSE {residual:.3e} on cross task ({a}, {b}), below the floor {floor}"
            )]));
        }
    }
    Ok(())
}
