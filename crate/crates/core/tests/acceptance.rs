//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//! Reference values are produced by the independent routines in `oracle`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lorafuse::conflict::{deconflict, deconflict_in, shared_subspace, SharedSubspace};
use lorafuse::io::config::Config;
use lorafuse::io::report::strip_timings;
use lorafuse::lora::{materialize, LoraAdapter};
use lorafuse::matrix::DenseMatrix;
use lorafuse::pruning::{pruning_ratio, LayerPrune};
use lorafuse::recovery::recover;
use lorafuse::sim::train::{adapted_loss, loss_and_gradients};
use lorafuse::sim::run_pipeline;
use lorafuse::{Backbone, Batch, Layer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

mod oracle {
    //! Scalar-loop reference implementations, written against the
    //! definitions rather than against the library.

    /// Row-major dense matrix as nested vectors.
    pub type Mat = Vec<Vec<f64>>;

    pub fn zeros(r: usize, c: usize) -> Mat {
        vec![vec![0.0; c]; r]
    }

    /// Cyclic two-sided Jacobi eigen-decomposition of a symmetric matrix.
    /// Returns eigenvalues and eigenvectors (as columns of the second value).
    pub fn sym_eigen(a: &Mat) -> (Vec<f64>, Mat) {
        let n = a.len();
        let mut m = a.clone();
        let mut v = zeros(n, n);
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..200 {
            let mut off = 0.0;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    total += m[i][j] * m[i][j];
                    if i != j {
                        off += m[i][j] * m[i][j];
                    }
                }
            }
            if off <= 1e-32 * total || total == 0.0 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if m[p][q] == 0.0 {
                        continue;
                    }
                    let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[k][p], m[k][q]);
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[p][k], m[q][k]);
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        ((0..n).map(|i| m[i][i]).collect(), v)
    }

    /// Shared basis: eigenvectors of `C Cᵀ` for `C = [ΔW_1 … ΔW_N]`, sorted
    /// by eigenvalue, truncated by count and relative singular value, with
    /// the largest-magnitude entry of each column made nonnegative.
    pub fn shared_basis(updates: &[Mat], max_dirs: usize, tol: f64) -> Mat {
        let rows = updates[0].len();
        let mut s = zeros(rows, rows);
        for u in updates {
            for i in 0..rows {
                for j in 0..rows {
                    for k in 0..u[0].len() {
                        s[i][j] += u[i][k] * u[j][k];
                    }
                }
            }
        }
        let (vals, vecs) = sym_eigen(&s);
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let sigma: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0).sqrt()).collect();
        let keep = sigma.iter().take_while(|&&x| x >= tol * sigma[0] && x > 0.0).count().min(max_dirs);
        let mut basis = zeros(rows, keep);
        for (col, &src) in order.iter().take(keep).enumerate() {
            let mut best = 0;
            for i in 0..rows {
                if vecs[i][src].abs() > vecs[best][src].abs() {
                    best = i;
                }
            }
            let sign = if vecs[best][src] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..rows {
                basis[i][col] = sign * vecs[i][src];
            }
        }
        basis
    }

    fn cos(u: &[f64], v: &[f64]) -> f64 {
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu < 1e-12 || nv < 1e-12 {
            return 0.0;
        }
        let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        d / (nu * nv)
    }

    /// Per-direction scores `(c_k unclamped, g_k, s_{i,k})` from
    /// projections `Z_i` (`r × d_in`).
    pub fn scores(z: &[Mat]) -> Vec<(f64, Vec<f64>)> {
        let dirs = z[0].len();
        let width = z[0][0].len();
        let mut out = Vec::new();
        for k in 0..dirs {
            let alpha: Vec<f64> = z.iter().map(|zi| zi[k].iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let total: f64 = alpha.iter().sum();
            let mut bar = vec![0.0; width];
            if total > 1e-12 {
                for (zi, a) in z.iter().zip(&alpha) {
                    for j in 0..width {
                        bar[j] += a * zi[k][j] / total;
                    }
                }
            }
            let cosines: Vec<f64> = z.iter().map(|zi| cos(&zi[k], &bar)).collect();
            let c = if total > 1e-12 {
                alpha.iter().zip(&cosines).map(|(a, cs)| a * (1.0 - cs)).sum::<f64>() / (2.0 * total)
            } else {
                0.0
            };
            out.push((c, cosines));
        }
        out
    }

    pub fn project(basis: &Mat, u: &Mat) -> Mat {
        let (rows, dirs, cols) = (basis.len(), basis[0].len(), u[0].len());
        let mut z = zeros(dirs, cols);
        for k in 0..dirs {
            for j in 0..cols {
                for i in 0..rows {
                    z[k][j] += basis[i][k] * u[i][j];
                }
            }
        }
        z
    }

    /// Full de-confliction: `ΔW_i^CR = U · (g ⊙ s_i ⊙ Z_i)`.
    pub fn deconflict(updates: &[Mat], max_dirs: usize, tol: f64) -> Vec<Mat> {
        let (rows, cols) = (updates[0].len(), updates[0][0].len());
        let basis = shared_basis(updates, max_dirs, tol);
        if basis[0].is_empty() {
            return vec![zeros(rows, cols); updates.len()];
        }
        let z: Vec<Mat> = updates.iter().map(|u| project(&basis, u)).collect();
        let sc = scores(&z);
        z.iter()
            .enumerate()
            .map(|(i, zi)| {
                let mut out = zeros(rows, cols);
                for (k, (c, cosines)) in sc.iter().enumerate() {
                    let w = (1.0 - c) * cosines[i].max(0.0);
                    for r in 0..rows {
                        for j in 0..cols {
                            out[r][j] += basis[r][k] * w * zi[k][j];
                        }
                    }
                }
                out
            })
            .collect()
    }
}

fn to_mat(m: &DenseMatrix) -> oracle::Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

/// Random low-rank update set with a common shape.
fn random_updates(rng: &mut ChaCha8Rng, n: usize, rows: usize, cols: usize, rank: usize) -> Vec<DenseMatrix> {
    (0..n)
        .map(|_| {
            let b = gaussian(rng, rows, rank, 1.0);
            let a = gaussian(rng, rank, cols, 1.0);
            materialize(&LoraAdapter::new("fc", b, a, rank as f64).unwrap())
        })
        .collect()
}

fn max_dev(a: &DenseMatrix, b: &oracle::Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a.get(i, j) - v).abs());
        }
    }
    worst
}

fn max_dev_dense(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn conflict_bounds() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut lo, mut hi, mut identical_max) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    let mut raw_lo = f64::INFINITY;
    let mut raw_hi = f64::NEG_INFINITY;
    for case in 0..1000 {
        let n = rng.random_range(1..=4);
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=16);
        let rank = rng.random_range(1..=4usize.min(rows).min(cols));
        let identical = case % 4 == 0;
        let updates = if identical {
            let one = random_updates(&mut rng, 1, rows, cols, rank).remove(0);
            vec![one; n]
        } else {
            random_updates(&mut rng, n, rows, cols, rank)
        };
        let set = deconflict(&updates, 16, 1e-8).map_err(|e| e.to_string())?;
        for d in &set.report.directions {
            lo = lo.min(d.conflict);
            hi = hi.max(d.conflict);
            if identical {
                identical_max = identical_max.max(d.conflict);
            }
        }
        let z: Vec<oracle::Mat> = updates
            .iter()
            .map(|u| oracle::project(&to_mat(&set.subspace.basis), &to_mat(u)))
            .collect();
        if !z[0].is_empty() {
            for (c, _) in oracle::scores(&z) {
                raw_lo = raw_lo.min(c);
                raw_hi = raw_hi.max(c);
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        lo >= 0.0 && hi <= 1.0 && raw_lo >= -1e-12 && raw_hi <= 1.0 + 1e-12 && identical_max <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "1000 sets: c in [{lo:.3e}, {hi:.3e}] (unclamped [{raw_lo:.3e}, {raw_hi:.3e}]), identical max {identical_max:.1e}, {elapsed:.2?}"
        ),
        format!("c range [{lo}, {hi}], unclamped [{raw_lo}, {raw_hi}], identical max {identical_max}, {elapsed:?}"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=4);
        let rows = rng.random_range(2..=8);
        let cols = rng.random_range(2..=8);
        let rank = rng.random_range(1..=4usize.min(rows).min(cols));
        let updates = random_updates(&mut rng, n, rows, cols, rank);
        let full_rank = rows.min(n * rank);
        let max_dirs = rng.random_range(1..=full_rank);
        let got = deconflict(&updates, max_dirs, 1e-8).map_err(|e| e.to_string())?;
        let mats: Vec<oracle::Mat> = updates.iter().map(to_mat).collect();
        let want = oracle::deconflict(&mats, max_dirs, 1e-8);
        for (g, w) in got.updates.iter().zip(&want) {
            worst = worst.max(max_dev(g, w));
        }
    }
    check(
        worst <= 1e-10,
        format!("200 instances, max deviation {worst:.2e}"),
        format!("max deviation {worst:.3e} exceeds 1e-10"),
    )
}

fn hand_fixture() -> Outcome {
    let e1_first = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
    let e1_second = DenseMatrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
    let set = deconflict(&[e1_first, e1_second], 2, 1e-8).map_err(|e| e.to_string())?;
    let c = set.report.directions[0].conflict;
    let w = set.updates[0].get(0, 0);
    let expect_c = (1.0 - 1.0 / 2f64.sqrt()) / 2.0;
    let expect_w = (1.0 - expect_c) / 2f64.sqrt();
    let others = [set.updates[0].get(0, 1), set.updates[0].get(1, 0), set.updates[0].get(1, 1)];
    check(
        set.report.directions.len() == 1
            && (c - 0.146447).abs() <= 1e-6
            && (w - 0.603553).abs() <= 1e-6
            && (c - expect_c).abs() <= 1e-12
            && (w - expect_w).abs() <= 1e-12
            && others.iter().all(|v| v.abs() <= 1e-12),
        format!("c = {c:.6}, resolved[0,0] = {w:.6}"),
        format!("c = {c}, resolved[0,0] = {w}, other entries {others:?}"),
    )
}

fn recovery_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let bits = |m: &DenseMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for case in 0..200 {
        let full = (rng.random_range(2..=12), rng.random_range(2..=12));
        let pick = |rng: &mut ChaCha8Rng, n: usize| {
            let mut idx: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
            if idx.is_empty() {
                idx.push(rng.random_range(0..n));
            }
            idx
        };
        let rows = pick(&mut rng, full.0);
        let cols = pick(&mut rng, full.1);
        let rank = rng.random_range(1..=4usize.min(rows.len()).min(cols.len()));
        let ad = LoraAdapter::new(
            "fc",
            gaussian(&mut rng, rows.len(), rank, 1.0),
            gaussian(&mut rng, rank, cols.len(), 1.0),
            rng.random_range(1.0..32.0),
        )
        .unwrap();
        let lp = LayerPrune {
            name: "fc".into(),
            rows: rows.clone(),
            cols: cols.clone(),
        };
        let rec = recover(&ad, &lp, full).map_err(|e| e.to_string())?.adapter;
        let ranks: Vec<usize> = (0..rank).collect();
        let b_back = rec.b().select(&rows, &ranks).unwrap();
        let a_back = rec.a().select(&ranks, &cols).unwrap();
        if bits(&b_back) != bits(ad.b()) || bits(&a_back) != bits(ad.a()) {
            return Err(format!("case {case}: select-back differs"));
        }
        let dense = materialize(&rec);
        for i in 0..full.0 {
            for j in 0..full.1 {
                if (!rows.contains(&i) || !cols.contains(&j)) && dense.get(i, j) != 0.0 {
                    return Err(format!("case {case}: nonzero off-grid entry at ({i}, {j})"));
                }
            }
        }
    }
    Ok("200 maps bitwise exact, zero off the retained grid".into())
}

fn invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut homog, mut sign, mut perm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(2..=4);
        let rows = rng.random_range(2..=8);
        let cols = rng.random_range(2..=8);
        let rank = rng.random_range(1..=3usize.min(rows).min(cols));
        let updates = random_updates(&mut rng, n, rows, cols, rank);
        let max_dirs = rng.random_range(1..=rows.min(n * rank));
        let base = deconflict(&updates, max_dirs, 1e-8).map_err(|e| e.to_string())?;

        let t: f64 = rng.random_range(0.1..10.0);
        let scaled: Vec<DenseMatrix> = updates.iter().map(|u| u.scale(t)).collect();
        let s = deconflict(&scaled, max_dirs, 1e-8).map_err(|e| e.to_string())?;
        for (a, b) in s.updates.iter().zip(&base.updates) {
            homog = homog.max(max_dev_dense(a, &b.scale(t)));
        }

        let sub = shared_subspace(&updates, max_dirs, 1e-8).map_err(|e| e.to_string())?;
        let flips: Vec<f64> = (0..sub.dims())
            .map(|_| if rng.random_bool(0.5) { -1.0 } else { 1.0 })
            .collect();
        let flipped_basis = DenseMatrix::new(
            sub.basis.rows(),
            sub.basis.cols(),
            (0..sub.basis.rows() * sub.basis.cols())
                .map(|idx| sub.basis.data()[idx] * flips[idx % sub.basis.cols()])
                .collect(),
        )
        .unwrap();
        let flipped = SharedSubspace {
            basis: flipped_basis,
            singular_values: sub.singular_values.clone(),
        };
        let f = deconflict_in(flipped, &updates).map_err(|e| e.to_string())?;
        for (a, b) in f.updates.iter().zip(&base.updates) {
            sign = sign.max(max_dev_dense(a, b));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1);
        order.swap(0, n - 1);
        let permuted: Vec<DenseMatrix> = order.iter().map(|&i| updates[i].clone()).collect();
        let p = deconflict(&permuted, max_dirs, 1e-8).map_err(|e| e.to_string())?;
        for (slot, &i) in order.iter().enumerate() {
            perm = perm.max(max_dev_dense(&p.updates[slot], &base.updates[i]));
        }
    }
    check(
        homog <= 1e-8 && sign <= 1e-8 && perm <= 1e-8,
        format!("100 instances each: homogeneity {homog:.1e}, sign {sign:.1e}, permutation {perm:.1e}"),
        format!("homogeneity {homog:.3e}, sign {sign:.3e}, permutation {perm:.3e}"),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for case in 0..50 {
        let d_in = rng.random_range(2..=5);
        let hidden = rng.random_range(2..=5);
        let d_out = rng.random_range(2..=5);
        let chain = case % 2 == 0;
        let backbone = if chain {
            Backbone::chain(
                Layer::new("fc1", gaussian(&mut rng, hidden, d_in, 0.5)),
                Layer::new("fc2", gaussian(&mut rng, d_out, hidden, 0.5)),
            )
            .unwrap()
        } else {
            Backbone::single(Layer::new("fc", gaussian(&mut rng, d_out, d_in, 0.5)))
        };
        let adapters: Vec<LoraAdapter> = backbone
            .layers()
            .iter()
            .map(|l| {
                let (r, c) = l.weight.shape();
                let rank = rng.random_range(1..=r.min(c).min(3));
                LoraAdapter::new(
                    l.name.clone(),
                    gaussian(&mut rng, r, rank, 0.5),
                    gaussian(&mut rng, rank, c, 0.5),
                    rng.random_range(1.0..8.0),
                )
                .unwrap()
            })
            .collect();
        let n = rng.random_range(2..=6);
        let batch = Batch::new(gaussian(&mut rng, n, d_in, 1.0), gaussian(&mut rng, n, d_out, 1.0)).unwrap();
        let (_, grads) = loss_and_gradients(&backbone, &adapters, &batch).map_err(|e| e.to_string())?;

        for (l, g) in grads.iter().enumerate() {
            for which in 0..2 {
                let analytic = if which == 0 { &g.b } else { &g.a };
                let mut diff_sq = 0.0;
                let mut ref_sq = 0.0;
                for idx in 0..analytic.data().len() {
                    let loss_at = |delta: f64| {
                        let mut ads = adapters.clone();
                        let ad = &ads[l];
                        let (mut b, mut a) = (ad.b().data().to_vec(), ad.a().data().to_vec());
                        if which == 0 {
                            b[idx] += delta;
                        } else {
                            a[idx] += delta;
                        }
                        ads[l] = LoraAdapter::new(
                            ad.layer_name(),
                            DenseMatrix::new(ad.b().rows(), ad.b().cols(), b).unwrap(),
                            DenseMatrix::new(ad.a().rows(), ad.a().cols(), a).unwrap(),
                            ad.alpha(),
                        )
                        .unwrap();
                        adapted_loss(&backbone, &ads, &batch).unwrap()
                    };
                    let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                    diff_sq += (analytic.data()[idx] - fd).powi(2);
                    ref_sq += fd * fd;
                }
                let rel = diff_sq.sqrt() / ref_sq.sqrt().max(1e-12);
                worst = worst.max(rel);
            }
        }
    }
    check(
        worst <= 1e-5,
        format!("50 instances, worst relative error {worst:.2e}"),
        format!("worst relative error {worst:.3e} exceeds 1e-5"),
    )
}

struct SeedRun {
    no_cr: f64,
    cr: f64,
    pre: Vec<f64>,
    post: Vec<f64>,
}

fn sweep(ratio: f64) -> Result<Vec<SeedRun>, String> {
    (0..20u64)
        .map(|seed| {
            let mut cfg = Config::with_seed(seed);
            cfg.prune.ratio = ratio;
            let r = run_pipeline(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
            Ok(SeedRun {
                no_cr: r.fused.mean_cross_domain.ok_or("no cross-domain task")?,
                cr: r
                    .fused_cr
                    .as_ref()
                    .and_then(|s| s.mean_cross_domain)
                    .ok_or("no conflict-resolved scores")?,
                pre: r.layers.iter().map(|l| l.pre_cr_mean_conflict).collect(),
                post: r.layers.iter().filter_map(|l| l.post_cr_mean_conflict).collect(),
            })
        })
        .collect()
}

fn mean_improvement(runs: &[SeedRun]) -> f64 {
    runs.iter().map(|r| r.no_cr - r.cr).sum::<f64>() / runs.len() as f64
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |id: usize, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    };

    report(1, "conflict score bounds", conflict_bounds());
    report(2, "de-confliction matches scalar oracle", oracle_equivalence());
    report(3, "hand-derived orthogonal-rows fixture", hand_fixture());
    report(4, "recovery exactness", recovery_exactness());
    report(5, "invariances", invariances());
    report(6, "training gradients vs finite differences", gradient_check());

    let sim_start = Instant::now();
    let mid = sweep(0.6);
    let sim_elapsed = sim_start.elapsed();
    match &mid {
        Ok(runs) => {
            let wins = runs.iter().filter(|r| r.cr < r.no_cr).count();
            let mean_no = runs.iter().map(|r| r.no_cr).sum::<f64>() / 20.0;
            let mean_cr = runs.iter().map(|r| r.cr).sum::<f64>() / 20.0;
            report(
                7,
                "conflict resolution lowers cross-domain error",
                check(
                    wins >= 14 && mean_cr < mean_no && sim_elapsed < Duration::from_secs(120),
                    format!("{wins}/20 seeds, mean {mean_cr:.4} vs {mean_no:.4} without, {sim_elapsed:.2?}"),
                    format!("{wins}/20 seeds, mean {mean_cr:.4} vs {mean_no:.4}, {sim_elapsed:?}"),
                ),
            );
            let violations: Vec<String> = runs
                .iter()
                .enumerate()
                .filter(|(_, r)| r.post.len() != r.pre.len() || r.post.iter().zip(&r.pre).any(|(p, q)| p > q))
                .map(|(s, r)| format!("seed {s}: pre {:?} post {:?}", r.pre, r.post))
                .collect();
            let pre = runs.iter().flat_map(|r| &r.pre).sum::<f64>() / (runs.len() * 2) as f64;
            let post = runs.iter().flat_map(|r| &r.post).sum::<f64>() / (runs.len() * 2) as f64;
            report(
                8,
                "conflict does not increase after resolution",
                check(
                    violations.is_empty(),
                    format!("every seed and layer; mean c {pre:.4} -> {post:.4}"),
                    violations.join("; "),
                ),
            );
        }
        Err(e) => {
            report(7, "conflict resolution lowers cross-domain error", Err(e.clone()));
            report(8, "conflict does not increase after resolution", Err(e.clone()));
        }
    }

    let trend = sweep(0.4).and_then(|low| sweep(0.8).map(|high| (low, high)));
    report(
        9,
        "improvement grows with pruning ratio",
        trend.and_then(|(low, high)| {
            let (a, b) = (mean_improvement(&low), mean_improvement(&high));
            check(
                b >= a,
                format!("mean improvement {a:.4} at 0.4, {b:.4} at 0.8"),
                format!("mean improvement {a:.4} at 0.4 exceeds {b:.4} at 0.8"),
            )
        }),
    );

    report(
        10,
        "pruning accounting",
        pruning_ratio(8_030_261_248, 3_976_728_576)
            .map_err(|e| e.to_string())
            .and_then(|r| {
                let rounded = (r * 100.0).round() / 100.0;
                check(
                    rounded == 0.50,
                    format!("ratio {r:.6} rounds to {rounded:.2}"),
                    format!("ratio {r} rounds to {rounded}"),
                )
            }),
    );

    report(11, "pipeline determinism", determinism());

    println!("acceptance finished in {:.2?}", started.elapsed());
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

fn run_cli_pipeline(config: &Path, out: &Path) -> Result<serde_json::Value, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_lorafuse"))
        .args(["pipeline", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("pipeline exited with {status}"));
    }
    let text = std::fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"seed": 11}"#).map_err(|e| e.to_string())?;
    let a = strip_timings(run_cli_pipeline(&config, &dir.path().join("a"))?);
    let b = strip_timings(run_cli_pipeline(&config, &dir.path().join("b"))?);
    let (ta, tb) = (a.to_string(), b.to_string());
    check(
        ta == tb,
        format!("two runs identical after dropping timings ({} bytes)", ta.len()),
        "reports differ".into(),
    )
}
