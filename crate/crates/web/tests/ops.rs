use lorafuse_web::ops::{explore_conflict, explore_pruning, run_pipeline, ConflictResponse, PruneResponse};
use serde_json::Value;

/// Eigenvectors of the symmetric 2x2 matrix `X Xᵀ`, largest eigenvalue first.
fn principal_axes(v: &[[f64; 2]]) -> [([f64; 2], f64); 2] {
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for x in v {
        a += x[0] * x[0];
        b += x[0] * x[1];
        d += x[1] * x[1];
    }
    let theta = 0.5 * (2.0 * b).atan2(a - d);
    let (c, s) = (theta.cos(), theta.sin());
    let l1 = a * c * c + 2.0 * b * c * s + d * s * s;
    let l2 = a * s * s - 2.0 * b * c * s + d * c * c;
    [([c, s], l1.max(0.0).sqrt()), ([-s, c], l2.max(0.0).sqrt())]
}

/// Per-axis conflict and resolved vectors for scalar projections.
fn oracle(v: &[[f64; 2]]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let mut resolved = vec![[0.0; 2]; v.len()];
    let mut conflicts = Vec::new();
    for (u, _) in principal_axes(v) {
        let z: Vec<f64> = v.iter().map(|x| u[0] * x[0] + u[1] * x[1]).collect();
        let total: f64 = z.iter().map(|t| t.abs()).sum();
        let m: f64 = z.iter().map(|t| t.abs() * t).sum::<f64>() / total;
        let opposed: f64 = z.iter().filter(|t| t.signum() != m.signum()).map(|t| t.abs()).sum();
        let c = opposed / total;
        conflicts.push(c);
        for (i, t) in z.iter().enumerate() {
            let s = if t.signum() == m.signum() { 1.0 } else { 0.0 };
            let w = (1.0 - c) * s * t;
            resolved[i][0] += w * u[0];
            resolved[i][1] += w * u[1];
        }
    }
    (conflicts, resolved)
}

#[test]
fn conflict_explorer_matches_planar_oracle() {
    let updates = [[1.0, 0.1], [-0.5, 0.2], [0.3, 0.9], [0.8, -0.4]];
    let req = serde_json::json!({ "updates": updates }).to_string();
    let got: ConflictResponse = serde_json::from_str(&explore_conflict(&req).unwrap()).unwrap();
    let (conflicts, resolved) = oracle(&updates);
    assert_eq!(got.basis.len(), 2);
    for (d, c) in got.directions.iter().zip(&conflicts) {
        assert!((d.conflict - c).abs() <= 1e-12, "{} vs {c}", d.conflict);
    }
    assert!((got.mean_conflict - conflicts.iter().sum::<f64>() / 2.0).abs() <= 1e-12);
    for (g, r) in got.resolved.iter().zip(&resolved) {
        assert!((g[0] - r[0]).abs() <= 1e-12 && (g[1] - r[1]).abs() <= 1e-12);
    }
    let expect = [
        updates.iter().map(|u| u[0]).sum::<f64>() / 4.0,
        updates.iter().map(|u| u[1]).sum::<f64>() / 4.0,
    ];
    assert!((got.merged[0] - expect[0]).abs() <= 1e-15 && (got.merged[1] - expect[1]).abs() <= 1e-15);
}

#[test]
fn aligned_updates_pass_through() {
    let req = r#"{"updates": [[0.6, 0.8], [1.2, 1.6]], "max_dirs": 1}"#;
    let got: ConflictResponse = serde_json::from_str(&explore_conflict(req).unwrap()).unwrap();
    assert_eq!(got.basis.len(), 1);
    assert!(got.mean_conflict.abs() <= 1e-12);
    assert!((got.resolved[1][0] - 1.2).abs() <= 1e-12 && (got.resolved[1][1] - 1.6).abs() <= 1e-12);
}

#[test]
fn conflict_explorer_rejects_bad_requests() {
    assert!(explore_conflict(r#"{"updates": []}"#).is_err());
    assert!(explore_conflict(r#"{"updates": [[1, 2, 3]]}"#).is_err());
    assert!(explore_conflict(r#"{"updates": [[1, 2]], "extra": 1}"#).is_err());
}

#[test]
fn pruning_explorer_keeps_the_most_important_units() {
    let got: PruneResponse = serde_json::from_str(&explore_pruning(r#"{"seed": 4, "ratio": 0.5}"#).unwrap()).unwrap();
    assert_eq!(got.scores.len(), 16);
    let kept = got.kept.iter().filter(|k| **k).count();
    assert_eq!(kept, 8);
    assert_eq!(got.params_after, 2 * 16 * 8);
    assert!((got.achieved_ratio - 0.5).abs() <= 1e-12);
    let min_kept = got.scores.iter().zip(&got.kept).filter(|(_, k)| **k).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
    let max_dropped = got.scores.iter().zip(&got.kept).filter(|(_, k)| !**k).map(|(s, _)| *s).fold(0.0, f64::max);
    assert!(min_kept >= max_dropped);
    let err = explore_pruning(r#"{"seed": 4, "ratio": 1.5}"#).unwrap_err();
    assert!(err.contains("prune.ratio"), "{err}");
}

#[test]
fn pipeline_runner_returns_the_core_report() {
    let config = r#"{"seed": 2, "train": {"steps": 60}}"#;
    let got: Value = serde_json::from_str(&run_pipeline(config).unwrap()).unwrap();
    let cfg = lorafuse::io::config::parse_config(config).unwrap();
    let direct: Value = serde_json::from_str(
        &lorafuse::io::to_report_json(&lorafuse::run_pipeline(&cfg).unwrap()).unwrap(),
    )
    .unwrap();
    let strip = lorafuse::io::strip_timings;
    assert_eq!(strip(got), strip(direct));
    assert!(run_pipeline(r#"{"train": {"steps": 60}}"#).unwrap_err().contains("seed"));
}
