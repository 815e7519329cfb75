use super::*;
use crate::config::RunConfig;
use crate::experts::{ModelParams, VariantPolicy};
use crate::losses::LossConfig;
use crate::numerics::Tape;

fn world(cfg: &SyntheticConfig, seed: u64) -> TaskWorld {
    TaskWorld::new(cfg, &MoEConfig::default(), seed).unwrap()
}

#[test]
fn batches_are_deterministic() {
    let w = world(&SyntheticConfig::default(), 3);
    assert_eq!(w.generate_batch(17), w.generate_batch(17));
    assert_eq!(w.generate_batch(17), generate_batch(&SyntheticConfig::default(), &MoEConfig::default(), 3, 17).unwrap());
    assert_ne!(w.generate_batch(17), w.generate_batch(18));
    assert_ne!(w.generate_batch(17), world(&SyntheticConfig::default(), 4).generate_batch(17));
}

#[test]
fn scene_features_cluster_by_scene_type() {
    let cfg = SyntheticConfig::default();
    let w = world(&cfg, 11);
    let dg = MoEConfig::default().d_scene;
    let mut sums = vec![vec![0.0; dg]; cfg.n_scenes];
    let mut counts = vec![0usize; cfg.n_scenes];
    for i in 0..1000 {
        let b = w.generate_batch(i);
        let pooled = crate::routing::pool_scene(&b.features).unwrap();
        for (s, v) in sums[b.scene_type].iter_mut().zip(&pooled.0) {
            *s += v;
        }
        counts[b.scene_type] += 1;
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    // each estimated coordinate has standard error scene_noise / sqrt(tokens * ~250)
    let tol = 0.05 * cfg.scene_margin;
    for a in 0..cfg.n_scenes {
        for b in a + 1..cfg.n_scenes {
            let d = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d >= cfg.scene_margin - tol, "scenes {a},{b}: {d}");
        }
    }
}

/// Solves the normal equations `(X^T X) w = X^T y` by Gaussian elimination.
fn least_squares(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let n = xs[0].len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (x, y) in xs.iter().zip(ys) {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += x[i] * x[j];
            }
            a[i][n] += x[i] * y;
        }
    }
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let pivot = a[c].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != c {
                let f = row[c] / pivot[c];
                for (v, p) in row.iter_mut().zip(&pivot).skip(c) {
                    *v -= f * p;
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

#[test]
fn per_type_least_squares_recovers_distinct_maps() {
    let cfg = SyntheticConfig {
        n_types: 2,
        nonlinear_gain: 0.0,
        scene_offset: 0.0,
        ..SyntheticConfig::default()
    };
    let w = world(&cfg, 5);
    let d = MoEConfig::default().d_model;
    let mut xs = [Vec::new(), Vec::new()];
    let mut ys = [Vec::new(), Vec::new()];
    for i in 0..20 {
        let b = w.generate_batch(i);
        for ((q, y), &t) in b.queries.iter().zip(&b.targets).zip(&b.instance_types) {
            let mut x = q.0.clone();
            x.push(1.0);
            xs[t].push(x);
            ys[t].push(y.0.clone());
        }
    }
    let mut fitted = Vec::new();
    for t in 0..2 {
        let mut rows = Vec::new();
        for out in 0..d {
            let target: Vec<f64> = ys[t].iter().map(|y| y[out]).collect();
            let coef = least_squares(&xs[t], &target);
            for (j, c) in coef[..d].iter().enumerate() {
                assert!((c - w.target_map(t).a.get(out, j)).abs() < 1e-8);
            }
            assert!(coef[d].abs() < 1e-8);
            rows.push(coef[..d].to_vec());
        }
        fitted.push(rows);
    }
    let diff: f64 = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| (fitted[0][i][j] - fitted[1][i][j]).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(diff > 1.0, "{diff}");
}

#[test]
fn skewed_weights_shift_frequencies() {
    let w = world(&SyntheticConfig::skewed(), 2);
    let mut first = 0;
    let mut total = 0;
    for i in 0..200 {
        let b = w.generate_batch(i);
        first += b.instance_types.iter().filter(|t| **t == 0).count();
        total += b.instance_types.len();
    }
    let share = first as f64 / total as f64;
    assert!((share - 0.7).abs() < 0.05, "{share}");
}

fn quick(policy: VariantPolicy, steps: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.policy = policy;
    c.train.steps = steps;
    c.train.eval_batches = 4;
    c
}

#[test]
fn zero_steps_returns_initial_params() {
    let c = quick(VariantPolicy::Hierarchical, 0);
    let out = train(&c, &mut |_| Ok(())).unwrap();
    assert_eq!(out.params, ModelParams::init(VariantPolicy::Hierarchical, &c.moe, c.train.seed).unwrap());
    assert!(out.metrics.is_empty());
    assert!(!out.trace.is_empty());
}

#[test]
fn identical_runs_log_identically() {
    let c = quick(VariantPolicy::Hierarchical, 5);
    let csv = |c: &RunConfig| {
        let mut log = MetricLog::new(Vec::new()).unwrap();
        let out = train(c, &mut |r| log.append(r)).unwrap();
        (String::from_utf8(log.into_inner().unwrap()).unwrap(), out.trace.to_jsonl_string())
    };
    let a = csv(&c);
    assert_eq!(a, csv(&c));
    let header = a.0.lines().next().unwrap();
    assert_eq!(header, METRIC_COLUMNS.join(","));
    assert_eq!(a.0.lines().count(), 6);
}

#[test]
fn clipping_bounds_every_applied_update() {
    let c = quick(VariantPolicy::Hierarchical, 10);
    let out = train(&c, &mut |_| Ok(())).unwrap();
    let mut engaged = 0;
    for r in &out.metrics {
        if r.grad_norm > c.train.clip {
            engaged += 1;
            assert!(r.applied_norm <= c.train.clip * (1.0 + 1e-12), "{r:?}");
        } else {
            assert_eq!(r.applied_norm, r.grad_norm);
        }
    }
    assert!(engaged > 0);
}

#[test]
fn unselected_experts_receive_no_update() {
    let mut c = quick(VariantPolicy::Hierarchical, 1);
    c.loss.lambda2 = 0.0;
    c.data.queries_per_scene = 2;
    c.train.batch_size = 1;
    let w = TaskWorld::new(&c.data, &c.moe, c.train.seed).unwrap();
    let init = ModelParams::init(VariantPolicy::Hierarchical, &c.moe, c.train.seed).unwrap();
    let mut tape = Tape::new();
    let obj = objective(&mut tape, &init, &[w.generate_batch(0)], &w.probes(0, 32), &c.loss).unwrap();
    let used: std::collections::BTreeSet<usize> = obj.trace.records().iter().flat_map(|r| r.experts.clone()).collect();
    assert!(used.len() < c.moe.n_experts);

    let out = train(&c, &mut |_| Ok(())).unwrap();
    for k in 0..c.moe.n_experts {
        let changed = out.params.expert(k) != init.expert(k);
        assert_eq!(changed, used.contains(&k), "expert {k}");
    }
}

#[test]
fn divergence_is_reported() {
    let mut c = quick(VariantPolicy::Dense, 3);
    c.data.scene_offset = 1e308;
    c.data.target_noise = 0.0;
    let err = train(&c, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, crate::Error::Divergence { step: 0, .. }), "{err}");
}

#[test]
fn dense_loss_halves_on_single_type_task() {
    let mut c = quick(VariantPolicy::Dense, 300);
    c.data.n_types = 1;
    c.data.scene_offset = 0.0;
    let out = train(&c, &mut |_| Ok(())).unwrap();
    let first = out.metrics[0].losses.task;
    let last = out.metrics.last().unwrap().losses.task;
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn strong_balancing_flattens_utilization() {
    let mut c = quick(VariantPolicy::Hierarchical, 300);
    c.loss = LossConfig {
        lambda1: 10.0,
        ..LossConfig::default()
    };
    c.train.eval_batches = 16;
    let out = train(&c, &mut |_| Ok(())).unwrap();
    let f = crate::losses::utilization(&out.trace).unwrap().f;
    let n = f.len() as f64;
    let worst = f.iter().map(|v| (v - 1.0 / n).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.1, "{f:?}");
}
