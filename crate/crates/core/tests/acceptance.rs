//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//! Runs without the libtest harness so every line is printed.

use std::fs;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use himoe::config::{RunConfig, RunManifest};
use himoe::diagnostics::{route_profile, Attribution, DiagnosticsReport, SHARE_NORMALIZATION};
use himoe::experts::{count_params_flops, ExpertParams, ModelParams, VariantPolicy};
use himoe::gradcheck::{check_gradients, small_config};
use himoe::latency::{measure_latency, DEFAULT_TIMED, DEFAULT_WARMUP};
use himoe::losses::{balance_loss, utilization};
use himoe::numerics::{jsd, Matrix, Vector};
use himoe::routing::{himoe_forward, MoEConfig, RouterParams, RoutingTrace, TraceRecord};
use himoe::synthetic::{train, MetricLog, SyntheticConfig, TaskWorld};

const SIMPLEX_TOL: f64 = 1e-9;
const DENSE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const JSD_ZERO_TOL: f64 = 1e-12;
const ROUTING_CASES: usize = 1000;
const DENSE_CASES: usize = 100;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const BALANCE_MIN_WINS: usize = 4;
/// Balancing pairs run at a short budget where both runs of a pair stay close.
const BALANCE_STEPS: usize = 300;
const BALANCE_LR: f64 = 0.5;
const REPRO_STEPS: usize = 100;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(tag: &str, i: u64) -> ChaCha8Rng {
    himoe::rng::stream(20_260_101, tag, i)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * r.random_range(-1.0..1.0)).collect()
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, uniform(r, rows * cols, scale)).unwrap()
}

fn random_router(r: &mut ChaCha8Rng, cfg: &MoEConfig, scale: f64) -> RouterParams {
    RouterParams {
        scene_w: random_matrix(r, cfg.n_scene_routes, cfg.d_scene, scale),
        scene_b: Vector(uniform(r, cfg.n_scene_routes, scale)),
        inst_w: random_matrix(r, cfg.n_experts, cfg.instance_input(), scale),
        inst_b: Vector(uniform(r, cfg.n_experts, scale)),
    }
}

fn random_experts(r: &mut ChaCha8Rng, cfg: &MoEConfig) -> Vec<ExpertParams> {
    let (d, h) = (cfg.d_model, cfg.hidden());
    (0..cfg.n_experts)
        .map(|id| ExpertParams {
            id,
            w1: random_matrix(r, h, d, 0.5),
            b1: Vector(uniform(r, h, 0.5)),
            w2: random_matrix(r, d, h, 0.5),
            b2: Vector(uniform(r, d, 0.5)),
        })
        .collect()
}

fn random_inputs(r: &mut ChaCha8Rng, cfg: &MoEConfig) -> (Matrix, Vec<Vector>) {
    let tokens = r.random_range(1..6);
    let n_q = r.random_range(1..5);
    let h = random_matrix(r, tokens, cfg.d_scene, 2.0);
    let qs = (0..n_q).map(|_| Vector(uniform(r, cfg.d_model, 2.0))).collect();
    (h, qs)
}

/// A random valid routing configuration; half of them use overlapping random route maps.
fn random_config(r: &mut ChaCha8Rng) -> MoEConfig {
    loop {
        let ne = r.random_range(1..=16);
        let ns = r.random_range(1..=4);
        let mut cfg = MoEConfig {
            n_experts: ne,
            top_k: r.random_range(1..=ne),
            n_scene_routes: ns,
            scene_top_k: r.random_range(1..=ns),
            d_model: r.random_range(1..=6),
            d_scene: r.random_range(1..=6),
            d_hidden: Some(r.random_range(1..=6)),
            tau_scene: r.random_range(0.2..3.0),
            tau_query: r.random_range(0.2..3.0),
            ..MoEConfig::default()
        };
        if r.random_bool(0.5) {
            let mut map: Vec<Vec<usize>> = (0..ns)
                .map(|_| (0..ne).filter(|_| r.random_bool(0.4)).collect())
                .collect();
            // every expert must stay reachable
            for k in 0..ne {
                if !map.iter().any(|m| m.contains(&k)) {
                    let route = r.random_range(0..ns);
                    map[route].push(k);
                    map[route].sort_unstable();
                }
            }
            cfg.route_to_experts = Some(map);
        }
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng("routing", 0);
    let mut records = 0;
    let mut bad = Vec::new();
    for case in 0..ROUTING_CASES {
        let cfg = random_config(&mut r);
        let router = random_router(&mut r, &cfg, 2.0);
        let experts = random_experts(&mut r, &cfg);
        let (h, qs) = random_inputs(&mut r, &cfg);
        let map = cfg.route_map();
        let (_, trace) = match himoe_forward(&h, &qs, &router, &experts, &cfg) {
            Ok(v) => v,
            Err(e) => {
                bad.push(format!("case {case}: {e}"));
                continue;
            }
        };
        for rec in trace.records() {
            records += 1;
            let sum: f64 = rec.weights.iter().sum();
            let mut union: Vec<usize> = rec.routes.iter().flat_map(|&s| map[s].clone()).collect();
            union.sort_unstable();
            union.dedup();
            let ok = (sum - 1.0).abs() <= SIMPLEX_TOL
                && rec.experts.len() == cfg.top_k
                && rec.routes.len() == cfg.scene_top_k
                && rec.pool == union
                && rec.experts.iter().all(|k| rec.pool.contains(k));
            if !ok {
                bad.push(format!("case {case}: {rec:?}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = bad.is_empty() && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "{ROUTING_CASES} configs, {records} assignments, {} violations, {:.2}s (limit 10s){}",
            bad.len(),
            elapsed.as_secs_f64(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|v| v / s).collect()
}

fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| b[i] + w.row(i).iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// Full softmax mixture over every expert, no selection.
fn dense_mixture(h: &Matrix, q: &[f64], router: &RouterParams, experts: &[ExpertParams], cfg: &MoEConfig) -> Vec<f64> {
    let mut pooled = vec![0.0; h.cols()];
    for i in 0..h.rows() {
        for (p, v) in pooled.iter_mut().zip(h.row(i)) {
            *p += v / h.rows() as f64;
        }
    }
    let g = softmax(&affine(&router.scene_w, &pooled, &router.scene_b.0), cfg.tau_scene);
    let input: Vec<f64> = q.iter().chain(&g).copied().collect();
    let e = softmax(&affine(&router.inst_w, &input, &router.inst_b.0), cfg.tau_query);
    let mut y = vec![0.0; q.len()];
    for (k, ex) in experts.iter().enumerate() {
        let hidden: Vec<f64> = affine(&ex.w1, q, &ex.b1.0).iter().map(|v| v.tanh()).collect();
        for (o, v) in y.iter_mut().zip(affine(&ex.w2, &hidden, &ex.b2.0)) {
            *o += e[k] * v;
        }
    }
    y
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng("dense", 0);
    let mut worst: f64 = 0.0;
    let mut errors = Vec::new();
    for case in 0..DENSE_CASES {
        let mut cfg = random_config(&mut r);
        cfg.route_to_experts = None;
        cfg.top_k = cfg.n_experts;
        cfg.scene_top_k = cfg.n_scene_routes;
        let router = random_router(&mut r, &cfg, 1.0);
        let experts = random_experts(&mut r, &cfg);
        let (h, qs) = random_inputs(&mut r, &cfg);
        match himoe_forward(&h, &qs, &router, &experts, &cfg) {
            Ok((ys, _)) => {
                for (q, y) in qs.iter().zip(&ys) {
                    let want = dense_mixture(&h, &q.0, &router, &experts, &cfg);
                    for (a, b) in y.0.iter().zip(&want) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            Err(e) => errors.push(format!("case {case}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let pass = errors.is_empty() && worst <= DENSE_TOL && elapsed < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "{DENSE_CASES} instances, max |diff| {worst:.3e} (tol {DENSE_TOL:e}), {} errors, {:.2}s (limit 5s)",
            errors.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = small_config();
    let shape_ok = cfg.moe.d_model == 4
        && cfg.moe.n_experts == 4
        && cfg.data.queries_per_scene * cfg.train.batch_size == 2
        && cfg.loss.lambda1 == 0.01
        && cfg.loss.lambda2 == 0.001;
    match check_gradients(&cfg, None) {
        Ok(rep) => {
            let worst = rep.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
            let elapsed = start.elapsed();
            outcome(
                shape_ok && rep.passed && worst <= GRAD_TOL && elapsed < Duration::from_secs(60),
                format!(
                    "{} blocks, max rel error {worst:.3e} (tol {GRAD_TOL:e}), failing {:?}, {:.2}s (limit 60s)",
                    rep.blocks.len(),
                    rep.failing(),
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, format!("gradient check failed to run: {e}")),
    }
}

fn criterion_4() -> Outcome {
    let balance = [
        (vec![0.25; 4], 0.0),
        (vec![1.0, 0.0, 0.0, 0.0], 0.75),
        (vec![0.75, 0.25], 0.125),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (f, want) in &balance {
        let got = balance_loss(f);
        pass &= (got - want).abs() <= 1e-15;
        notes.push(format!("{got}"));
    }
    let ln2 = std::f64::consts::LN_2;
    let disjoint = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    pass &= (disjoint - ln2).abs() <= 1e-12;
    let mut r = rng("jsd", 0);
    let mut worst_zero: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..10);
        let p = softmax(&uniform(&mut r, n, 5.0), 1.0);
        let q = softmax(&uniform(&mut r, n, 5.0), 1.0);
        let v = jsd(&p, &q).unwrap();
        pass &= (0.0..=ln2).contains(&v);
        worst_zero = worst_zero.max(jsd(&p, &p).unwrap().abs());
    }
    pass &= worst_zero <= JSD_ZERO_TOL;
    outcome(
        pass,
        format!(
            "balance [{}] want [0, 0.75, 0.125]; disjoint JSD {disjoint:.15} vs ln2; 1000 random pairs in [0, ln2]; max JSD(p,p) {worst_zero:e} (tol {JSD_ZERO_TOL:e})",
            notes.join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut vals = Vec::new();
        for l1 in [0.0, 0.01] {
            let mut c = RunConfig {
                data: SyntheticConfig::skewed(),
                ..RunConfig::default()
            };
            c.train.steps = BALANCE_STEPS;
            c.train.lr = BALANCE_LR;
            c.train.seed = seed;
            c.loss.lambda1 = l1;
            match train(&c, &mut |_| Ok(())) {
                Ok(out) => vals.push(balance_loss(&utilization(&out.trace).unwrap().f)),
                Err(e) => return outcome(false, format!("seed {seed}, lambda1 {l1}: {e}")),
            }
        }
        if vals[1] < vals[0] {
            wins += 1;
        }
        rows.push(format!("{seed}:{:.4}/{:.4}", vals[0], vals[1]));
    }
    let elapsed = start.elapsed();
    outcome(
        wins >= BALANCE_MIN_WINS && elapsed < Duration::from_secs(300),
        format!(
            "lambda1 0.01 lower in {wins}/{} pairs (need {BALANCE_MIN_WINS}); {}; {:.1}s (limit 300s)",
            SEEDS.len(),
            rows.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let policies = [VariantPolicy::Hierarchical, VariantPolicy::InstanceOnly, VariantPolicy::Dense];
    let mut medians = Vec::new();
    for p in policies {
        let mut losses = Vec::new();
        for seed in SEEDS {
            let mut c = RunConfig::default();
            c.train.policy = p;
            c.train.seed = seed;
            match train(&c, &mut |_| Ok(())) {
                Ok(out) => losses.push(out.eval_task_loss),
                Err(e) => return outcome(false, format!("{p} seed {seed}: {e}")),
            }
        }
        medians.push(median(&mut losses));
    }
    let elapsed = start.elapsed();
    let (hier, inst, dense) = (medians[0], medians[1], medians[2]);
    outcome(
        hier <= inst && hier <= dense && elapsed < Duration::from_secs(900),
        format!(
            "median eval task loss: hierarchical {hier:.4}, instance_only {inst:.4}, dense {dense:.4}; {:.1}s (limit 900s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut flops = Vec::new();
    let mut active = Vec::new();
    let mut latency = Vec::new();
    let run = RunConfig::default();
    for k in [1, 2, 4] {
        let cfg = MoEConfig { top_k: k, ..MoEConfig::default() };
        let cost = count_params_flops(VariantPolicy::Hierarchical, &cfg);
        flops.push(cost.flops_per_query);
        active.push(cost.active_params_per_query as i64);
        let measured = ModelParams::init(VariantPolicy::Hierarchical, &cfg, 1)
            .and_then(|params| {
                let world = TaskWorld::new(&run.data, &cfg, 1)?;
                measure_latency(&params, &world, run.train.batch_size, DEFAULT_WARMUP, DEFAULT_TIMED)
            });
        match measured {
            Ok(l) => latency.push(l),
            Err(e) => return outcome(false, format!("latency at K={k}: {e}")),
        }
    }
    let increasing = flops.windows(2).all(|w| w[0] < w[1]);
    // K = 1, 2, 4: the step from 2 to 4 is twice the step from 1 to 2
    let affine = active[2] - active[1] == 2 * (active[1] - active[0]) && active[1] > active[0];
    let timed = latency
        .iter()
        .all(|l| l.samples == DEFAULT_TIMED && l.median_s > 0.0 && l.iqr_s >= 0.0 && l.iqr_s.is_finite());
    let lat: Vec<String> = latency
        .iter()
        .map(|l| format!("{:.1}us (IQR {:.1}us)", 1e6 * l.median_s, 1e6 * l.iqr_s))
        .collect();
    outcome(
        increasing && affine && timed,
        format!(
            "flops/query {flops:?}; active params {active:?}; measured batch latency over {DEFAULT_TIMED} batches after {DEFAULT_WARMUP} warmup: {}",
            lat.join(", ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let labels: Vec<String> = ["indoor", "outdoor", "crowd", "generalist"].iter().map(|s| s.to_string()).collect();
    // every route owns every expert, so each assignment is credited to its batch's top route
    let map = vec![vec![0, 1, 2]; 4];
    // per expert: assignments under each top route (indoor, outdoor, crowd, generalist)
    let plan: [[u64; 4]; 3] = [[30, 25, 45, 0], [32, 31, 20, 17], [20, 51, 0, 29]];
    let mut trace = RoutingTrace::new(3);
    let mut batch = 0;
    for (expert, counts) in plan.iter().enumerate() {
        for (route, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mut g = vec![0.1; 4];
                g[route] = 0.7;
                let other = (route + 1) % 4;
                trace
                    .push(TraceRecord {
                        batch,
                        query: 0,
                        routes: vec![route, other],
                        pool: vec![0, 1, 2],
                        experts: vec![expert],
                        weights: vec![1.0],
                        e_full: vec![1.0 / 3.0; 3],
                        g,
                        scene: None,
                        itype: None,
                        loss: None,
                    })
                    .unwrap();
                batch += 1;
            }
        }
    }
    let want = [("crowd", 0.45), ("indoor", 0.32), ("outdoor", 0.51)];
    let profiles = route_profile(&trace, &labels, &map, Attribution::default()).unwrap();
    let mut pass = true;
    let mut got = Vec::new();
    for (p, (label, share)) in profiles.iter().zip(want) {
        pass &= p.dominant_label.as_deref() == Some(label) && p.dominant_share == Some(share);
        pass &= p.counts.iter().sum::<u64>() == p.total;
        got.push(format!("{}={}", p.dominant_label.clone().unwrap_or_default(), p.dominant_share.unwrap_or(f64::NAN)));
    }
    let cross: f64 = profiles.iter().filter_map(|p| p.dominant_share).sum();
    let report: DiagnosticsReport =
        himoe::diagnostics::diagnose(&trace, &labels, &map, &[], Attribution::default()).unwrap();
    pass &= report.share_normalization == SHARE_NORMALIZATION && report.profiles.as_ref() == Some(&profiles);
    let json = serde_json::to_value(&report).unwrap();
    let keys: Vec<String> = json.as_object().unwrap().keys().cloned().collect();
    pass &= !keys.iter().any(|k| k.contains("sum") || k.contains("total_share"));
    outcome(
        pass,
        format!(
            "shares {} (want crowd=0.45 indoor=0.32 outdoor=0.51); normalization {}; shares add to {cross:.2}, no cross-expert total reported",
            got.join(" "),
            report.share_normalization
        ),
    )
}

fn run_from_manifest(path: &std::path::Path) -> himoe::Result<(Vec<u8>, String)> {
    let cfg = RunConfig::resolve(Some(path), &[], None)?;
    let mut log = MetricLog::new(Vec::new())?;
    let out = train(&cfg, &mut |r| log.append(r))?;
    Ok((log.into_inner()?, out.trace.to_jsonl_string()))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.steps = REPRO_STEPS;
    let path = dir.path().join("manifest.json");
    RunManifest::new("train", &cfg, &[]).save(&path).unwrap();
    let copy = dir.path().join("copy.json");
    fs::copy(&path, &copy).unwrap();
    match (run_from_manifest(&path), run_from_manifest(&copy)) {
        (Ok(a), Ok(b)) => outcome(
            a == b && !a.0.is_empty() && !a.1.is_empty(),
            format!(
                "{REPRO_STEPS}-step runs: metrics CSV {} bytes identical={}, trace {} bytes identical={}",
                a.0.len(),
                a.0 == b.0,
                a.1.len(),
                a.1 == b.1
            ),
        ),
        (a, b) => outcome(false, format!("run failed: {:?} / {:?}", a.err(), b.err())),
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("routing correctness", criterion_1),
        ("dense-equivalence oracle", criterion_2),
        ("gradient oracle", criterion_3),
        ("loss-value oracles", criterion_4),
        ("balancing efficacy", criterion_5),
        ("variant ordering", criterion_6),
        ("compute trend", criterion_7),
        ("diagnostics fidelity", criterion_8),
        ("reproducibility", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {n} [{name}]: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
