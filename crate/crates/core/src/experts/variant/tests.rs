use super::*;
use crate::experts::expert_forward;
use crate::numerics::softmax_temp;
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn cfg() -> MoEConfig {
    MoEConfig {
        n_experts: 8,
        top_k: 2,
        n_scene_routes: 4,
        scene_top_k: 2,
        d_model: 4,
        d_scene: 3,
        ..MoEConfig::default()
    }
}

/// Initialized parameters with routers scaled up so routing is far from uniform.
fn params(policy: VariantPolicy, cfg: &MoEConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(policy, cfg, seed).unwrap();
    let mut r = rng::stream(seed, "test.router", 0);
    let ids: Vec<_> = p
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.name.starts_with("router."))
        .map(|(i, _)| i)
        .collect();
    for i in ids {
        for v in &mut p.tensor_mut(crate::numerics::ParamId(i)).data {
            *v = r.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

fn scene(cfg: &MoEConfig, seed: u64, n_queries: usize) -> (Matrix, Vec<Vector>) {
    let mut r = rng::stream(seed, "test.scene", 0);
    let h = Matrix::from_vec(5, cfg.d_scene, (0..5 * cfg.d_scene).map(|_| r.sample(StandardNormal)).collect()).unwrap();
    let qs = (0..n_queries)
        .map(|_| Vector((0..cfg.d_model).map(|_| r.sample(StandardNormal)).collect()))
        .collect();
    (h, qs)
}

fn run(policy: VariantPolicy, p: &ModelParams, h: &Matrix, qs: &[Vector]) -> (Vec<Vector>, RoutingTrace) {
    variant_forward(policy, SceneInput { features: h, queries: qs }, p, p.cfg()).unwrap()
}

#[test]
fn dense_is_the_single_ffn() {
    let c = cfg();
    let p = params(VariantPolicy::Dense, &c, 1);
    let (h, qs) = scene(&c, 1, 4);
    let (ys, trace) = run(VariantPolicy::Dense, &p, &h, &qs);
    let ffn = p.dense().unwrap();
    for (y, q) in ys.iter().zip(&qs) {
        assert_eq!(y, &expert_forward(&ffn, q).unwrap());
    }
    assert!(trace.is_empty());
}

#[test]
fn instance_only_with_full_k_is_the_dense_mixture() {
    let c = MoEConfig { top_k: 8, scene_top_k: 4, ..cfg() };
    let p = params(VariantPolicy::InstanceOnly, &c, 2);
    let (h, qs) = scene(&c, 2, 5);
    let (ys, _) = run(VariantPolicy::InstanceOnly, &p, &h, &qs);
    let w = p.tensor(p.find("router.instance.w").unwrap());
    let b = p.tensor(p.find("router.instance.b").unwrap());
    let experts = p.experts();
    for (y, q) in ys.iter().zip(&qs) {
        let mut input = q.0.clone();
        input.extend(vec![0.0; c.n_scene_routes]);
        let logits: Vec<f64> = (0..c.n_experts)
            .map(|k| w.data[k * w.cols..(k + 1) * w.cols].iter().zip(&input).map(|(a, x)| a * x).sum::<f64>() + b.data[k])
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut oracle = vec![0.0; c.d_model];
        for (k, e) in experts.iter().enumerate() {
            let out = expert_forward(e, q).unwrap();
            for (o, v) in oracle.iter_mut().zip(&out.0) {
                *o += logits[k].exp() / z * v;
            }
        }
        for (a, b) in y.0.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn scene_only_shares_one_group_weighting() {
    let c = MoEConfig { scene_top_k: 1, ..cfg() };
    let mut p = params(VariantPolicy::SceneOnly, &c, 3);
    // hand-set g favouring route 2: zero weights, logits from biases
    let w = p.find("router.scene.w").unwrap();
    p.tensor_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
    let b = p.find("router.scene.b").unwrap();
    p.tensor_mut(b).data = [0.1f64, 0.2, 0.6, 0.1].iter().map(|v| v.ln()).collect();
    let (h, qs) = scene(&c, 3, 4);
    let (ys, trace) = run(VariantPolicy::SceneOnly, &p, &h, &qs);
    let first = &trace.records()[0];
    assert_eq!(first.experts, vec![4, 5]);
    for w in &first.weights {
        assert!((w - 0.5).abs() < 1e-12);
    }
    assert!(trace.records().iter().all(|r| r.weights == first.weights && r.experts == first.experts));
    let experts = p.experts();
    for (y, q) in ys.iter().zip(&qs) {
        let a = expert_forward(&experts[4], q).unwrap();
        let b = expert_forward(&experts[5], q).unwrap();
        for i in 0..c.d_model {
            assert!((y.0[i] - 0.5 * (a.0[i] + b.0[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn scene_only_projection_follows_g() {
    let c = cfg();
    let p = params(VariantPolicy::SceneOnly, &c, 4);
    let (h, qs) = scene(&c, 4, 2);
    let (_, trace) = run(VariantPolicy::SceneOnly, &p, &h, &qs);
    let rec = &trace.records()[0];
    let g = &rec.g;
    let mass: f64 = rec.routes.iter().map(|&r| g[r]).sum();
    for (k, w) in rec.experts.iter().zip(&rec.weights) {
        let route = k / 2;
        assert!((w - g[route] / 2.0 / mass).abs() < 1e-12);
    }
}

#[test]
fn hierarchical_equals_instance_only_without_scene_signal() {
    let c = MoEConfig { scene_top_k: 4, ..cfg() };
    let mut hier = params(VariantPolicy::Hierarchical, &c, 5);
    let inst = params(VariantPolicy::InstanceOnly, &c, 5);
    for name in ["router.instance.w", "router.instance.b"] {
        let src = inst.tensor(inst.find(name).unwrap()).data.clone();
        let id = hier.find(name).unwrap();
        hier.tensor_mut(id).data = src;
    }
    let w = hier.find("router.instance.w").unwrap();
    let t = hier.tensor_mut(w);
    for row in 0..t.rows {
        for col in c.d_model..t.cols {
            t.data[row * t.cols + col] = 0.0;
        }
    }
    let (h, qs) = scene(&c, 5, 6);
    let (a, _) = run(VariantPolicy::Hierarchical, &hier, &h, &qs);
    // instance_only sees the same instance weights with the g columns zeroed
    let mut inst2 = inst.clone();
    let w = inst2.find("router.instance.w").unwrap();
    let t = inst2.tensor_mut(w);
    for row in 0..t.rows {
        for col in c.d_model..t.cols {
            t.data[row * t.cols + col] = 0.0;
        }
    }
    let (b, _) = run(VariantPolicy::InstanceOnly, &inst2, &h, &qs);
    for (x, y) in a.iter().zip(&b) {
        for (u, v) in x.0.iter().zip(&y.0) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn token_moe_routes_tokens_and_queries_share_selection() {
    let c = cfg();
    let p = params(VariantPolicy::TokenMoe, &c, 6);
    let (h, qs) = scene(&c, 6, 3);
    let (ys, trace) = run(VariantPolicy::TokenMoe, &p, &h, &qs);
    assert_eq!(trace.len(), h.rows());
    assert_eq!(ys.len(), qs.len());
    for rec in trace.records() {
        assert_eq!(rec.experts.len(), c.top_k);
        assert_eq!(rec.pool.len(), c.n_experts);
        let e = softmax_temp(&Vector(rec.e_full.clone()), 1.0).unwrap();
        assert_eq!(e.len(), c.n_experts);
    }
}

#[test]
fn active_experts_never_exceed_budget() {
    let c = cfg();
    for policy in VariantPolicy::ALL.into_iter().filter(|p| p.is_routed()) {
        let p = params(policy, &c, 7);
        let (h, qs) = scene(&c, 7, 4);
        let (_, trace) = run(policy, &p, &h, &qs);
        for rec in trace.records() {
            let bound = if policy == VariantPolicy::SceneOnly { rec.pool.len() } else { c.top_k };
            assert!(rec.experts.len() <= bound);
        }
    }
}

#[test]
fn variants_are_pure() {
    let c = cfg();
    for policy in VariantPolicy::ALL {
        let p = params(policy, &c, 8);
        let (h, qs) = scene(&c, 8, 3);
        let (a, ta) = run(policy, &p, &h, &qs);
        let (b, tb) = run(policy, &p, &h, &qs);
        assert_eq!(a, b);
        assert_eq!(ta.to_jsonl_string(), tb.to_jsonl_string());
    }
}

#[test]
fn mismatched_policy_or_config_is_rejected() {
    let c = cfg();
    let p = params(VariantPolicy::Hierarchical, &c, 9);
    let (h, qs) = scene(&c, 9, 2);
    let input = SceneInput { features: &h, queries: &qs };
    let err = variant_forward(VariantPolicy::Dense, input, &p, &c).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let bad = MoEConfig { top_k: 9, ..c.clone() };
    assert!(matches!(variant_forward(VariantPolicy::Hierarchical, input, &p, &bad), Err(Error::Config(_))));
    assert_eq!("scene_only".parse::<VariantPolicy>().unwrap(), VariantPolicy::SceneOnly);
    assert!("moe".parse::<VariantPolicy>().is_err());
}
