//! Closed-form parameter and FLOP accounting.
//!
//! A linear map `m x n` costs `2 m n` FLOPs (one multiply-add is two FLOPs,
//! the bias add is folded in). Elementwise work costs one FLOP per entry:
//! activation `h`, softmax `3 n`, pool mask `n`, top-k selection `n k`,
//! renormalization `2 k`, and weighted aggregation `2 k d`.
//!
//! Per-scene work (the scene router) is reported separately from per-query
//! work. For `token_moe` the routed input is a feature token; its routing cost
//! is charged once per query.

use serde::{Deserialize, Serialize};

use super::VariantPolicy;
use crate::routing::MoEConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCost {
    pub total_params: usize,
    pub expert_params: usize,
    pub router_params: usize,
    pub active_params_per_query: usize,
    pub flops_per_query: usize,
    pub scene_flops_per_image: usize,
}

fn linear_flops(m: usize, n: usize) -> usize {
    2 * m * n
}

pub fn per_expert_params(cfg: &MoEConfig) -> usize {
    let (d, h) = (cfg.d_model, cfg.hidden());
    2 * d * h + d + h
}

pub fn per_expert_flops(cfg: &MoEConfig) -> usize {
    let (d, h) = (cfg.d_model, cfg.hidden());
    linear_flops(h, d) + h + linear_flops(d, h)
}

/// Largest expert union reachable from any choice of `scene_top_k` routes.
fn largest_pool(cfg: &MoEConfig) -> usize {
    let map = cfg.route_map();
    let n = map.len();
    let k = cfg.scene_top_k.min(n);
    let mut best = 0;
    // bitmask enumeration; n_scene_routes is small
    for mask in 0u64..(1u64 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let mut member = vec![false; cfg.n_experts];
        for (r, experts) in map.iter().enumerate() {
            if mask & (1 << r) != 0 {
                for &e in experts {
                    member[e] = true;
                }
            }
        }
        best = best.max(member.iter().filter(|m| **m).count());
    }
    best
}

pub fn count_params_flops(policy: VariantPolicy, cfg: &MoEConfig) -> ComputeCost {
    let (ne, ns, k, d, dg) = (cfg.n_experts, cfg.n_scene_routes, cfg.top_k, cfg.d_model, cfg.d_scene);
    let pe = per_expert_params(cfg);
    let fe = per_expert_flops(cfg);
    let scene_router_params = ns * dg + ns;
    let instance_router_params = ne * cfg.instance_input() + ne;
    let token_router_params = ne * dg + ne;
    let scene_flops = linear_flops(ns, dg) + 3 * ns + ns * cfg.scene_top_k;
    let select = |n: usize, k: usize| n * k + 2 * k;
    let mix = |k: usize| k * fe + 2 * k * d;

    match policy {
        VariantPolicy::Dense => ComputeCost {
            total_params: pe,
            expert_params: pe,
            router_params: 0,
            active_params_per_query: pe,
            flops_per_query: fe,
            scene_flops_per_image: 0,
        },
        VariantPolicy::Hierarchical => ComputeCost {
            total_params: ne * pe + scene_router_params + instance_router_params,
            expert_params: ne * pe,
            router_params: scene_router_params + instance_router_params,
            active_params_per_query: k * pe + scene_router_params + instance_router_params,
            flops_per_query: linear_flops(ne, cfg.instance_input()) + 3 * ne + ne + select(ne, k) + mix(k),
            scene_flops_per_image: scene_flops,
        },
        VariantPolicy::InstanceOnly => ComputeCost {
            total_params: ne * pe + instance_router_params,
            expert_params: ne * pe,
            router_params: instance_router_params,
            active_params_per_query: k * pe + instance_router_params,
            flops_per_query: linear_flops(ne, cfg.instance_input()) + 3 * ne + select(ne, k) + mix(k),
            scene_flops_per_image: 0,
        },
        VariantPolicy::TokenMoe => ComputeCost {
            total_params: ne * pe + token_router_params,
            expert_params: ne * pe,
            router_params: token_router_params,
            active_params_per_query: k * pe + token_router_params,
            flops_per_query: linear_flops(ne, dg) + 3 * ne + select(ne, k) + mix(k),
            scene_flops_per_image: select(ne, k),
        },
        VariantPolicy::SceneOnly => {
            let pool = largest_pool(cfg);
            ComputeCost {
                total_params: ne * pe + scene_router_params,
                expert_params: ne * pe,
                router_params: scene_router_params,
                active_params_per_query: pool * pe + scene_router_params,
                flops_per_query: mix(pool),
                scene_flops_per_image: scene_flops + linear_flops(ne, ns) + 2 * ne,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ModelParams;

    fn cfg(d: usize, h: usize, ne: usize) -> MoEConfig {
        MoEConfig {
            n_experts: ne,
            d_model: d,
            d_hidden: Some(h),
            ..MoEConfig::default()
        }
    }

    #[test]
    fn closed_form_expert_count() {
        let c = cfg(8, 16, 4);
        assert_eq!(per_expert_params(&c), 280);
        let cost = count_params_flops(VariantPolicy::Hierarchical, &c);
        assert_eq!(cost.expert_params, 1120);
    }

    #[test]
    fn totals_match_enumerated_tensors() {
        for ne in [4, 8, 12] {
            let c = cfg(8, 16, ne);
            for policy in VariantPolicy::ALL {
                let p = ModelParams::init(policy, &c, 0).unwrap();
                let cost = count_params_flops(policy, &c);
                assert_eq!(cost.total_params, p.n_params(), "{policy} ne={ne}");
                let expert_sum: usize = if policy == VariantPolicy::Dense {
                    p.dense().unwrap().n_params()
                } else {
                    p.experts().iter().map(|e| e.n_params()).sum()
                };
                assert_eq!(cost.expert_params, expert_sum);
            }
        }
    }

    #[test]
    fn active_flops_increase_with_k_and_params_are_affine() {
        let mut c = cfg(16, 32, 8);
        let mut prev = 0;
        let mut actives = Vec::new();
        for k in 1..=8 {
            c.top_k = k;
            let cost = count_params_flops(VariantPolicy::Hierarchical, &c);
            assert!(cost.flops_per_query > prev);
            prev = cost.flops_per_query;
            actives.push(cost.active_params_per_query as i64);
        }
        let step = actives[1] - actives[0];
        assert_eq!(step, per_expert_params(&c) as i64);
        assert!(actives.windows(2).all(|w| w[1] - w[0] == step));
    }

    #[test]
    fn doubling_experts_leaves_active_params_to_router() {
        let a = count_params_flops(VariantPolicy::Hierarchical, &cfg(8, 16, 4));
        let b = count_params_flops(VariantPolicy::Hierarchical, &cfg(8, 16, 8));
        let c = count_params_flops(VariantPolicy::Hierarchical, &cfg(8, 16, 16));
        assert_eq!(b.expert_params, 2 * a.expert_params);
        // total affine in N_e: equal second differences over 4, 8, 16 scaled
        assert_eq!((c.total_params - b.total_params), 2 * (b.total_params - a.total_params));
        // instance router grows by (d + N_s + 1) per added expert; experts do not
        let router_growth = 4 * (8 + 4 + 1);
        assert_eq!(b.active_params_per_query - a.active_params_per_query, router_growth);
    }

    #[test]
    fn dense_is_smallest() {
        let c = MoEConfig::default();
        let dense = count_params_flops(VariantPolicy::Dense, &c).total_params;
        for p in VariantPolicy::ALL.into_iter().filter(|p| p.is_routed()) {
            assert!(count_params_flops(p, &c).total_params > dense);
        }
    }
}
