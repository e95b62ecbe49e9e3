//! Reference MoE layer numerics in f64.

pub mod check;
pub mod experts;
pub mod router;

pub use check::{run_checks, CheckResult, MoeCheckReport};
pub use experts::{
    combine_mem_efficient, combine_standard, expert_outputs, latent_compression,
    latent_moe_forward, moe_forward, permute, unpermute, upcycle, Activation, DenseMlp, Expert,
    ExpertParams, Permutation, Upcycled,
};
pub use router::{
    apply_capacity, aux_loss, aux_loss_grad, auxfree_bias_update, capacity, route, route_with,
    routing_map_pad, RouteOptions, RoutingDecision, ScoreFn,
};
