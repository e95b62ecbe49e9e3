//! Runtime planners: Dynamic-CP packing, ECHO hot-expert cloning and the
//! paged activation stash, plus packed-sequence helpers.

pub mod dynamic_cp;
pub mod echo;
pub mod packing;
pub mod stash;

pub use dynamic_cp::{dynamic_cp_plan, rank_time, Bin, DynamicCpRequest, PackedBatch, SweepPoint};
pub use echo::{
    echo_grad_reduce, echo_plan, echo_rewrite, expert_grads, CloneAssignment, EchoPlan,
    EchoRequest, ExpertGrad,
};
pub use packing::{attention_cost, per_token_loss, serpentine_order, total_variation};
pub use stash::{stash_footprint, PageRecord, PagedStash, StashFootprint, DEFAULT_PAGE_TOKENS};
