//! Hybrid mixture-of-experts.
//!
//! A [`DkghBlock`] replaces one residual block of a backbone with two expert
//! branches that share the block's input but route differently:
//!
//! - the data-driven branch routes on `x_f`, the globally pooled input feature;
//! - the domain-expert branch routes on `x_exp`, a feature encoded from a
//!   clinician gaze heatmap.
//!
//! Each branch picks its top-k experts per sample, weights them by a softmax
//! over the selected raw scores and sums the expert outputs. A sigmoid gate
//! conditioned on `[x_f ‖ x_exp]` blends the two branches:
//! `x̂ = p·h_de + (1 − p)·h_dd`.

mod block;
mod branch;
mod gate;
mod record;
mod router;
mod stats;

pub use block::{BlockOutput, DkghBlock};
pub use branch::{BranchOutput, ExpertBank, MoeBranch};
pub use gate::FusionGate;
pub use record::{BranchKind, RoutingRecord};
pub use router::{route, select_top_k, Router, Routing, Selection};
pub use stats::{batch_routing_stats, mean_routing_probability, top1_frequency, RoutingStats};
