//! Stitching and obstacle-avoidance benchmarks, training diagnostics and
//! their CSV/SVG reports.

mod avoid;
pub mod report;
mod stitch;

pub use avoid::{
    avoid_plans, avoid_sweep, bend_holds, bend_profile, consistency_probe, mode_collapse_probe,
    score_trial, AvoidResult, AvoidTask, AvoidTrial, BendProfile, Consistency, RELIABLE_RATE,
};
pub use stitch::{
    augmentation_benchmark, max_jump, same_side_batch, same_side_pairs, stitch_errors,
    stitching_benchmark, StitchResult,
};
