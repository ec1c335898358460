//! Tile-based front-to-back splatting, a brute-force reference blend and the
//! analytic reverse pass.

mod assemble;
mod backward;
mod forward;
pub mod gradcheck;

pub use assemble::{assemble_world_set, IncludeFilter, Origin, WorldSet};
pub use backward::{
    render_backward, render_backward_from_state, DensifyStats, ObjectGradients, PointStat,
    SceneGradients, SetGradients, UpstreamGrads,
};
pub use forward::{
    render, render_decomposed, render_reference, render_with_state, DecomposeTarget, ForwardState,
    RenderConfig, RenderOutputs, RenderStats,
};
