//! Mid-level feature fusers and score-level fusion baselines.

mod fuser;
mod projection;
mod score;

pub use fuser::{Fuser, FuserConfig, FuserKind};
pub use projection::{Projection, ProjectionPolicy};
pub use score::{
    average_fuse, grid_search_weights, simplex_grid, weighted_fuse, MattHead, ScoreStrategy, MATT_HIDDEN,
};
