//! Geometric back-end for aligning object-level maps built by independent
//! agents: triangulation of object tracks, submap generation, consistency
//! clique association and rigid alignment, plus evaluation and a simulator.

pub mod alignment;
pub mod association;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod simulation;
pub mod submap;
pub mod triangulation;

pub use alignment::{align_maps, arun, match_maps, AlignmentHypothesis, MatchRun};
pub use association::{build_affinity, consistency_score, densest_clique, AffinityMatrix, Association};
pub use error::{Error, Result};
pub use model::{
    CameraIntrinsics, Detection, Hyperparameters, Landmark, ObjectMap, Pose, RigidTransform, Track,
};
pub use submap::{generate_submaps, mahalanobis_filter, Submap};
pub use triangulation::{build_map, BuildReport};

pub use nalgebra;
