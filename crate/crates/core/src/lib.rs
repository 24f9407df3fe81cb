//! Density-constrained reinforcement learning.
//!
//! Training enforces pointwise bounds on the discounted state-visitation
//! density by alternating between an inner policy optimizer on a
//! multiplier-adjusted reward and a projected dual-ascent step on the
//! multiplier fields. The crate also ships an exact occupancy-measure
//! linear program used as ground truth on small discrete problems, plus
//! the desk-scale benchmark environments the loop is exercised on.

pub mod dcrl;
pub mod density;
pub mod dual;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod mdp;
pub mod oracle;
pub mod seeding;
pub mod solvers;

pub use error::DcrlError;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, DcrlError>;
