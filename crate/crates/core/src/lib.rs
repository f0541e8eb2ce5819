//! Core of the parking workbench: geometry, vehicle kinematics, the parking
//! environment with its reward, the correction-aware replay notebook, the
//! episode scheduler and the soft actor-critic learner.

pub mod env;
pub mod geometry;
pub mod learner;
pub mod replay;
pub mod scheduler;
pub mod vehicle;
