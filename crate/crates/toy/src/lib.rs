pub mod experiments;
pub mod gradcheck;
pub mod policy;
pub mod rollout;
pub mod scene;
pub mod train;
