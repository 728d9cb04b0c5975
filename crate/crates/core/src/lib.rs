pub mod checks;
pub mod diffusion;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
