pub mod classify;
pub mod features;
pub mod gen_synth;
pub mod metrics;
pub mod train;
