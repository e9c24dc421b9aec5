pub mod baselines;
pub mod cleaner;
pub mod codec;
pub mod erda;
pub mod fabric;
pub mod harness;
pub mod index;
pub mod nvm;
pub mod sim;
pub mod wire;
pub mod workload;
