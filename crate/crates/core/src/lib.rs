pub mod baselines;
pub mod coordinator;
pub mod ddqn;
pub mod environment;
pub mod harness;
pub mod nn;
pub mod perf;
pub mod queueing;
pub mod replay;
pub mod stats;
pub mod td3;
