pub mod tensor;
pub mod config;
pub mod env;
pub mod model;
pub mod mcts;
pub mod replay;
pub mod reanalyze;
pub mod trainer;
pub mod pipeline;
pub mod cli;
