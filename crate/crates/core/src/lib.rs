pub mod error;
pub mod grf;
pub mod micro;
pub mod property;
pub mod seed;
pub mod gan;
pub mod mdn;
pub mod baselines;
pub mod methods;
pub mod eval;
pub mod config;
pub mod pipeline;
