pub mod asha;
pub mod configspace;
pub mod error;
pub mod fairmetrics;
pub mod objectives;
pub mod orchestrator;
pub mod paretostats;
pub mod runner;
pub mod scalarize;
pub mod store;
pub mod surrogate;
