pub mod backend;
pub mod catalog;
pub mod orchestrator;
pub mod store;
pub mod workflow;
pub mod optimizer;
pub mod project;
