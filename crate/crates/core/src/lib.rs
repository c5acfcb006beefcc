pub mod aggregate;
pub mod benchmark;
pub mod engine;
pub mod gateway;
pub mod judge;
pub mod params;
pub mod perfics;
pub mod profile;
pub mod prompts;
pub mod store;
pub mod config;
pub mod report;
pub mod golden;
pub mod pipeline;
pub mod verify;
