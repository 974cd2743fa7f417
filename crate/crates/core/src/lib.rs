pub mod analysis;
pub mod config;
pub mod corpus;
pub mod dedup;
pub mod embedding;
pub mod evolve;
pub mod gateway;
pub mod knn;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod projection;
pub mod prompts;
pub mod sandbox;
pub mod pytokens;
pub mod topics;
pub mod verify;
