pub mod corpus;
pub mod coverage;
pub mod dialect;
pub mod exec;
pub mod llm;
pub mod pipeline;
pub mod promptkit;
pub mod telemetry;
