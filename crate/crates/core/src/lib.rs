pub mod checkpoint;
pub mod corpus;
pub mod entailment;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod joins;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod relevance;
pub mod tensor;
pub mod training;
