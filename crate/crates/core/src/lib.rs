//! Reward-weighted regression post-training for unified text-to-image
//! generators, with a desk-scale toy model that runs the whole loop on a CPU.

pub mod analytics;
pub mod corpus;
pub mod curation;
pub mod experiment;
pub mod model;
pub mod reward;
pub mod rwr;
pub mod toy;
pub mod trainer;
