//! Bayesian stratified-sampling estimates of subjective proportions in text
//! corpora.

pub mod allocation;
pub mod campaign;
pub mod combine;
pub mod corpus;
pub mod density;
pub mod numeric;
pub mod sampler;
pub mod stratify;
