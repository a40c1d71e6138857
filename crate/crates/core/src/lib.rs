pub mod data;
pub mod evaluation;
pub mod formulation;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;
