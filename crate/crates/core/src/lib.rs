//! Differentiable inter-agent communication with interchangeable
//! discretization units.

pub mod checkpoint;
pub mod discretize;
pub mod envs;
pub mod gradcore;
pub mod nets;
pub mod run;
pub mod trainer;
