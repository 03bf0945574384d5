pub mod distributions;
pub mod dyadic_tree;
pub mod error;
pub mod mcmc;
pub mod problems;
pub mod quadrature;
pub mod refinement;
pub mod rng;
pub mod splitting;
pub mod runner;
