pub mod allocation;
pub mod config;
pub mod controllers;
pub mod dynamics;
pub mod ekf;
pub mod experiment;
pub mod metrics;
pub mod nmpc;
pub mod residual;
pub mod sim;
pub mod so3;
pub mod trajectories;
