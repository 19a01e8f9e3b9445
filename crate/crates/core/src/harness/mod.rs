//! Experiment runner and loan evaluation pipeline.

pub mod experiment;
pub mod loan;

pub use experiment::{run_experiment, ExperimentConfig, Method, ResultRow, Scenario};
pub use loan::{compute_price, evaluate_on_demand, expected_revenue, fit_demand, partial_dependence, DemandModel, LoanData, LoanRecord};
