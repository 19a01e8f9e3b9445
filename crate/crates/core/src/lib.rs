//! Personalized pricing from confounded offline data with an invalid
//! instrumental variable.
//!
//! The crate is organised around the estimation pipeline:
//!
//! * [`scm`] simulates confounded pricing data, evaluates the analytic oracle
//!   policy and scores learned policies by regret. It also hosts
//!   [`scm::DiscreteScm`], a finite-support structural model used as an exact
//!   enumeration oracle.
//! * [`moments`] holds the generalized residual `W(Z; α)`, the Ω/Υ moment
//!   systems and the closed-form identification of the quadratic revenue
//!   coefficients.
//! * [`features`] provides random Fourier feature maps and the feature-linear
//!   function classes used for both the learner and the adversary.
//! * [`minimax`] is the penalized adversarial estimator.
//! * [`policy`] turns fitted coefficients into clipped pricing policies.
//! * [`baselines`] contains the regression and kernel inverse-propensity
//!   comparison methods.
//! * [`harness`] runs Monte Carlo experiments and the loan evaluation pipeline.

pub mod baselines;
pub mod error;
pub mod features;
pub mod harness;
pub mod linalg;
pub mod minimax;
pub mod moments;
pub mod policy;
pub mod rng;
pub mod scm;

pub use error::{Error, Result};
pub use features::{FeatureMap, ScalarFunction, VectorAdversary};
pub use minimax::{FitResult, MinimaxConfig};
pub use moments::{AlphaPoint, MomentSystem, NuisanceAlpha, ResidualVector};
pub use policy::{Pricing, PricingPolicy};
pub use scm::{Dataset, DiscreteScm, Sample, SimParams};
