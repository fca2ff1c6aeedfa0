//! Brute-force references for checking `adaplan-core`: exact plan
//! probabilities, exhaustive constrained plan search, finite-difference
//! gradients, weight-surgery equivalence and a loop-based reference
//! transformer.

pub mod checks;
pub mod enumeration;
pub mod exhaustive;
pub mod gradient;
pub mod reference;
pub mod surgery;

pub use checks::{run_check, CheckOptions, CheckResult, CHECK_NAMES};
pub use enumeration::{enumerate_plans, exact_set_probability, PlanEnumeration};
pub use exhaustive::{exhaustive_best_plan, feasible_plan_nlls};
pub use gradient::{finite_difference_gradient, gradient_check, GradientReport};
pub use reference::ReferenceModel;
pub use surgery::parameter_surgery_check;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("enumeration bound exceeded: {got} {what}, at most {max} supported")]
    Bound { what: &'static str, got: usize, max: usize },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] adaplan_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
