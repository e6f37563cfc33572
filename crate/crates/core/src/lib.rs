//! Meta Bayesian optimization with a Gaussian-process prior learned from
//! related tuning tasks.
//!
//! The workflow has two stages. First, [`training::train_gp`] fits a mean
//! function, kernel and noise level to many related tasks at once, either by
//! multi-task marginal likelihood or by matching the sample moments of inputs
//! that every task evaluated. Second, the fitted prior is frozen and used by
//! an ordinary BO loop ([`bo`]) on a new task.
//!
//! See the book under `book/` for a narrative walk-through.

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod bo;
pub mod dataset;
pub mod error;
pub mod gp;
pub mod objectives;
pub mod qmc;
pub mod report;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/gp.md")]
    mod gp {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/bo.md")]
    mod bo {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
