//! Code samples from the user guide in `book/`, compiled and run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/estimator.md")]
pub mod estimator {}

#[doc = include_str!("../../../book/src/predictors.md")]
pub mod predictors {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}
