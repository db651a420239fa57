//! The book from `book/`, embedded chapter by chapter.
//!
//! mdbook renders `book/src/*.md` for reading; including the same files
//! here as module documentation makes `cargo test --doc` compile and run
//! every code block in the book, so the guide cannot drift away from the
//! crate. One module per chapter keeps doctest failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-tape.md")]
pub mod tensors_and_tape {}

#[doc = include_str!("../../../book/src/weight-standardization.md")]
pub mod weight_standardization {}

#[doc = include_str!("../../../book/src/normalizer-family.md")]
pub mod normalizer_family {}

#[doc = include_str!("../../../book/src/microbatch-estimates.md")]
pub mod microbatch_estimates {}

#[doc = include_str!("../../../book/src/smoothness-diagnostics.md")]
pub mod smoothness_diagnostics {}

#[doc = include_str!("../../../book/src/training-and-experiments.md")]
pub mod training_and_experiments {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
