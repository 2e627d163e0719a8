//! mdbook cannot resolve workspace crates when testing listings, so each
//! chapter is included here as module docs and `cargo test` runs its code
//! blocks as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/audio.md")]
pub mod audio {}
#[doc = include_str!("../../../book/src/features.md")]
pub mod features {}
#[doc = include_str!("../../../book/src/adapter.md")]
pub mod adapter {}
#[doc = include_str!("../../../book/src/acoustic.md")]
pub mod acoustic {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/generator.md")]
pub mod generator {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
