// mdbook cannot run listings that depend on workspace crates, so each
// chapter is pulled in here and `cargo test --doc` runs its code blocks.
// One module per chapter keeps failures traceable to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/backbone.md")]
pub mod backbone {}
#[doc = include_str!("../../../book/src/prompts.md")]
pub mod prompts {}
#[doc = include_str!("../../../book/src/rank-probe.md")]
pub mod rank_probe {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
