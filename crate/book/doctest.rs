// mdbook can't run listings that depend on a workspace crate, so every
// chapter is pulled in as the doc comment of an empty module and `cargo test`
// runs its code blocks as doctests. One module per chapter keeps failures
// traceable to a file.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/environment.md")]
pub mod environment {}
#[doc = include_str!("src/surrogate.md")]
pub mod surrogate {}
#[doc = include_str!("src/similarity.md")]
pub mod similarity {}
#[doc = include_str!("src/ladders.md")]
pub mod ladders {}
#[doc = include_str!("src/cost.md")]
pub mod cost {}
#[doc = include_str!("src/scheduler.md")]
pub mod scheduler {}
#[doc = include_str!("src/experiments.md")]
pub mod experiments {}
