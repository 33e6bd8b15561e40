//! Every code listing in `book/` and the README runs as a doctest of this crate.
//!
//! mdbook cannot link listings against workspace crates, so each chapter is
//! pulled in as the doc comment of an empty module instead. A failing doctest
//! names the module, which names the chapter.

#[doc = include_str!("../../../README.md")]
pub mod readme {}
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/memory.md")]
pub mod memory {}
#[doc = include_str!("../../../book/src/routing.md")]
pub mod routing {}
#[doc = include_str!("../../../book/src/scratchpad.md")]
pub mod scratchpad {}
#[doc = include_str!("../../../book/src/layer.md")]
pub mod layer {}
#[doc = include_str!("../../../book/src/controller.md")]
pub mod controller {}
#[doc = include_str!("../../../book/src/cost.md")]
pub mod cost {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/checking.md")]
pub mod checking {}
