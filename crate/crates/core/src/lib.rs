//! Masked-diffusion trajectory planning on synthetic scenes.
//!
//! A plan is a fixed-pattern token string ([`codec`]) produced by a small
//! transformer ([`model`]) trained to fill masked positions ([`training`]).
//! [`decoder`] runs confidence-ranked iterative demasking and a
//! left-to-right baseline; [`world`] generates scenes and [`eval`] scores
//! plans. See the guide under `book/` for a walkthrough.

pub mod codec;
pub mod config;
pub mod model;
pub mod training;
pub mod world;
pub mod decoder;
pub mod eval;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/template.md")]
    mod template {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/cache.md")]
    mod cache {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
