pub mod control;
pub mod error;
pub mod ergodics;
pub mod expr;
pub mod hoermander;
pub mod model;
pub mod sde;
pub mod spikes;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
    #[doc = include_str!("../../../book/src/expressions.md")]
    pub mod expressions {}
    #[doc = include_str!("../../../book/src/brackets.md")]
    pub mod brackets {}
    #[doc = include_str!("../../../book/src/control.md")]
    pub mod control {}
    #[doc = include_str!("../../../book/src/drift.md")]
    pub mod drift {}
    #[doc = include_str!("../../../book/src/spikes.md")]
    pub mod spikes {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
