//! Explicit-content detection for song lyrics: a small transformer
//! classifier trained from scratch, a human-feedback refinement loop, an
//! age-tier rating layer, and the evaluation tooling used to compare them.

pub mod checkpoint;
pub mod corpus;
pub mod evaluation;
pub mod feedback;
pub mod gateway;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rating;
pub mod store;
pub mod text;
pub mod tokenizer;
pub mod training;

// Guide chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/feedback.md")]
    mod feedback {}
    #[doc = include_str!("../../../book/src/rating.md")]
    mod rating {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
