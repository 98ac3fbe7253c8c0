pub mod autodiff;
pub mod error;
pub mod spectral;
pub mod conditioning;
pub mod prompting;
pub mod seed;
pub mod data;
pub mod objective;
pub mod model;
pub mod trainer;
pub mod eval;
pub mod config;
pub mod cli;

/// Book chapters, compiled as doc-tests so their snippets stay current.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    pub mod spectral {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    pub mod conditioning {}
    #[doc = include_str!("../../../book/src/prompting.md")]
    pub mod prompting {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
