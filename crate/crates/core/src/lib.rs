pub mod autodiff;
pub mod deformation;
pub mod error;
pub mod geometry;
pub mod registration;
pub mod spectral;
pub mod synth;
pub mod training;
pub mod velocity_field;
mod warning;

pub use error::{Error, Result};
pub use warning::Warning;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/velocity-fields.md")]
    mod velocity_fields {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
