//! Generator, discriminators and the differentiable spectral ops they share.

pub mod discriminator;
pub mod generator;
pub mod ops;
mod store;

pub use discriminator::{
    DiscriminatorConfig, DiscriminatorOutput, Discriminators, Family, MpdConfig, MrdConfig,
    Resolution,
};
pub use generator::{input_features, Generator, GeneratorConfig, GeneratorOutput, Synthesis};
pub use ops::{period_reshape, SpectralOps};
pub use store::ParamStore;
