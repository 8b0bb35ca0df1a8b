//! Distribution metrics and spectral analysis between real and generated sets.

pub mod features;
pub mod frechet;
pub mod prdc;
pub mod spectrum;

pub use features::{embed_for_metrics, EvalConfig};
pub use frechet::{frechet_distance, FeatureSet};
pub use prdc::{prdc, Prdc};
pub use spectrum::{radial_power_spectrum, spectrum_difference, BandErrors, SpectrumDifference, SpectrumProfile};
