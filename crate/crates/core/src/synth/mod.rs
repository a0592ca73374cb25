//! Synthetic two-site data: generation, normalization, storage and loading.

pub mod dataset;
pub mod generate;
pub mod loader;
pub mod normalize;
pub mod sextant;

pub use dataset::{load_split, synth_dataset, synth_split, CorruptPolicy, SplitCounts};
pub use generate::{synth_exam, synth_exam_with_grade, SiteProfile, SupervisionStyle};
pub use loader::DataLoader;
