//! Serialization, synthetic domain suite and preprocessing.

mod checkpoint;
mod container;
mod dataset;
mod preprocess;
mod synth;

pub use checkpoint::{base_from_bytes, base_to_container, load_base, save_base, AdapterCheckpoint, BaseInfo};
pub use container::{sha256_hex, write_atomic, Array, Container, MAGIC, VERSION};
pub use dataset::{load_external_slices, Dataset, Sample, Split, SuiteIndex};
pub use preprocess::{min_max_scale, preprocess, resize_bilinear, resize_nearest, BLACK_THRESHOLD};
pub use synth::{generate_domain_suite, render_domain, BaseSample, DomainSpec, SuiteSpec};
