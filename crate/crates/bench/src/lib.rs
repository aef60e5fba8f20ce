//! Benchmark fixtures shared by the criterion targets.

use d2am::data_synth::{generate_dataset, Dataset, DatasetSpec};
use d2am::model::ModelConfig;

/// The reduced network used for quick desk experiments.
pub fn compact_model() -> ModelConfig {
    ModelConfig {
        image_size: (16, 16),
        channels: [8, 16, 32],
        ..ModelConfig::default()
    }
}

pub fn desk_dataset(image: usize, per_domain: usize) -> Dataset {
    let mut spec = DatasetSpec::desk_default(0);
    spec.image_size = (image, image);
    spec.samples_per_domain = per_domain;
    spec.held_out_samples_per_domain = Some(per_domain);
    generate_dataset(&spec).expect("desk spec is valid")
}
