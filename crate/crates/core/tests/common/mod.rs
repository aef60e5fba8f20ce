#![allow(dead_code)]

pub mod checks;
pub mod fd;
pub mod reference;

use d2am::data_synth::{generate_dataset, Dataset, DatasetSpec};
use d2am::losses::draw_prior;
use d2am::meta_trainer::Episode;
use d2am::model::ModelConfig;
use d2am::rng::{stream, Stream};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: (16, 16),
        channels: [4, 8, 8],
        reduction: 4,
        adaptation_width: 6,
        depth_hidden: 3,
        ..ModelConfig::default()
    }
}

pub fn tiny_dataset(per_domain: usize, seed: u64) -> Dataset {
    let mut spec = DatasetSpec::desk_default(seed);
    spec.image_size = (16, 16);
    spec.samples_per_domain = per_domain;
    spec.held_out_samples_per_domain = Some(per_domain);
    generate_dataset(&spec).unwrap()
}

/// Meta-train domains 1 and 2, meta-test domain 3, `b` samples each taken
/// from the generator's latent domains.
pub fn tiny_episode(ds: &Dataset, b: usize, hidden: usize, seed: u64) -> Episode {
    let per = ds.spec.samples_per_domain;
    let batch = |d: usize| (d * per..d * per + b).collect::<Vec<_>>();
    let mut rng = stream(seed, Stream::Prior, &[42]);
    Episode {
        meta_train_domains: vec![1, 2],
        meta_test_domain: 3,
        train_batches: vec![batch(0), batch(1)],
        test_batch: batch(2),
        train_priors: vec![draw_prior(&mut rng, b, hidden), draw_prior(&mut rng, b, hidden)],
        test_prior: draw_prior(&mut rng, b, hidden),
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Up to `count` coordinates spread over `0..len`.
pub fn coords(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        (0..len).collect()
    } else {
        (0..count).map(|j| j * len / count + (j * 7) % (len / count).max(1)).collect()
    }
}
