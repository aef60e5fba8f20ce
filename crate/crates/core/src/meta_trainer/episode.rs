use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::draw_prior;
use crate::rng::{stream, Stream};

/// One meta-learning iteration's data: a batch per meta-train domain, a batch
/// from the held-out meta-test domain, and the prior draws for the MMD terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// 1-based pseudo domains, one per entry of `train_batches`.
    pub meta_train_domains: Vec<usize>,
    pub meta_test_domain: usize,
    /// Indices into the sample slice handed to the trainer.
    pub train_batches: Vec<Vec<usize>>,
    pub test_batch: Vec<usize>,
    /// `b × d_h` standard-normal draws, one per meta-train batch.
    pub train_priors: Vec<Vec<f64>>,
    pub test_prior: Vec<f64>,
}

/// Members of each domain `1..=k` as index lists.
pub fn domain_members(labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 || l > k {
            return Err(Error::Config(format!("domain label {l} outside 1..={k}")));
        }
        members[l - 1].push(i);
    }
    if let Some(d) = members.iter().position(Vec::is_empty) {
        return Err(Error::Clustering(format!("pseudo domain {} is empty", d + 1)));
    }
    Ok(members)
}

/// Picks the meta-test domain uniformly; the rest are meta-train domains.
pub fn split_meta_domains(k: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, usize)> {
    if k < 2 {
        return Err(Error::Config(format!("meta split needs at least 2 domains, got {k}")));
    }
    let test = rng.random_range(1..=k);
    Ok(((1..=k).filter(|&d| d != test).collect(), test))
}

/// `b` distinct members when the domain is large enough, otherwise `b` draws
/// with replacement.
fn draw_batch(members: &[usize], b: usize, rng: &mut impl Rng) -> Vec<usize> {
    if members.len() >= b {
        members.choose_multiple(rng, b).copied().collect()
    } else {
        (0..b).map(|_| *members.choose(rng).expect("non-empty")).collect()
    }
}

/// Samples the episode for global meta-step `step` of `epoch`.
pub fn sample_episode(
    members: &[Vec<usize>],
    batch_size: usize,
    hidden: usize,
    seed: u64,
    epoch: usize,
    step: u64,
) -> Result<Episode> {
    let k = members.len();
    let mut rng = stream(seed, Stream::Episode, &[epoch as u64, step]);
    let (train_ids, test_id) = split_meta_domains(k, &mut rng)?;
    let mut train_batches: Vec<Vec<usize>> = train_ids
        .iter()
        .map(|&d| draw_batch(&members[d - 1], batch_size, &mut rng))
        .collect();
    let mut test_batch = draw_batch(&members[test_id - 1], batch_size, &mut rng);
    // Keep a canonical order inside each batch.
    train_batches.iter_mut().for_each(|b| b.sort_unstable());
    test_batch.sort_unstable();
    let mut prior_rng = stream(seed, Stream::Prior, &[epoch as u64, step]);
    let train_priors = train_ids
        .iter()
        .map(|_| draw_prior(&mut prior_rng, batch_size, hidden))
        .collect();
    let test_prior = draw_prior(&mut prior_rng, batch_size, hidden);
    Ok(Episode {
        meta_train_domains: train_ids,
        meta_test_domain: test_id,
        train_batches,
        test_batch,
        train_priors,
        test_prior,
    })
}

/// A uniformly shuffled pool batch, used by the baseline trainer.
pub fn sample_pool_batch(pool: &[usize], b: usize, seed: u64, epoch: usize, step: u64) -> Vec<usize> {
    let mut rng = stream(seed, Stream::Episode, &[epoch as u64, step]);
    let mut idx = draw_batch(pool, b, &mut rng);
    idx.shuffle(&mut rng);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let mut rng = stream(0, Stream::Episode, &[]);
        let (tr, te) = split_meta_domains(3, &mut rng).unwrap();
        assert_eq!(tr.len(), 2);
        assert!(!tr.contains(&te));
        let (tr, te) = split_meta_domains(2, &mut rng).unwrap();
        assert_eq!(tr.len(), 1);
        assert_ne!(tr[0], te);
        assert!(split_meta_domains(1, &mut rng).is_err());
    }

    #[test]
    fn batches_stay_in_domain() {
        let labels = vec![1, 2, 3, 1, 2, 3, 1, 2, 3, 1];
        let members = domain_members(&labels, 3).unwrap();
        let ep = sample_episode(&members, 5, 4, 1, 1, 0).unwrap();
        for (d, b) in ep.meta_train_domains.iter().zip(&ep.train_batches) {
            assert_eq!(b.len(), 5);
            assert!(b.iter().all(|&i| labels[i] == *d));
        }
        assert!(ep.test_batch.iter().all(|&i| labels[i] == ep.meta_test_domain));
        assert_eq!(ep.test_prior.len(), 20);
    }

    #[test]
    fn empty_domain_is_an_error() {
        assert!(domain_members(&[1, 1, 3], 3).is_err());
    }
}
