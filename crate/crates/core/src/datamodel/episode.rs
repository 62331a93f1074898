use rand::seq::index::sample;
use rand::Rng;

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};

/// Class-balanced mini-batch: `n_way` distinct classes, `k_shot` samples each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeBatch {
    /// Indices into `Dataset::samples`, grouped by class.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
}

impl EpisodeBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Pools of training-split sample indices per seen class.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    classes: Vec<usize>,
    pools: Vec<Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(dataset: &Dataset) -> Self {
        let classes = dataset.seen_classes.clone();
        let pools = classes
            .iter()
            .map(|&c| {
                (0..dataset.samples.len())
                    .filter(|&i| dataset.samples[i].split == Split::Train && dataset.samples[i].label == c)
                    .collect()
            })
            .collect();
        EpisodeSampler { classes, pools }
    }

    pub fn num_train_samples(&self) -> usize {
        self.pools.iter().map(Vec::len).sum()
    }

    pub fn check(&self, n_way: usize, k_shot: usize) -> Result<()> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::Sampling("n_way and k_shot must be positive".into()));
        }
        if n_way > self.classes.len() {
            return Err(Error::Sampling(format!(
                "n_way = {n_way} exceeds the {} seen classes",
                self.classes.len()
            )));
        }
        if let Some((c, pool)) = self.classes.iter().zip(&self.pools).find(|(_, p)| p.len() < k_shot) {
            return Err(Error::Sampling(format!(
                "class {c} has {} training samples, fewer than k_shot = {k_shot}",
                pool.len()
            )));
        }
        Ok(())
    }

    /// Classes without replacement, then samples without replacement within each class.
    pub fn sample<R: Rng + ?Sized>(&self, n_way: usize, k_shot: usize, rng: &mut R) -> Result<EpisodeBatch> {
        self.check(n_way, k_shot)?;
        let mut indices = Vec::with_capacity(n_way * k_shot);
        let mut labels = Vec::with_capacity(n_way * k_shot);
        for ci in sample(rng, self.classes.len(), n_way) {
            let pool = &self.pools[ci];
            for si in sample(rng, pool.len(), k_shot) {
                indices.push(pool[si]);
                labels.push(self.classes[ci]);
            }
        }
        Ok(EpisodeBatch {
            indices,
            labels,
            n_way,
            k_shot,
        })
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    rng: &mut R,
) -> Result<EpisodeBatch> {
    EpisodeSampler::new(dataset).sample(n_way, k_shot, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic, SynthSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn dataset(n_seen: usize, per_class: usize) -> Dataset {
        let spec = SynthSpec {
            image_size: 24,
            seen_test_fraction: 0.0,
            ..SynthSpec::new(n_seen, 1, 8, per_class)
        };
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn sixteen_way_two_shot_is_32() {
        let ds = dataset(20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&ds, 16, 2, &mut rng).unwrap();
        assert_eq!(ep.len(), 32);
        let mut counts = BTreeMap::new();
        for &l in &ep.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn one_way_one_shot() {
        let ds = dataset(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&ds, 1, 1, &mut rng).unwrap();
        assert_eq!(ep.len(), 1);
        assert_eq!(ds.samples[ep.indices[0]].label, ep.labels[0]);
    }

    #[test]
    fn rejects_impossible_requests() {
        let ds = dataset(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_episode(&ds, 5, 1, &mut rng).is_err());
        assert!(sample_episode(&ds, 2, 3, &mut rng).is_err());
    }

    #[test]
    fn advances_rng() {
        let ds = dataset(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = sample_episode(&ds, 3, 2, &mut rng).unwrap();
        let b = sample_episode(&ds, 3, 2, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn class_selection_frequency_is_uniform() {
        // Chi-square over per-class selection counts, 10 000 draws of 4-way episodes.
        let ds = dataset(20, 2);
        let sampler = EpisodeSampler::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0f64; 20];
        let draws = 10_000;
        for _ in 0..draws {
            for l in sampler.sample(4, 1, &mut rng).unwrap().labels {
                counts[l] += 1.0;
            }
        }
        let expected = draws as f64 * 4.0 / 20.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 19 dof: mean 19, sd sqrt(38); 3 sigma bound.
        assert!(chi2 < 19.0 + 3.0 * 38f64.sqrt(), "chi2 = {chi2}");
        let p: f64 = 4.0 / 20.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c - expected).abs() < 3.0 * sd, "count {c}, expected {expected} +- {sd}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cardinality_invariants(n_way in 1usize..=8, k_shot in 1usize..=4, seed in any::<u64>()) {
            let ds = dataset(8, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ep = sample_episode(&ds, n_way, k_shot, &mut rng).unwrap();
            prop_assert_eq!(ep.len(), n_way * k_shot);
            let mut counts = BTreeMap::new();
            for (&i, &l) in ep.indices.iter().zip(&ep.labels) {
                prop_assert_eq!(ds.samples[i].label, l);
                prop_assert_eq!(ds.samples[i].split, Split::Train);
                *counts.entry(l).or_insert(0usize) += 1;
            }
            prop_assert_eq!(counts.len(), n_way);
            prop_assert!(counts.values().all(|&c| c == k_shot));
            let distinct: std::collections::BTreeSet<_> = ep.indices.iter().collect();
            prop_assert_eq!(distinct.len(), ep.len());
        }
    }
}
