use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::fewshot::{Episode, EpisodeItem};

/// Splits by class: every sample of a class lands on the same side. Classes
/// on each side are relabelled densely in ascending original order.
pub fn split_classes(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::Config("class split needs at least two classes".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (c as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == c {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} leaves one side of a {c}-class split empty"
        )));
    }
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_classes = classes[..n_train].to_vec();
    let mut test_classes = classes[n_train..].to_vec();
    train_classes.sort_unstable();
    test_classes.sort_unstable();
    Ok((
        class_subset(dataset, &train_classes),
        class_subset(dataset, &test_classes),
    ))
}

fn class_subset(dataset: &Dataset, classes: &[usize]) -> Dataset {
    let mut map = vec![usize::MAX; dataset.num_classes()];
    for (new, &old) in classes.iter().enumerate() {
        map[old] = new;
    }
    let indices: Vec<usize> = (0..dataset.len())
        .filter(|&i| map[dataset.labels[i]] != usize::MAX)
        .collect();
    let mut out = dataset.subset(&indices, |y| map[y]);
    out.class_names = dataset
        .class_names
        .as_ref()
        .map(|names| classes.iter().map(|&k| names[k].clone()).collect());
    out
}

/// Stratified sample split: about `holdout_fraction` of each class (at least
/// one sample when the class has two or more) goes to the held-out side.
pub fn split_samples<R: Rng>(dataset: &Dataset, holdout_fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for mut idx in dataset.class_indices() {
        if idx.len() < 2 {
            return Err(Error::Data("every class needs two samples for a holdout split".into()));
        }
        idx.shuffle(rng);
        let k = ((idx.len() as f64 * holdout_fraction).round() as usize).clamp(1, idx.len() - 1);
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    let mut a = dataset.subset(&train, |y| y);
    let mut b = dataset.subset(&held, |y| y);
    a.class_names = dataset.class_names.clone();
    b.class_names = dataset.class_names.clone();
    Ok((a, b))
}

/// Per-class sample lists for episode sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    classes: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn new(dataset: &Dataset) -> Self {
        Self {
            classes: dataset.class_indices(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn samples(&self, class: usize) -> &[usize] {
        &self.classes[class]
    }
}

/// Draws `ways` distinct classes uniformly, then `shots + queries` distinct
/// samples from each; the first `shots` are support.
pub fn sample_episode<R: Rng>(
    index: &ClassIndex,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if ways == 0 || shots == 0 || queries == 0 {
        return Err(Error::Config("ways, shots and queries must be positive".into()));
    }
    if index.num_classes() < ways {
        return Err(Error::Data(format!(
            "{ways}-way episode needs {ways} classes, dataset has {}",
            index.num_classes()
        )));
    }
    let chosen = index::sample(rng, index.num_classes(), ways).into_vec();
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    for (local, &class) in chosen.iter().enumerate() {
        let pool = index.samples(class);
        if pool.len() < shots + queries {
            return Err(Error::Data(format!(
                "class {class} has {} samples, episode needs {}",
                pool.len(),
                shots + queries
            )));
        }
        let picks = index::sample(rng, pool.len(), shots + queries).into_vec();
        for (k, &p) in picks.iter().enumerate() {
            let item = EpisodeItem {
                sample: pool[p],
                class: local,
            };
            if k < shots {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        ways,
        shots,
        queries,
        support,
        query,
        source_classes: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy(classes: usize, per: usize) -> Dataset {
        let n = classes * per;
        let images = (0..n).map(|i| Tensor::full(&[1, 1, 1], i as f64)).collect();
        let labels = (0..n).map(|i| i / per).collect();
        Dataset::new(images, labels, None).unwrap()
    }

    #[test]
    fn class_split_is_disjoint_and_complete() {
        let ds = toy(4, 3);
        let (a, b) = split_classes(&ds, 0.5, 7).unwrap();
        assert_eq!((a.num_classes(), b.num_classes()), (2, 2));
        assert_eq!(a.len() + b.len(), ds.len());
        let orig = |d: &Dataset| -> Vec<usize> {
            let mut v: Vec<usize> = d.images.iter().map(|t| t.data()[0] as usize / 3).collect();
            v.dedup();
            v
        };
        let (oa, ob) = (orig(&a), orig(&b));
        assert!(oa.iter().all(|c| !ob.contains(c)));
        assert_eq!(split_classes(&ds, 0.5, 7).unwrap(), (a, b));
    }

    #[test]
    fn class_split_rejects_empty_side() {
        let ds = toy(4, 2);
        assert!(matches!(split_classes(&ds, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(split_classes(&ds, 0.05, 0), Err(Error::Config(_))));
        assert!(matches!(split_classes(&toy(1, 3), 0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn episode_counts() {
        let ds = toy(6, 8);
        let idx = ClassIndex::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&idx, 5, 1, 5, &mut rng).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (5, 25));
        ep.validate().unwrap();
    }

    #[test]
    fn all_ways_is_a_permutation() {
        let ds = toy(5, 4);
        let idx = ClassIndex::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&idx, 5, 2, 2, &mut rng).unwrap();
        let mut classes = ep.source_classes.clone();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn insufficient_samples_names_the_class() {
        let ds = toy(3, 2);
        let idx = ClassIndex::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode(&idx, 2, 1, 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("class")));
    }

    #[test]
    fn class_selection_is_uniform() {
        let classes = 10;
        let ds = toy(classes, 3);
        let idx = ClassIndex::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000;
        let ways = 5;
        let mut counts = vec![0usize; classes];
        for _ in 0..trials {
            let ep = sample_episode(&idx, ways, 1, 1, &mut rng).unwrap();
            ep.source_classes.iter().for_each(|&c| counts[c] += 1);
        }
        let p = ways as f64 / classes as f64;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "count {c}, mean {mean}, sigma {sigma}");
        }
    }

    #[test]
    fn stratified_holdout() {
        let ds = toy(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = split_samples(&ds, 0.2, &mut rng).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(a.len(), 12);
        assert_eq!(b.num_classes(), 3);
    }
}
