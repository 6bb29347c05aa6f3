use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::emb::EmbeddingSet;
use super::manifest::SplitSpec;
use crate::error::{CprError, Result};

pub const DEFAULT_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];

/// A K-shot task drawn from one embedding set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Dataset class ids in episode order; episode label `j` means `classes[j]`.
    pub classes: Vec<usize>,
    /// `support[j]` holds the K sample indices of `classes[j]`.
    pub support: Vec<Vec<usize>>,
    /// Non-support samples of the episode classes, ascending.
    pub query: Vec<usize>,
    /// Samples whose features may be used without labels. Defaults to `query`.
    pub unlabeled_pool: Vec<usize>,
    pub shots: usize,
    pub seed: u64,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Support as `(sample index, episode label)` pairs in class-major order.
    pub fn labeled_support(&self) -> Vec<(usize, usize)> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(j, idx)| idx.iter().map(move |&i| (i, j)))
            .collect()
    }
}

/// Samples K support examples per class. With a split, only base classes take
/// part; otherwise every class in the set does.
pub fn sample_episode(set: &EmbeddingSet, split: Option<&SplitSpec>, shots: usize, seed: u64) -> Result<Episode> {
    let labels = set.require_labels("episode sampling")?;
    if shots == 0 {
        return Err(CprError::config("shots must be at least 1"));
    }
    let classes: Vec<usize> = match split {
        Some(s) => s.base().to_vec(),
        None => (0..set.num_classes()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(classes.len());
    let mut in_support = vec![false; set.len()];
    for &c in &classes {
        let members = set.indices_of(c);
        if members.len() < shots {
            return Err(CprError::InsufficientData(format!(
                "class {c} (`{}`) has {} samples, {shots}-shot needs {shots}",
                set.class_names()[c],
                members.len()
            )));
        }
        let picked: Vec<usize> = sample(&mut rng, members.len(), shots)
            .into_iter()
            .map(|k| members[k])
            .collect();
        for &i in &picked {
            in_support[i] = true;
        }
        support.push(picked);
    }
    let mut in_episode = vec![false; set.num_classes()];
    for &c in &classes {
        in_episode[c] = true;
    }
    let query: Vec<usize> = (0..set.len())
        .filter(|&i| in_episode[labels[i]] && !in_support[i])
        .collect();
    if let Some(s) = split {
        debug_assert!(support.iter().flatten().all(|&i| !s.new_classes().contains(&labels[i])));
    }
    Ok(Episode {
        classes,
        support,
        unlabeled_pool: query.clone(),
        query,
        shots,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;

    fn set(per_class: &[usize]) -> EmbeddingSet {
        let mut labels = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, n));
        }
        let n = labels.len();
        let f = Tensor2::from_vec(n, 2, (0..2 * n).map(|i| i as f64 + 1.0).collect()).unwrap();
        let names = (0..per_class.len()).map(|c| format!("c{c}")).collect();
        EmbeddingSet::new(f, Some(labels), names).unwrap()
    }

    #[test]
    fn one_shot_three_classes() {
        let e = sample_episode(&set(&[4, 4, 4]), None, 1, 7).unwrap();
        assert_eq!(e.labeled_support().len(), 3);
        assert_eq!(e.query.len(), 9);
        assert_eq!(e.unlabeled_pool, e.query);
    }

    #[test]
    fn same_seed_same_episode() {
        let s = set(&[20, 20, 20]);
        assert_eq!(
            sample_episode(&s, None, 4, 11).unwrap(),
            sample_episode(&s, None, 4, 11).unwrap()
        );
        assert_ne!(
            sample_episode(&s, None, 4, 11).unwrap().support,
            sample_episode(&s, None, 4, 12).unwrap().support
        );
    }

    #[test]
    fn too_few_samples_names_class() {
        let err = sample_episode(&set(&[20, 10]), None, 16, 1).unwrap_err();
        match err {
            CprError::InsufficientData(m) => assert!(m.contains("class 1"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_restricts_support_to_base() {
        let s = set(&[5, 5, 5, 5]);
        let split = SplitSpec::new(vec![0, 2], vec![1, 3], 4).unwrap();
        let e = sample_episode(&s, Some(&split), 2, 3).unwrap();
        let labels = s.labels().unwrap();
        assert_eq!(e.classes, vec![0, 2]);
        for (i, j) in e.labeled_support() {
            assert_eq!(labels[i], e.classes[j]);
        }
        assert!(e.query.iter().all(|&i| labels[i] == 0 || labels[i] == 2));
    }
}
