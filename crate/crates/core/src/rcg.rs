//! Rare class generation: temperature softmax over `1 - f_c` and the
//! class-then-mask samplers built on it.
//!
//! `P(c) = exp((1 - f_c) / T) / sum_c' exp((1 - f_c') / T)`. Small `T` pushes
//! nearly all mass to the rarest classes; large `T` flattens toward uniform.

use log::debug;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::label::{ClassId, ClassStats};
use crate::scalar::Scalar;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ClassDistribution<S> {
    probabilities: Vec<S>,
    temperature: S,
    sampler: WeightedIndex<f64>,
}

impl<S: Scalar> ClassDistribution<S> {
    pub fn probabilities(&self) -> &[S] {
        &self.probabilities
    }

    pub fn temperature(&self) -> S {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.probabilities.len()
    }

    /// Uniform distribution over `n` classes (rare-class sampling disabled).
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("class list"));
        }
        let p = S::one() / S::of(n as f64);
        Self::from_probabilities(vec![p; n], S::infinity())
    }

    fn from_probabilities(probabilities: Vec<S>, temperature: S) -> Result<Self> {
        let weights: Vec<f64> = probabilities.iter().map(|p| p.as_f64()).collect();
        let sampler = WeightedIndex::new(&weights)
            .map_err(|e| Error::arg(format!("degenerate class distribution: {e}")))?;
        Ok(Self {
            probabilities,
            temperature,
            sampler,
        })
    }
}

/// Temperature softmax over `(1 - f_c) / T`, evaluated with max subtraction.
pub fn sampling_probabilities<S: Scalar>(
    stats: &ClassStats,
    temperature: S,
) -> Result<ClassDistribution<S>> {
    if !(temperature > S::zero()) {
        return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
    }
    if stats.frequencies.is_empty() {
        return Err(Error::Empty("class frequencies"));
    }
    let logits: Vec<S> = stats
        .frequencies
        .iter()
        .map(|&f| (S::one() - S::of(f)) / temperature)
        .collect();
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    let probabilities = exps.into_iter().map(|e| e / total).collect();
    ClassDistribution::from_probabilities(probabilities, temperature)
}

pub fn sample_class<S: Scalar, R: Rng + ?Sized>(dist: &ClassDistribution<S>, rng: &mut R) -> ClassId {
    dist.sampler.sample(rng) as ClassId
}

/// Which masks contain which classes.
#[derive(Debug, Clone)]
pub struct MaskIndex {
    ids: Vec<String>,
    mask_classes: Vec<Vec<ClassId>>,
    by_class: Vec<Vec<usize>>,
}

impl MaskIndex {
    /// `entries` pairs a mask id with its class set; classes `>= num_classes` are rejected.
    pub fn new(entries: Vec<(String, Vec<ClassId>)>, num_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        let mut ids = Vec::with_capacity(entries.len());
        let mut mask_classes = Vec::with_capacity(entries.len());
        for (i, (id, classes)) in entries.into_iter().enumerate() {
            for &c in &classes {
                by_class
                    .get_mut(c as usize)
                    .ok_or_else(|| Error::arg(format!("mask `{id}` has class {c} outside taxonomy")))?
                    .push(i);
            }
            ids.push(id);
            mask_classes.push(classes);
        }
        Ok(Self {
            ids,
            mask_classes,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, mask: usize) -> &str {
        &self.ids[mask]
    }

    pub fn classes_of(&self, mask: usize) -> &[ClassId] {
        &self.mask_classes[mask]
    }

    pub fn masks_with(&self, class: ClassId) -> &[usize] {
        self.by_class.get(class as usize).map_or(&[], Vec::as_slice)
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairDraw {
    pub mask: usize,
    pub class: ClassId,
    /// Class draws rejected because no mask contained the class.
    pub redraws: u32,
}

const MAX_REDRAWS: u32 = 64;

/// Draws `c ~ P`, then a mask containing `c` uniformly; classes without masks
/// are redrawn. After `MAX_REDRAWS` rejections the class is drawn from `P`
/// restricted to classes that have masks, which is the same law.
pub fn sample_training_pair<S: Scalar, R: Rng + ?Sized>(
    index: &MaskIndex,
    dist: &ClassDistribution<S>,
    rng: &mut R,
) -> Result<PairDraw> {
    if index.is_empty() {
        return Err(Error::Empty("mask index"));
    }
    if dist.num_classes() != index.num_classes() {
        return Err(Error::shape(format!(
            "distribution over {} classes, index over {}",
            dist.num_classes(),
            index.num_classes()
        )));
    }
    let weights: Vec<f64> = dist
        .probabilities()
        .iter()
        .enumerate()
        .map(|(c, p)| if index.by_class[c].is_empty() { 0.0 } else { p.as_f64() })
        .collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Dataset(
            "no class with positive probability appears in any mask".into(),
        ));
    }
    let mut redraws = 0u32;
    let class = loop {
        let class = sample_class(dist, rng);
        if !index.by_class[class as usize].is_empty() {
            break class;
        }
        redraws += 1;
        if redraws == MAX_REDRAWS {
            // Rejection conditions on reachability; sample that law directly.
            let reachable = WeightedIndex::new(&weights).expect("positive total weight");
            break reachable.sample(rng) as ClassId;
        }
    };
    if redraws > 0 {
        debug!("class {class} drawn after {redraws} redraws");
    }
    let mask = *index.by_class[class as usize].choose(rng).expect("class has a mask");
    Ok(PairDraw {
        mask,
        class,
        redraws,
    })
}

/// `n` draws of [`sample_training_pair`], with replacement.
pub fn select_generation_masks<S: Scalar, R: Rng + ?Sized>(
    index: &MaskIndex,
    dist: &ClassDistribution<S>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::arg("number of generation masks must be >= 1"));
    }
    (0..n)
        .map(|_| sample_training_pair(index, dist, rng).map(|d| d.mask))
        .collect()
}

/// `n` masks chosen uniformly with replacement.
pub fn select_uniform_masks<R: Rng + ?Sized>(
    index: &MaskIndex,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::Empty("mask index"));
    }
    if n == 0 {
        return Err(Error::arg("number of generation masks must be >= 1"));
    }
    Ok((0..n).map(|_| rng.random_range(0..index.len())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(f: &[f64], t: f64) -> ClassDistribution<f64> {
        sampling_probabilities(&ClassStats::from_frequencies(f.to_vec()).unwrap(), t).unwrap()
    }

    #[test]
    fn symmetric_frequencies_give_uniform() {
        for t in [0.01, 1.0, 100.0] {
            let d = dist(&[0.5, 0.5], t);
            assert_eq!(d.probabilities(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn unit_temperature_reference() {
        let d = dist(&[0.9, 0.1], 1.0);
        // e^0.1 / (e^0.1 + e^0.9)
        let expected = 0.1f64.exp() / (0.1f64.exp() + 0.9f64.exp());
        assert!((d.probabilities()[0] - expected).abs() < 1e-15);
        assert!((d.probabilities()[0] - 0.3100).abs() < 1e-4);
        assert!((d.probabilities()[1] - 0.6900).abs() < 1e-4);
        // The pair (0.2086, 0.7914) belongs to T = 0.6, not T = 1.
        let d = dist(&[0.9, 0.1], 0.6);
        assert!((d.probabilities()[0] - 0.2086).abs() < 1e-4);
    }

    #[test]
    fn low_temperature_concentrates_on_rare_class() {
        let d = dist(&[0.9, 0.1], 0.01);
        assert!(d.probabilities()[1] >= 1.0 - 1e-30);
        let d32 = sampling_probabilities::<f32>(
            &ClassStats::from_frequencies(vec![0.9, 0.1]).unwrap(),
            0.01,
        )
        .unwrap();
        assert!(d32.probabilities().iter().all(|p| p.is_finite()));
        assert_eq!(d32.probabilities()[1], 1.0);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let s = ClassStats::from_frequencies(vec![0.5, 0.5]).unwrap();
        assert!(sampling_probabilities(&s, 0.0f64).is_err());
        assert!(sampling_probabilities(&s, -1.0f64).is_err());
        assert!(sampling_probabilities(&s, f64::NAN).is_err());
    }

    #[test]
    fn sample_class_rates() {
        let d = dist(&[0.9, 0.1], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_class(&d, &mut rng) == 1).count();
        let rate = ones as f64 / n as f64;
        assert!((rate - d.probabilities()[1]).abs() < 0.01, "rate {rate}");

        let single = dist(&[1.0], 1.0);
        assert!((0..100).all(|_| sample_class(&single, &mut rng) == 0));

        let degenerate = dist(&[0.9, 0.1], 0.01);
        assert!((0..10_000).all(|_| sample_class(&degenerate, &mut rng) == 1));
    }

    #[test]
    fn training_pair_composition() {
        let index = MaskIndex::new(vec![("a".into(), vec![0]), ("b".into(), vec![1])], 2).unwrap();
        let d = dist(&[0.9, 0.1], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let b = (0..n)
            .filter(|_| sample_training_pair(&index, &d, &mut rng).unwrap().mask == 1)
            .count();
        let rate = b as f64 / n as f64;
        assert!((rate - d.probabilities()[1]).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn classes_without_masks_are_redrawn() {
        // Class 2 is the rarest but absent from every mask.
        let index = MaskIndex::new(vec![("a".into(), vec![0]), ("b".into(), vec![1])], 3).unwrap();
        let d = dist(&[0.5, 0.5, 0.0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total_redraws = 0;
        for _ in 0..1000 {
            let draw = sample_training_pair(&index, &d, &mut rng).unwrap();
            assert_ne!(draw.class, 2);
            total_redraws += draw.redraws;
        }
        assert!(total_redraws > 0);

        let single = MaskIndex::new(vec![("only".into(), vec![0, 1])], 2).unwrap();
        let d = dist(&[0.3, 0.7], 1.0);
        for _ in 0..100 {
            assert_eq!(sample_training_pair(&single, &d, &mut rng).unwrap().mask, 0);
        }
    }

    #[test]
    fn dominant_absent_class_falls_back_to_reachable_law() {
        // Class 0 never occurs, so it takes almost all mass at T = 0.01.
        let index = MaskIndex::new(vec![("a".into(), vec![1]), ("b".into(), vec![2])], 3).unwrap();
        let d = dist(&[0.0, 0.6, 0.4], 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws: Vec<PairDraw> = (0..2000)
            .map(|_| sample_training_pair(&index, &d, &mut rng).unwrap())
            .collect();
        assert!(draws.iter().all(|p| p.class != 0 && p.redraws == MAX_REDRAWS));
        // Conditional on {1, 2}, class 2 has probability 1 / (1 + e^-20).
        assert!(draws.iter().all(|p| p.mask == 1));
    }

    #[test]
    fn unreachable_distribution_errors() {
        let index = MaskIndex::new(vec![("a".into(), vec![0])], 2).unwrap();
        let d = dist(&[1.0, 0.0], 0.001);
        // P(0) underflows to 0; only class 1 has mass and no mask has it.
        assert_eq!(d.probabilities()[0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_training_pair(&index, &d, &mut rng).is_err());
        let empty = MaskIndex::new(vec![], 2).unwrap();
        assert!(sample_training_pair(&empty, &dist(&[0.5, 0.5], 1.0), &mut rng).is_err());
    }

    #[test]
    fn selection_is_deterministic() {
        let index = MaskIndex::new(
            vec![("a".into(), vec![0]), ("b".into(), vec![0, 1]), ("c".into(), vec![2])],
            3,
        )
        .unwrap();
        let d = dist(&[0.6, 0.3, 0.1], 0.5);
        let a = select_generation_masks(&index, &d, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = select_generation_masks(&index, &d, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            select_generation_masks(&index, &d, 1, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap()
                .len(),
            1
        );
        assert!(select_generation_masks(&index, &d, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
