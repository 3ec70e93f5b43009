//! Day-based train / validation / test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DataError;
use crate::records::{day_of, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_days: usize,
    /// Share of the last day kept for testing.
    pub test_fraction: f64,
    /// Share of the training days carved out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_days: 3,
            test_fraction: 0.1,
            validation_fraction: 0.01,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let frac = |field, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(DataError::InvalidConfig {
                    field,
                    reason: format!("{v} is not in [0, 1]"),
                })
            }
        };
        frac("test_fraction", self.test_fraction)?;
        frac("validation_fraction", self.validation_fraction)?;
        if self.train_days == 0 {
            return Err(DataError::InvalidConfig {
                field: "train_days",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded subset of `round(fraction · n)` elements, returned in input order
/// together with the complement.
fn carve(samples: Vec<Sample>, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<Sample>, Vec<Sample>) {
    let take = (fraction * samples.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut chosen = vec![false; samples.len()];
    for &i in &order[..take] {
        chosen[i] = true;
    }
    let (mut picked, mut rest) = (Vec::with_capacity(take), Vec::with_capacity(samples.len() - take));
    for (s, c) in samples.into_iter().zip(chosen) {
        if c {
            picked.push(s);
        } else {
            rest.push(s);
        }
    }
    (picked, rest)
}

/// The first `train_days` distinct days feed train and validation; the last
/// day, subsampled to `test_fraction`, is the test set. Days in between, if
/// any, are unused.
pub fn split_by_day(samples: &[Sample], cfg: &SplitConfig) -> Result<Split, DataError> {
    cfg.validate()?;
    let mut days: Vec<i64> = samples.iter().map(|s| day_of(s.time)).collect();
    days.sort_unstable();
    days.dedup();
    if days.len() < cfg.train_days + 1 {
        return Err(DataError::InsufficientDays {
            found: days.len(),
            needed: cfg.train_days + 1,
        });
    }
    let last_train = days[cfg.train_days - 1];
    let test_day = *days.last().expect("non-empty");
    let early: Vec<Sample> = samples.iter().copied().filter(|s| day_of(s.time) <= last_train).collect();
    let last: Vec<Sample> = samples.iter().copied().filter(|s| day_of(s.time) == test_day).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (validation, train) = carve(early, cfg.validation_fraction, &mut rng);
    let (test, _) = carve(last, cfg.test_fraction, &mut rng);
    Ok(Split { train, validation, test })
}
