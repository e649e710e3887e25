//! Triple construction and ratio-restricted batch composition.

mod augment;

use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, sobel, AugmentationPolicy};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seeding::{derived_rng, STREAM_BATCH, STREAM_LABELED_ORDER, STREAM_UNLABELED_ORDER};

/// Guards `floor(r * b)` against representation error such as `0.3 * 10`.
const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioConfig {
    /// Upper bound on the unlabeled share of every batch, in `[0, 1)`.
    pub r: f64,
    pub batch_size: usize,
    pub repetitions: usize,
}

impl RatioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) || !self.r.is_finite() {
            return Err(Error::config("r", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be positive"));
        }
        if self.labeled_per_batch() == 0 {
            return Err(Error::config(
                "r",
                format!("r = {} leaves no labeled items in a batch of {}", self.r, self.batch_size),
            ));
        }
        Ok(())
    }

    /// `floor(r * batch_size)`
    pub fn unlabeled_per_batch(&self) -> usize {
        ((self.r * self.batch_size as f64) + RATIO_SLACK).floor() as usize
    }

    pub fn labeled_per_batch(&self) -> usize {
        self.batch_size - self.unlabeled_per_batch().min(self.batch_size)
    }

    /// Batches per epoch, one epoch being one pass over the labeled pool.
    pub fn batches_per_epoch(&self, labeled: usize) -> usize {
        labeled.div_ceil(self.labeled_per_batch())
    }
}

/// Position of a sample in the training pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleRef {
    Labeled(usize),
    Unlabeled(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleItem {
    pub x1: Image,
    pub x2: Image,
    pub x3: Image,
    /// Hard class of a labeled item.
    pub label: Option<usize>,
    pub labeled: bool,
    pub source: SampleRef,
    pub x2_source: SampleRef,
    pub x3_source: SampleRef,
}

/// Labeled and unlabeled training pools plus the class index used for
/// supervised augmentation and inverse examples.
pub struct Pools<'a> {
    labeled: &'a [Sample],
    unlabeled: &'a [Sample],
    /// `None` when supervision is off; labels are then never read.
    classes: Option<ClassIndex>,
    warned: AtomicBool,
}

struct ClassIndex {
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl<'a> Pools<'a> {
    /// With `supervised` false every item takes the unlabeled branch and no
    /// label value is read.
    pub fn new(labeled: &'a [Sample], unlabeled: &'a [Sample], supervised: bool) -> Result<Self> {
        let classes = if supervised {
            let labels = labeled
                .iter()
                .map(|s| {
                    s.hard_label()
                        .ok_or_else(|| Error::Data(format!("labeled sample `{}` has no label", s.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut by_class = vec![Vec::new(); k];
            for (i, &c) in labels.iter().enumerate() {
                by_class[c].push(i);
            }
            if by_class.iter().filter(|v| !v.is_empty()).count() < 2 {
                return Err(Error::Data(
                    "labeled pool needs at least two classes to draw inverse examples".into(),
                ));
            }
            Some(ClassIndex { labels, by_class })
        } else {
            None
        };
        Ok(Pools {
            labeled,
            unlabeled,
            classes,
            warned: AtomicBool::new(false),
        })
    }

    pub fn sample(&self, r: SampleRef) -> &Sample {
        match r {
            SampleRef::Labeled(i) => &self.labeled[i],
            SampleRef::Unlabeled(i) => &self.unlabeled[i],
        }
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn supervised(&self) -> bool {
        self.classes.is_some()
    }

    fn full_pool_draw<R: Rng>(&self, rng: &mut R) -> SampleRef {
        let i = rng.random_range(0..self.labeled.len() + self.unlabeled.len());
        if i < self.labeled.len() {
            SampleRef::Labeled(i)
        } else {
            SampleRef::Unlabeled(i - self.labeled.len())
        }
    }
}

/// Builds `(x1, x2, x3)` for one item.
///
/// Labeled items (when supervised): `x2` comes from another image of the
/// same class and `x3` from an image of a different class. Otherwise `x1`
/// and `x2` are two views of the item and `x3` views a uniform draw from
/// both pools.
pub fn compose_triple<R: Rng>(
    item: SampleRef,
    pools: &Pools<'_>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> TripleItem {
    let x = pools.sample(item);
    let (x2_source, x3_source, label) = match (item, &pools.classes) {
        (SampleRef::Labeled(i), Some(idx)) => {
            let class = idx.labels[i];
            let same = &idx.by_class[class];
            let x2 = if same.len() > 1 {
                let j = loop {
                    let j = same[rng.random_range(0..same.len())];
                    if j != i {
                        break j;
                    }
                };
                SampleRef::Labeled(j)
            } else {
                if !pools.warned.swap(true, Ordering::Relaxed) {
                    log::warn!(
                        "class {class} has a single labeled exemplar; its second view re-augments the same image"
                    );
                }
                item
            };
            let others = idx.labels.len() - same.len();
            let mut k = rng.random_range(0..others);
            let x3 = idx
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != class)
                .find_map(|(j, _)| {
                    if k == 0 {
                        Some(j)
                    } else {
                        k -= 1;
                        None
                    }
                })
                .expect("index below count");
            (x2, SampleRef::Labeled(x3), Some(class))
        }
        _ => (item, pools.full_pool_draw(rng), None),
    };
    let x1 = augment(&x.image, policy, rng);
    let x2 = augment(&pools.sample(x2_source).image, policy, rng);
    let x3 = augment(&pools.sample(x3_source).image, policy, rng);
    TripleItem {
        x1,
        x2,
        x3,
        labeled: label.is_some(),
        label,
        source: item,
        x2_source,
        x3_source,
    }
}

/// Deterministic epoch-by-epoch batch schedule over the training pools.
///
/// Labeled items are reshuffled every epoch; the last batch of an epoch
/// wraps around to the start of the shuffled order so that every batch has
/// the same composition. Unlabeled items follow one fixed permutation that
/// is walked round-robin across batches and epochs.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    cfg: RatioConfig,
    seed: u64,
    n_labeled: usize,
    unlabeled_order: Vec<usize>,
}

impl BatchSchedule {
    pub fn new(cfg: RatioConfig, n_labeled: usize, n_unlabeled: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_labeled == 0 {
            return Err(Error::config("labeled pool", "is empty"));
        }
        if n_unlabeled == 0 && cfg.unlabeled_per_batch() > 0 {
            return Err(Error::config("r", "unlabeled items requested but the unlabeled pool is empty"));
        }
        let mut unlabeled_order: Vec<usize> = (0..n_unlabeled).collect();
        unlabeled_order.shuffle(&mut derived_rng(seed, STREAM_UNLABELED_ORDER, 0));
        Ok(BatchSchedule {
            cfg,
            seed,
            n_labeled,
            unlabeled_order,
        })
    }

    pub fn config(&self) -> &RatioConfig {
        &self.cfg
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.cfg.batches_per_epoch(self.n_labeled)
    }

    /// Pre-repetition items of every batch of `epoch`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<SampleRef>> {
        let mut order: Vec<usize> = (0..self.n_labeled).collect();
        order.shuffle(&mut derived_rng(self.seed, STREAM_LABELED_ORDER, epoch as u64));
        let per_l = self.cfg.labeled_per_batch();
        let per_u = self.cfg.unlabeled_per_batch();
        let n_batches = self.batches_per_epoch();
        (0..n_batches)
            .map(|b| {
                let mut items: Vec<SampleRef> = (0..per_l)
                    .map(|j| SampleRef::Labeled(order[(b * per_l + j) % self.n_labeled]))
                    .collect();
                let cursor = (epoch * n_batches + b) * per_u;
                items.extend((0..per_u).map(|j| {
                    SampleRef::Unlabeled(self.unlabeled_order[(cursor + j) % self.unlabeled_order.len()])
                }));
                items
            })
            .collect()
    }

    /// Expands one scheduled batch into triples, `repetitions` fresh draws per
    /// item. `global_index` keys the batch's random stream.
    pub fn materialize(
        &self,
        items: &[SampleRef],
        pools: &Pools<'_>,
        policy: &AugmentationPolicy,
        global_index: u64,
    ) -> Vec<TripleItem> {
        let mut rng = derived_rng(self.seed, STREAM_BATCH, global_index);
        items
            .iter()
            .flat_map(|&item| std::iter::repeat_n(item, self.cfg.repetitions))
            .map(|item| compose_triple(item, pools, policy, &mut rng))
            .collect()
    }
}

/// All batches of one epoch, fully materialized.
pub fn make_batches(
    schedule: &BatchSchedule,
    pools: &Pools<'_>,
    policy: &AugmentationPolicy,
    epoch: usize,
) -> Vec<Vec<TripleItem>> {
    let per_epoch = schedule.batches_per_epoch();
    schedule
        .epoch(epoch)
        .iter()
        .enumerate()
        .map(|(b, items)| schedule.materialize(items, pools, policy, (epoch * per_epoch + b) as u64))
        .collect()
}
