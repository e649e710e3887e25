//! Builds training triples from a labeled and an unlabeled pool and shows
//! the fixed labeled/unlabeled ratio per batch.

use foc::data::{LabelDistribution, Sample};
use foc::image::Image;
use foc::sampler::{AugmentationPolicy, BatchSchedule, Pools, RatioConfig, SampleRef};

fn swatch(class: usize) -> Image {
    let mut img = Image::zeros(3, 16, 16);
    img.plane_mut(class % 3).iter_mut().for_each(|v| *v = 0.9);
    img
}

fn main() -> foc::Result<()> {
    let labeled: Vec<Sample> = (0..12)
        .map(|i| Sample::new(format!("l{i}"), swatch(i % 3), Some(LabelDistribution::one_hot(i % 3, 3))))
        .collect();
    let unlabeled: Vec<Sample> = (0..20).map(|i| Sample::new(format!("u{i}"), swatch(i % 3), None)).collect();

    let cfg = RatioConfig {
        r: 0.25,
        batch_size: 8,
        repetitions: 2,
    };
    let schedule = BatchSchedule::new(cfg, labeled.len(), unlabeled.len(), 3)?;
    let pools = Pools::new(&labeled, &unlabeled, true)?;
    let policy = AugmentationPolicy::default();
    println!(
        "{} labeled + {} unlabeled per batch, {} batches per epoch",
        cfg.labeled_per_batch(),
        cfg.unlabeled_per_batch(),
        schedule.batches_per_epoch()
    );

    let name = |r: SampleRef| pools.sample(r).id.clone();
    let batch = &schedule.epoch(0)[0];
    for t in schedule.materialize(batch, &pools, &policy, 0) {
        println!(
            "x1 from {:<4} x2 from {:<4} inverse x3 from {:<4} label {:?}",
            name(t.source),
            name(t.x2_source),
            name(t.x3_source),
            t.label
        );
    }
    Ok(())
}
