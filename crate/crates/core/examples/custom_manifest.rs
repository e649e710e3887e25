//! Loads a grayscale dataset described by a vote manifest. Rows marked
//! `auto` are split into labeled and validation samples by class.

use foc::data::{load_manifest, write_manifest, ManifestRow, PartitionConfig, SplitHint};
use foc::image::Image;

fn main() -> foc::Result<()> {
    let dir = std::env::temp_dir().join("foc-manifest-demo");
    std::fs::create_dir_all(dir.join("img")).expect("output directory");
    let k_gt = 4;
    let mut rows = Vec::new();
    for i in 0..40 {
        let class = i % k_gt;
        let mut img = Image::zeros(1, 24, 24);
        img.data_mut().iter_mut().for_each(|v| *v = class as f32 / k_gt as f32);
        let path = format!("img/{i:03}.png");
        img.save_png(&dir.join(&path))?;
        // Every fourth image has annotators disagreeing.
        let mut votes = vec![0; k_gt];
        votes[class] = 3;
        if i % 4 == 3 {
            votes[(class + 1) % k_gt] = 2;
        }
        rows.push(ManifestRow {
            path,
            split: SplitHint::Auto,
            votes,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, k_gt, &rows)?;
    println!("{}", std::fs::read_to_string(&manifest).expect("manifest").lines().take(3).collect::<Vec<_>>().join("\n"));

    let (k, split) = load_manifest(&dir, &manifest, &PartitionConfig { val_fraction: 0.25, seed: 1 })?;
    println!(
        "{k} classes: {} labeled, {} validation, {} unlabeled (fuzzy)",
        split.labeled.len(),
        split.validation.len(),
        split.unlabeled.len()
    );
    let fuzzy = &split.unlabeled[0];
    println!("{} has label {:?}", fuzzy.id, fuzzy.label().map(|l| l.probs().to_vec()));
    Ok(())
}
