//! Generates a small synthetic colored-ellipse dataset and shows how hue
//! and axis ratio turn into fuzzy labels.
//!
//! cargo run --release --example synce_dataset -- /tmp/synce-demo

use std::path::PathBuf;

use foc::synce::{
    build_synce, color_distribution, fuzzy_label, geometry_distribution, read_meta, render_bubble, BubbleParams,
    SynceConfig, CLASS_NAMES, META_FILE,
};

fn main() -> foc::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("synce-demo"), PathBuf::from);

    for (hue, ratio) in [(0.0, 1.0), (60.0, 1.0), (120.0, 1.5), (200.0, 1.8)] {
        let label = fuzzy_label(color_distribution(hue), geometry_distribution(ratio)?);
        let parts: Vec<String> = CLASS_NAMES
            .iter()
            .zip(label.probs())
            .filter(|(_, p)| **p > 0.0)
            .map(|(n, p)| format!("{n} {p:.2}"))
            .collect();
        println!("hue {hue:>5} ratio {ratio:.1}: {}", parts.join(", "));
    }

    let params = BubbleParams {
        hue: 30.0,
        axis_ratio: 1.6,
        center: (16.0, 16.0),
        semi_minor_axis: 6.0,
        rotation: 45.0,
    };
    std::fs::create_dir_all(&out).expect("output directory");
    render_bubble(&params, 32)?.save_png(&out.join("single_bubble.png"))?;

    let summary = build_synce(
        &SynceConfig {
            certain_count: 60,
            fuzzy_count: 30,
            image_size: 32,
            seed: 7,
        },
        &out,
    )?;
    println!("\n{} images written to {}", summary.images, summary.out_dir.display());
    for (kind, [train, val, unlabeled]) in &summary.manifests {
        println!("  {:<6} train {train:>3}  val {val:>3}  unlabeled {unlabeled:>3}", kind.as_str());
    }
    let meta = read_meta(&out.join(META_FILE))?;
    let fuzzy = meta.iter().filter(|m| m.label.iter().all(|&p| p < 1.0)).count();
    println!("{fuzzy} of {} images carry a fuzzy label", meta.len());
    Ok(())
}
