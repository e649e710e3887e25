//! Synthetic colored bubbles with analytic fuzzy labels.
//!
//! Classes, in order: red-circle, green-circle, blue-circle, red-ellipse,
//! green-ellipse, blue-ellipse. Hue interpolates between the red/green/blue
//! anchors and the axis ratio between circle (1) and ellipse (2).

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{hard_label, LabelDistribution, ManifestRow, SplitHint};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seeding::{derived_rng, STREAM_SYNCE_IMAGE, STREAM_SYNCE_REAL_LABEL};

pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "red-circle",
    "green-circle",
    "blue-circle",
    "red-ellipse",
    "green-ellipse",
    "blue-ellipse",
];
const ANCHORS: [f64; 3] = [0.0, 120.0, 240.0];
/// Votes per image used to carry soft labels through the manifest format.
pub const VOTE_SCALE: f64 = 1000.0;
/// Semi-minor axis range as a fraction of the image width.
const SEMI_MINOR_RANGE: (f64, f64) = (0.12, 0.22);
/// Side length of the supersampling grid per pixel.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynSubsetKind {
    Ideal,
    Real,
    Fuzzy,
}

impl SynSubsetKind {
    pub const ALL: [SynSubsetKind; 3] = [SynSubsetKind::Ideal, SynSubsetKind::Real, SynSubsetKind::Fuzzy];

    pub fn as_str(self) -> &'static str {
        match self {
            SynSubsetKind::Ideal => "ideal",
            SynSubsetKind::Real => "real",
            SynSubsetKind::Fuzzy => "fuzzy",
        }
    }

    /// Manifest file name inside a generated dataset directory.
    pub fn manifest_name(self) -> String {
        format!("{}.csv", self.as_str())
    }
}

impl std::str::FromStr for SynSubsetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ideal" => Ok(SynSubsetKind::Ideal),
            "real" => Ok(SynSubsetKind::Real),
            "fuzzy" => Ok(SynSubsetKind::Fuzzy),
            other => Err(format!("unknown subset `{other}` (expected ideal, real or fuzzy)")),
        }
    }
}

/// Name of the manifest holding only images of the generated unlabeled
/// split; identical for all subsets.
pub const HOLDOUT_MANIFEST: &str = "holdout.csv";
pub const META_FILE: &str = "synce_meta.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleParams {
    /// Degrees in `[0, 360)`.
    pub hue: f64,
    /// Major over minor axis, in `[1, 2]`.
    pub axis_ratio: f64,
    /// `(row, col)` in pixel units, pixel `(r, c)` spanning `[r, r+1) x [c, c+1)`.
    pub center: (f64, f64),
    pub semi_minor_axis: f64,
    /// Degrees in `[0, 180)`.
    pub rotation: f64,
}

impl BubbleParams {
    pub fn semi_major_axis(&self) -> f64 {
        self.semi_minor_axis * self.axis_ratio
    }

    /// Half extents `(rows, cols)` of the rotated bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        half_extents(self.semi_major_axis(), self.semi_minor_axis, self.rotation)
    }
}

fn half_extents(a: f64, b: f64, rotation_deg: f64) -> (f64, f64) {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let cols = (a * a * c * c + b * b * s * s).sqrt();
    let rows = (a * a * s * s + b * b * c * c).sqrt();
    (rows, cols)
}

/// Red/green/blue membership of a hue by linear interpolation between anchors.
pub fn color_distribution(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0);
    let seg = ((h / 120.0).floor() as usize).min(2);
    let t = (h - ANCHORS[seg]) / 120.0;
    let mut out = [0.0; 3];
    out[seg] = 1.0 - t;
    out[(seg + 1) % 3] += t;
    out
}

/// Circle/ellipse membership of an axis ratio.
pub fn geometry_distribution(axis_ratio: f64) -> Result<[f64; 2]> {
    if !(1.0..=2.0).contains(&axis_ratio) {
        return Err(Error::invalid(format!("axis ratio {axis_ratio} outside [1, 2]")));
    }
    Ok([2.0 - axis_ratio, axis_ratio - 1.0])
}

/// Flattened outer product in class order.
pub fn fuzzy_label(p_c: [f64; 3], p_g: [f64; 2]) -> LabelDistribution {
    let probs = p_g
        .iter()
        .flat_map(|g| p_c.iter().map(move |c| c * g))
        .collect();
    LabelDistribution::new(probs).expect("product of distributions is a distribution")
}

/// Full-saturation, full-value RGB color of a hue.
pub fn hue_to_rgb(hue: f64) -> [f32; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r as f32, g as f32, b as f32]
}

/// Filled ellipse on black; edge pixels are shaded by supersampled coverage.
pub fn render_bubble(params: &BubbleParams, image_size: usize) -> Result<Image> {
    geometry_distribution(params.axis_ratio)?;
    if !(0.0..360.0).contains(&params.hue) || params.semi_minor_axis <= 0.0 {
        return Err(Error::invalid(format!("invalid bubble parameters {params:?}")));
    }
    let (er, ec) = params.half_extents();
    let (cr, cc) = params.center;
    let size = image_size as f64;
    if cr - er < 0.0 || cr + er > size || cc - ec < 0.0 || cc + ec > size {
        return Err(Error::invalid(format!(
            "bubble {params:?} does not fit in a {image_size}x{image_size} image"
        )));
    }
    let a = params.semi_major_axis();
    let b = params.semi_minor_axis;
    let (s, c) = params.rotation.to_radians().sin_cos();
    let color = hue_to_rgb(params.hue);
    let mut img = Image::zeros(3, image_size, image_size);
    let r0 = (cr - er).floor().max(0.0) as usize;
    let r1 = ((cr + er).ceil() as usize).min(image_size);
    let c0 = (cc - ec).floor().max(0.0) as usize;
    let c1 = ((cc + ec).ceil() as usize).min(image_size);
    let step = 1.0 / SUPERSAMPLE as f64;
    for row in r0..r1 {
        for col in c0..c1 {
            let mut hits = 0usize;
            for i in 0..SUPERSAMPLE {
                for j in 0..SUPERSAMPLE {
                    let y = row as f64 + (i as f64 + 0.5) * step - cr;
                    let x = col as f64 + (j as f64 + 0.5) * step - cc;
                    let u = x * c + y * s;
                    let v = -x * s + y * c;
                    if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cover = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for (ch, &v) in color.iter().enumerate() {
                    img.set(ch, row, col, v * cover);
                }
            }
        }
    }
    Ok(img)
}

/// Class drawn with probability `l[c]`.
pub fn sample_real_label<R: Rng>(l: &LabelDistribution, rng: &mut R) -> usize {
    WeightedIndex::new(l.probs())
        .expect("label distribution has positive mass")
        .sample(rng)
}

/// Random placement of a bubble with the given hue and ratio, kept one pixel
/// away from the border.
pub fn place_bubble<R: Rng>(hue: f64, axis_ratio: f64, image_size: usize, rng: &mut R) -> BubbleParams {
    let size = image_size as f64;
    let max_b = ((size / 2.0 - 1.0) / axis_ratio).max(0.5);
    let lo = (SEMI_MINOR_RANGE.0 * size).min(max_b * 0.999);
    let hi = (SEMI_MINOR_RANGE.1 * size).min(max_b * 0.999);
    let b = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let rotation = rng.random_range(0.0..180.0);
    let (er, ec) = half_extents(b * axis_ratio, b, rotation);
    let mut center = |e: f64| {
        let fit = (e + 1.0, size - 1.0 - e);
        let inner = (fit.0.max(0.2 * size), fit.1.min(0.8 * size));
        let (lo, hi) = if inner.1 > inner.0 { inner } else { fit };
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            size / 2.0
        }
    };
    let center = (center(er), center(ec));
    BubbleParams {
        hue,
        axis_ratio,
        center,
        semi_minor_axis: b,
        rotation,
    }
}

/// Generation settings; counts are per split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynceConfig {
    pub certain_count: usize,
    pub fuzzy_count: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynceConfig {
    fn default() -> Self {
        SynceConfig {
            certain_count: 1800,
            fuzzy_count: 1000,
            image_size: 32,
            seed: 0,
        }
    }
}

/// Ground truth of one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynceImage {
    pub path: String,
    pub split: SplitHint,
    pub certain: bool,
    pub params: BubbleParams,
    pub label: LabelDistribution,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynceSummary {
    pub out_dir: PathBuf,
    pub images: usize,
    /// Row counts per manifest split `(train, val, unlabeled)` for each subset.
    pub manifests: Vec<(SynSubsetKind, [usize; 3])>,
}

const SPLITS: [SplitHint; 3] = [SplitHint::Train, SplitHint::Val, SplitHint::Unlabeled];

/// Parameters of image `index` in `split`, drawn from its own seed.
fn generate_params(cfg: &SynceConfig, split_id: usize, index: usize) -> (BubbleParams, bool) {
    let mut rng = derived_rng(cfg.seed, STREAM_SYNCE_IMAGE, ((split_id as u64) << 32) | index as u64);
    let (hue, ratio, certain) = if index < cfg.certain_count {
        let class = certain_class(index, cfg.certain_count);
        (ANCHORS[class % 3], 1.0 + (class / 3) as f64, true)
    } else {
        let hue = loop {
            let h: f64 = rng.random_range(0.0..360.0);
            if !ANCHORS.contains(&h) {
                break h;
            }
        };
        let ratio = loop {
            let r: f64 = rng.random_range(1.0..2.0);
            if r > 1.0 {
                break r;
            }
        };
        (hue, ratio, false)
    };
    (place_bubble(hue, ratio, cfg.image_size, &mut rng), certain)
}

/// Class of the `index`-th certain image, balancing the six classes up to
/// one image.
fn certain_class(index: usize, count: usize) -> usize {
    let base = count / NUM_CLASSES;
    let extra = count % NUM_CLASSES;
    let mut start = 0;
    for class in 0..NUM_CLASSES {
        let n = base + usize::from(class < extra);
        if index < start + n {
            return class;
        }
        start += n;
    }
    unreachable!("index below count")
}

/// Integer votes encoding a soft label. A fuzzy label never rounds to a
/// one-hot vote vector.
pub fn encode_votes(l: &LabelDistribution, certain: bool) -> Vec<u64> {
    let mut votes: Vec<u64> = l.probs().iter().map(|p| (p * VOTE_SCALE).round() as u64).collect();
    if !certain && votes.iter().filter(|&&v| v > 0).count() < 2 {
        let top = hard_label(l);
        let second = (0..votes.len())
            .filter(|&c| c != top)
            .max_by(|&x, &y| l.probs()[x].total_cmp(&l.probs()[y]).then(y.cmp(&x)))
            .expect("at least two classes");
        votes[second] = 1;
    }
    votes
}

fn one_hot_votes(class: usize) -> Vec<u64> {
    let mut v = vec![0; NUM_CLASSES];
    v[class] = VOTE_SCALE as u64;
    v
}

/// Describes every image without rendering anything.
pub fn plan_synce(cfg: &SynceConfig) -> Result<Vec<SynceImage>> {
    if cfg.image_size < 8 {
        return Err(Error::config("image_size", "must be at least 8"));
    }
    if cfg.certain_count + cfg.fuzzy_count == 0 {
        return Err(Error::config("counts", "nothing to generate"));
    }
    let mut out = Vec::new();
    for (split_id, split) in SPLITS.iter().enumerate() {
        for index in 0..cfg.certain_count + cfg.fuzzy_count {
            let (params, certain) = generate_params(cfg, split_id, index);
            let label = fuzzy_label(
                color_distribution(params.hue),
                geometry_distribution(params.axis_ratio)?,
            );
            out.push(SynceImage {
                path: format!("images/{0}/{0}_{index:05}.png", split.as_str()),
                split: *split,
                certain,
                params,
                label,
            });
        }
    }
    Ok(out)
}

/// Manifest rows of one subset.
pub fn subset_rows(images: &[SynceImage], kind: SynSubsetKind, seed: u64) -> Vec<ManifestRow> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let soft = encode_votes(&img.label, img.certain);
            let (split, votes) = match (img.split, img.certain, kind) {
                (SplitHint::Unlabeled, _, _) | (_, true, _) => (img.split, soft),
                (SplitHint::Train, false, SynSubsetKind::Fuzzy) => (SplitHint::Unlabeled, soft),
                (_, false, SynSubsetKind::Fuzzy) => (img.split, soft),
                (_, false, SynSubsetKind::Ideal) => (img.split, one_hot_votes(hard_label(&img.label))),
                (_, false, SynSubsetKind::Real) => {
                    let mut rng = derived_rng(seed, STREAM_SYNCE_REAL_LABEL, i as u64);
                    (img.split, one_hot_votes(sample_real_label(&img.label, &mut rng)))
                }
            };
            ManifestRow {
                path: img.path.clone(),
                split,
                votes,
            }
        })
        .collect()
}

/// Renders all images and writes the subset manifests, the hold-out
/// manifest and the per-image ground-truth table.
pub fn build_synce(cfg: &SynceConfig, out_dir: &Path) -> Result<SynceSummary> {
    if cfg.certain_count % NUM_CLASSES != 0 {
        log::warn!(
            "certain_count {} is not divisible by {NUM_CLASSES}; classes are balanced up to one image",
            cfg.certain_count
        );
    }
    let images = plan_synce(cfg)?;
    for split in SPLITS {
        let dir = out_dir.join("images").join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for img in &images {
        render_bubble(&img.params, cfg.image_size)?.save_png(&out_dir.join(&img.path))?;
    }
    let mut manifests = Vec::new();
    for kind in SynSubsetKind::ALL {
        let rows = subset_rows(&images, kind, cfg.seed);
        let mut counts = [0; 3];
        for r in &rows {
            counts[SPLITS.iter().position(|s| *s == r.split).expect("known split")] += 1;
        }
        crate::data::write_manifest(&out_dir.join(kind.manifest_name()), NUM_CLASSES, &rows)?;
        manifests.push((kind, counts));
    }
    let holdout: Vec<ManifestRow> = subset_rows(&images, SynSubsetKind::Fuzzy, cfg.seed)
        .into_iter()
        .zip(&images)
        .filter(|(_, img)| img.split == SplitHint::Unlabeled)
        .map(|(r, _)| r)
        .collect();
    crate::data::write_manifest(&out_dir.join(HOLDOUT_MANIFEST), NUM_CLASSES, &holdout)?;
    write_meta(&out_dir.join(META_FILE), &images)?;
    Ok(SynceSummary {
        out_dir: out_dir.to_path_buf(),
        images: images.len(),
        manifests,
    })
}

fn write_meta(path: &Path, images: &[SynceImage]) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["path".to_string(), "hue".into(), "axis_ratio".into()];
    header.extend((0..NUM_CLASSES).map(|c| format!("l_{c}")));
    w.write_record(&header).map_err(err)?;
    for img in images {
        let mut rec = vec![
            img.path.clone(),
            format!("{:.6}", img.params.hue),
            format!("{:.6}", img.params.axis_ratio),
        ];
        rec.extend(img.label.probs().iter().map(|p| format!("{p:.6}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of `synce_meta.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRow {
    pub path: String,
    pub hue: f64,
    pub axis_ratio: f64,
    pub label: Vec<f64>,
}

pub fn read_meta(path: &Path) -> Result<Vec<MetaRow>> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(err)?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::ManifestRow {
                    path: path.to_path_buf(),
                    row: i + 2,
                    message: format!("column {j} is not a number"),
                })
        };
        out.push(MetaRow {
            path: rec.get(0).unwrap_or_default().to_string(),
            hue: num(1)?,
            axis_ratio: num(2)?,
            label: (0..NUM_CLASSES).map(|c| num(3 + c)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn color_examples() {
        assert_eq!(color_distribution(0.0), [1.0, 0.0, 0.0]);
        assert_eq!(color_distribution(60.0), [0.5, 0.5, 0.0]);
        assert_eq!(color_distribution(300.0), [0.5, 0.0, 0.5]);
        assert_eq!(color_distribution(120.0), [0.0, 1.0, 0.0]);
        assert_eq!(color_distribution(240.0), [0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(color_distribution(90.0)[1], 0.75);
    }

    #[test]
    fn geometry_examples() {
        assert_eq!(geometry_distribution(1.0).unwrap(), [1.0, 0.0]);
        assert_eq!(geometry_distribution(2.0).unwrap(), [0.0, 1.0]);
        assert_eq!(geometry_distribution(1.5).unwrap(), [0.5, 0.5]);
        assert!(geometry_distribution(0.9).is_err());
        assert!(geometry_distribution(2.1).is_err());
    }

    #[test]
    fn label_examples() {
        assert_eq!(fuzzy_label([1.0, 0.0, 0.0], [1.0, 0.0]).probs(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            fuzzy_label([0.5, 0.5, 0.0], [0.5, 0.5]).probs(),
            &[0.25, 0.25, 0.0, 0.25, 0.25, 0.0]
        );
        assert_eq!(
            fuzzy_label([0.75, 0.25, 0.0], [1.0, 0.0]).probs(),
            &[0.75, 0.25, 0.0, 0.0, 0.0, 0.0]
        );
    }

    fn params(hue: f64, ratio: f64) -> BubbleParams {
        BubbleParams {
            hue,
            axis_ratio: ratio,
            center: (16.0, 16.0),
            semi_minor_axis: 5.0,
            rotation: 0.0,
        }
    }

    #[test]
    fn red_disc_is_pure_red() {
        let img = render_bubble(&params(0.0, 1.0), 32).unwrap();
        let mut lit = 0;
        for r in 0..32 {
            for c in 0..32 {
                let (red, g, b) = (img.get(0, r, c), img.get(1, r, c), img.get(2, r, c));
                assert_eq!((g, b), (0.0, 0.0));
                if red > 0.0 {
                    lit += 1;
                }
            }
        }
        // area of a radius-5 disc is about 78.5 px; edge pixels are partially covered
        assert!((70..=100).contains(&lit), "{lit}");
        assert_eq!(img.get(0, 16, 16), 1.0);
    }

    #[test]
    fn blue_ellipse_has_ratio_two() {
        let img = render_bubble(&params(240.0, 2.0), 32).unwrap();
        let row_extent = (0..32).filter(|&r| img.get(2, r, 16) > 0.5).count();
        let col_extent = (0..32).filter(|&c| img.get(2, 16, c) > 0.5).count();
        assert!((img.get(0, 16, 16), img.get(1, 16, 16)) == (0.0, 0.0));
        let ratio = col_extent as f64 / row_extent as f64;
        assert!((ratio - 2.0).abs() < 0.25, "{col_extent}/{row_extent}");
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let mut p = params(0.0, 2.0);
        p.center = (3.0, 3.0);
        assert!(render_bubble(&p, 32).is_err());
    }

    #[test]
    fn real_label_sampling() {
        let mut rng = derived_rng(1, 50, 0);
        let certain = LabelDistribution::one_hot(0, 6);
        assert!((0..100).all(|_| sample_real_label(&certain, &mut rng) == 0));
        let last = LabelDistribution::one_hot(5, 6);
        assert!((0..100).all(|_| sample_real_label(&last, &mut rng) == 5));
        let half = LabelDistribution::new(vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let zeros = (0..10_000).filter(|_| sample_real_label(&half, &mut rng) == 0).count();
        assert!((zeros as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn certain_classes_balanced() {
        let counts = |n: usize| {
            let mut c = [0; 6];
            (0..n).for_each(|i| c[certain_class(i, n)] += 1);
            c
        };
        assert_eq!(counts(18), [3; 6]);
        assert_eq!(counts(20), [4, 4, 3, 3, 3, 3]);
    }

    #[test]
    fn votes_keep_fuzzy_labels_fuzzy() {
        let l = LabelDistribution::new(vec![0.9998, 0.0002, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(encode_votes(&l, false), vec![1000, 1, 0, 0, 0, 0]);
        let l = LabelDistribution::new(vec![0.25, 0.25, 0.0, 0.25, 0.25, 0.0]).unwrap();
        assert_eq!(encode_votes(&l, false), vec![250, 250, 0, 250, 250, 0]);
    }

    #[test]
    fn plan_marks_certain_exactly_at_anchors() {
        let cfg = SynceConfig { certain_count: 12, fuzzy_count: 30, image_size: 32, seed: 4 };
        for img in plan_synce(&cfg).unwrap() {
            let at_anchor = ANCHORS.contains(&img.params.hue)
                && (img.params.axis_ratio == 1.0 || img.params.axis_ratio == 2.0);
            assert_eq!(img.certain, at_anchor);
            assert_eq!(img.label.is_certain(), img.certain);
            assert!(img.label.probs().iter().filter(|&&p| p > 0.0).count() <= 4);
            assert!(render_bubble(&img.params, 32).is_ok());
        }
    }

    #[test]
    fn tiny_images_still_fit() {
        let cfg = SynceConfig { certain_count: 6, fuzzy_count: 6, image_size: 8, seed: 1 };
        for img in plan_synce(&cfg).unwrap() {
            let r = render_bubble(&img.params, 8).unwrap();
            assert_eq!(r.get(0, 0, 0), 0.0);
        }
    }

    proptest! {
        #[test]
        fn labels_sum_to_one(hue in 0.0f64..360.0, ratio in 1.0f64..=2.0) {
            let l = fuzzy_label(color_distribution(hue), geometry_distribution(ratio).unwrap());
            prop_assert!((l.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(l.probs().iter().filter(|&&p| p > 0.0).count() <= 4);
        }

        #[test]
        fn color_is_continuous(hue in 0.0f64..359.99) {
            let a = color_distribution(hue);
            let b = color_distribution(hue + 0.01);
            for i in 0..3 {
                prop_assert!((a[i] - b[i]).abs() < 1e-3);
            }
        }

        #[test]
        fn placed_bubbles_fit_with_black_corners(seed in 0u64..500, hue in 0.0f64..360.0, ratio in 1.0f64..=2.0) {
            let mut rng = derived_rng(seed, 77, 0);
            let p = place_bubble(hue, ratio, 32, &mut rng);
            let img = render_bubble(&p, 32).unwrap();
            for (r, c) in [(0, 0), (0, 31), (31, 0), (31, 31)] {
                for ch in 0..3 {
                    prop_assert_eq!(img.get(ch, r, c), 0.0);
                }
            }
        }
    }
}
