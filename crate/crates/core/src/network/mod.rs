//! Backbone plus multi-head classifier.
//!
//! One feature extractor feeds `heads_per_type` normal heads of width `k_gt`
//! and `heads_per_type` overclustering heads of width `k`. Each head is a
//! single fully connected layer followed by a soft-max.

pub mod backbone;
pub mod container;
pub mod layers;
pub mod optim;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seeding::{derived_rng, STREAM_INIT};
pub use backbone::{Backbone, BackboneCache, BackboneKind};
use container::Container;
use layers::{Act, Linear, Param};

/// Soft-max outputs are floored here so that downstream logarithms stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadType {
    Normal,
    Overcluster,
}

impl HeadType {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadType::Normal => "normal",
            HeadType::Overcluster => "overcluster",
        }
    }
}

impl std::fmt::Display for HeadType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training-phase marker stored alongside weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    WarmUp,
    HeadFinetune,
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::WarmUp => "warm-up",
            Phase::HeadFinetune => "head-finetune",
            Phase::Main => "main",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// 1 for grayscale, 2 for sobel, 3 for color.
    pub input_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub k_gt: usize,
    /// Overclustering width; must exceed `k_gt`.
    pub k: usize,
    pub heads_per_type: usize,
}

impl ModelConfig {
    /// Overclustering width used when none is configured.
    pub fn default_k(k_gt: usize) -> usize {
        6 * k_gt
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_gt < 1 {
            return Err(Error::config("k_gt", "need at least one class"));
        }
        if self.k <= self.k_gt {
            return Err(Error::config(
                "k",
                format!("overclustering width {} must exceed k_gt = {}", self.k, self.k_gt),
            ));
        }
        if self.heads_per_type < 1 {
            return Err(Error::config("heads_per_type", "must be at least 1"));
        }
        if self.input_channels < 1 {
            return Err(Error::config("input_channels", "must be at least 1"));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return Err(Error::config("image_size", "images must be at least 8x8"));
        }
        Ok(())
    }

    pub fn head_width(&self, head_type: HeadType) -> usize {
        match head_type {
            HeadType::Normal => self.k_gt,
            HeadType::Overcluster => self.k,
        }
    }
}

/// Per-channel input standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation of every channel over all pixels of `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>, channels: usize) -> Self {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for img in images {
            for (c, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in img.plane(c) {
                    *s += f64::from(v);
                    *q += f64::from(v) * f64::from(v);
                }
            }
            count += img.height() * img.width();
        }
        if count == 0 {
            return Self::identity(channels);
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| (q / n - (s / n) * (s / n)).max(0.0).sqrt().max(1e-6) as f32)
            .collect();
        Normalization { mean, std }
    }
}

/// Soft-max outputs of every head for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub normal: Vec<Vec<f64>>,
    pub overcluster: Vec<Vec<f64>>,
}

/// Numerically stable soft-max in `f64`, floored at [`PROB_FLOOR`].
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| f64::from(z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total).max(PROB_FLOOR)).collect()
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    normalization: Normalization,
    backbone: Backbone,
    normal_heads: Vec<Linear>,
    overcluster_heads: Vec<Linear>,
    phase: Option<Phase>,
}

/// Builds a randomly initialized model; identical seeds give identical parameters.
pub fn build_network(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = derived_rng(seed, STREAM_INIT, 0);
    let backbone = Backbone::new(config.backbone, config.input_channels, &mut rng);
    let dim = backbone.feature_dim();
    let make_heads = |head_type: HeadType, offset: u64| -> Vec<Linear> {
        (0..config.heads_per_type)
            .map(|j| {
                let mut rng = derived_rng(seed, STREAM_INIT, offset + j as u64);
                Linear::new(
                    &format!("head.{}.{j}", head_type.as_str()),
                    dim,
                    config.head_width(head_type),
                    &mut rng,
                )
            })
            .collect()
    };
    Ok(Model {
        normal_heads: make_heads(HeadType::Normal, 1),
        overcluster_heads: make_heads(HeadType::Overcluster, 1 + config.heads_per_type as u64),
        config: config.clone(),
        normalization: Normalization::identity(config.input_channels),
        backbone,
        phase: None,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, normalization: Normalization) -> Result<()> {
        if normalization.mean.len() != self.config.input_channels
            || normalization.std.len() != self.config.input_channels
        {
            return Err(Error::invalid("normalization statistics do not match input channels"));
        }
        self.normalization = normalization;
        Ok(())
    }

    pub fn phase(&self) -> Option<Phase> {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = Some(phase);
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn heads(&self, head_type: HeadType) -> &[Linear] {
        match head_type {
            HeadType::Normal => &self.normal_heads,
            HeadType::Overcluster => &self.overcluster_heads,
        }
    }

    pub fn heads_mut(&mut self, head_type: HeadType) -> &mut [Linear] {
        match head_type {
            HeadType::Normal => &mut self.normal_heads,
            HeadType::Overcluster => &mut self.overcluster_heads,
        }
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    pub fn backbone_params_mut(&mut self) -> Vec<&mut Param> {
        self.backbone.params_mut()
    }

    pub fn head_params_mut(&mut self, head_type: HeadType) -> Vec<&mut Param> {
        self.heads_mut(head_type)
            .iter_mut()
            .flat_map(|h| [&mut h.weight, &mut h.bias])
            .collect()
    }

    /// Parameters touched by a step on `head_type`.
    pub fn step_params_mut(&mut self, head_type: HeadType, with_backbone: bool) -> Vec<&mut Param> {
        let heads = match head_type {
            HeadType::Normal => &mut self.normal_heads,
            HeadType::Overcluster => &mut self.overcluster_heads,
        };
        let mut out: Vec<&mut Param> = heads
            .iter_mut()
            .flat_map(|h| [&mut h.weight, &mut h.bias])
            .collect();
        if with_backbone {
            out.extend(self.backbone.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.backbone.params();
        for h in self.normal_heads.iter().chain(&self.overcluster_heads) {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.backbone.params_mut();
        for h in self.normal_heads.iter_mut().chain(self.overcluster_heads.iter_mut()) {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Stacks images into a normalized `C x N x H x W` batch.
    pub fn pack_inputs(&self, images: &[&Image]) -> Result<Act> {
        let (c, h, w) = (
            self.config.input_channels,
            self.config.image_height,
            self.config.image_width,
        );
        let n = images.len();
        let mut act = Act::zeros(c, n, h, w);
        for (i, img) in images.iter().enumerate() {
            if img.dims() != (c, h, w) {
                return Err(Error::invalid(format!(
                    "image {i} has shape {:?}, model expects {:?}",
                    img.dims(),
                    (c, h, w)
                )));
            }
            for ch in 0..c {
                let (m, s) = (self.normalization.mean[ch], self.normalization.std[ch]);
                let dst = &mut act.data[(ch * n + i) * h * w..][..h * w];
                for (d, &v) in dst.iter_mut().zip(img.plane(ch)) {
                    *d = (v - m) / s;
                }
            }
        }
        Ok(act)
    }

    /// Pooled features plus the cache needed for a backward pass.
    pub fn forward_features(&self, images: &[&Image]) -> Result<(Vec<f32>, BackboneCache)> {
        let x = self.pack_inputs(images)?;
        Ok(self.backbone.forward(x))
    }

    /// Soft-max outputs of every head for every image.
    pub fn forward_heads(&self, images: &[&Image]) -> Result<Vec<HeadOutputs>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let (features, _) = self.forward_features(chunk)?;
            let n = chunk.len();
            let per_head = |heads: &[Linear]| -> Vec<Vec<f32>> {
                heads.iter().map(|h| h.forward(&features, n)).collect()
            };
            let normal = per_head(&self.normal_heads);
            let over = per_head(&self.overcluster_heads);
            for i in 0..n {
                let rows = |logits: &[Vec<f32>], width: usize| -> Vec<Vec<f64>> {
                    logits
                        .iter()
                        .map(|l| softmax(&l[i * width..(i + 1) * width]))
                        .collect()
                };
                out.push(HeadOutputs {
                    normal: rows(&normal, self.config.k_gt),
                    overcluster: rows(&over, self.config.k),
                });
            }
        }
        Ok(out)
    }

    /// Arg-max prediction of every head: `[head][image]`.
    pub fn predict(&self, images: &[&Image]) -> Result<Predictions> {
        let outputs = self.forward_heads(images)?;
        let collect = |pick: &dyn Fn(&HeadOutputs) -> &Vec<Vec<f64>>| -> Vec<Vec<usize>> {
            (0..self.config.heads_per_type)
                .map(|j| outputs.iter().map(|o| argmax(&pick(o)[j])).collect())
                .collect()
        };
        Ok(Predictions {
            normal: collect(&|o| &o.normal),
            overcluster: collect(&|o| &o.overcluster),
        })
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "model": self.config,
            "normalization": self.normalization,
            "phase": self.phase,
        });
        let mut c = Container::new("model", meta);
        for p in self.params() {
            c.insert(p.name.clone(), p.shape.clone(), p.value.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("model")?;
        let field = |k: &str| c.metadata.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let config: ModelConfig = serde_json::from_value(field("model"))
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let normalization: Normalization = serde_json::from_value(field("normalization"))
            .map_err(|e| Error::Checkpoint(format!("normalization: {e}")))?;
        let phase: Option<Phase> = serde_json::from_value(field("phase"))
            .map_err(|e| Error::Checkpoint(format!("phase marker: {e}")))?;
        let mut model = build_network(&config, 0)?;
        model.set_normalization(normalization)?;
        model.phase = phase;
        model.load_params(c, |_| true)?;
        Ok(model)
    }

    /// Copies every matching parameter from `c`; a missing tensor or shape
    /// disagreement is an architecture mismatch.
    fn load_params(&mut self, c: &Container, select: impl Fn(&str) -> bool) -> Result<()> {
        for p in self.params_mut() {
            if !select(&p.name) {
                continue;
            }
            let t = c.tensors.get(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("architecture mismatch: checkpoint lacks `{}`", p.name))
            })?;
            if t.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: `{}` has shape {:?} in checkpoint, model expects {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Replaces backbone weights with those of a compatible checkpoint.
    pub fn load_backbone_from(&mut self, path: &Path) -> Result<()> {
        let c = Container::load(path)?;
        c.expect_kind("model")?;
        self.load_params(&c, |name| name.starts_with("backbone."))
    }

    /// Copies all parameter values from a model with the same architecture.
    pub fn copy_params_from(&mut self, other: &Model) -> Result<()> {
        if self.config != other.config {
            return Err(Error::invalid("cannot copy parameters between different architectures"));
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value.copy_from_slice(&src.value);
        }
        self.normalization = other.normalization.clone();
        self.phase = other.phase;
        Ok(())
    }
}

/// Arg-max class of each image under each head.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub normal: Vec<Vec<usize>>,
    pub overcluster: Vec<Vec<usize>>,
}

impl Predictions {
    pub fn head(&self, head_type: HeadType, index: usize) -> &[usize] {
        match head_type {
            HeadType::Normal => &self.normal[index],
            HeadType::Overcluster => &self.overcluster[index],
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(k_gt: usize, k: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneKind::TinyConv,
            input_channels: 3,
            image_height: 16,
            image_width: 16,
            k_gt,
            k,
            heads_per_type: heads,
        }
    }

    fn random_images(n: usize, seed: u64) -> Vec<Image> {
        let mut rng = derived_rng(seed, 99, 0);
        (0..n)
            .map(|_| {
                let data = (0..3 * 16 * 16).map(|_| rng.random::<f32>()).collect();
                Image::from_planar(3, 16, 16, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn output_widths_and_counts() {
        let model = build_network(&cfg(6, 36, 5), 1).unwrap();
        let imgs = random_images(3, 0);
        let refs: Vec<&Image> = imgs.iter().collect();
        let out = model.forward_heads(&refs).unwrap();
        assert_eq!(out.len(), 3);
        for o in &out {
            assert_eq!(o.normal.len(), 5);
            assert_eq!(o.overcluster.len(), 5);
            assert!(o.normal.iter().all(|v| v.len() == 6));
            assert!(o.overcluster.iter().all(|v| v.len() == 36));
            for v in o.normal.iter().chain(&o.overcluster) {
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(v.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn rejects_k_not_above_k_gt() {
        assert!(build_network(&cfg(6, 6, 1), 0).is_err());
        assert!(build_network(&cfg(6, 3, 1), 0).is_err());
        assert!(build_network(&cfg(6, 7, 0), 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(&cfg(3, 9, 2), 42).unwrap();
        let b = build_network(&cfg(3, 9, 2), 42).unwrap();
        let c = build_network(&cfg(3, 9, 2), 43).unwrap();
        let values = |m: &Model| m.params().iter().flat_map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn heads_are_independently_initialized() {
        let m = build_network(&cfg(3, 9, 3), 5).unwrap();
        let h = m.heads(HeadType::Normal);
        assert_ne!(h[0].weight.value, h[1].weight.value);
    }

    #[test]
    fn duplicated_inputs_give_identical_rows() {
        let model = build_network(&cfg(4, 12, 2), 3).unwrap();
        let imgs = random_images(2, 1);
        let refs = vec![&imgs[0], &imgs[1], &imgs[0], &imgs[1], &imgs[0]];
        let out = model.forward_heads(&refs).unwrap();
        assert_eq!(out[0], out[2]);
        assert_eq!(out[0], out[4]);
        assert_eq!(out[1], out[3]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = build_network(&cfg(4, 12, 1), 3).unwrap();
        let wrong = Image::zeros(1, 16, 16);
        assert!(model.forward_heads(&[&wrong]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_network(&cfg(4, 12, 2), 9).unwrap();
        model.set_phase(Phase::Main);
        model
            .set_normalization(Normalization {
                mean: vec![0.1, 0.2, 0.3],
                std: vec![1.0, 2.0, 3.0],
            })
            .unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.normalization(), model.normalization());
        assert_eq!(back.phase(), Some(Phase::Main));
        let imgs = random_images(2, 4);
        let refs: Vec<&Image> = imgs.iter().collect();
        assert_eq!(back.forward_heads(&refs).unwrap(), model.forward_heads(&refs).unwrap());

        let mut other = build_network(&cfg(4, 20, 2), 9).unwrap();
        let err = other.load_params(&model.to_container(), |_| true).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"), "{err}");
        // backbone-only loading ignores head widths
        other.load_backbone_from(&path).unwrap();
    }

    #[test]
    fn residual_backbone_runs() {
        let mut c = cfg(3, 9, 1);
        c.backbone = BackboneKind::Residual;
        let model = build_network(&c, 0).unwrap();
        let imgs = random_images(2, 2);
        let refs: Vec<&Image> = imgs.iter().collect();
        let out = model.forward_heads(&refs).unwrap();
        assert!((out[0].overcluster[0].iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }
}
