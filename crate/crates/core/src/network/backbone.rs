//! Feature extractors: a plain strided conv stack and a small residual net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    add_in_place, global_avg_pool, global_avg_pool_backward, relu, relu_backward, Act, Conv2d,
    ConvCache, GroupNorm, GroupNormCache, Param,
};

const GROUPS: usize = 8;

/// Channel widths of the four stages.
pub const STAGE_WIDTHS: [usize; 4] = [32, 64, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    TinyConv,
    Residual,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny-conv" => Ok(BackboneKind::TinyConv),
            "residual" => Ok(BackboneKind::Residual),
            other => Err(format!("unknown backbone `{other}` (expected tiny-conv or residual)")),
        }
    }
}

/// conv -> group norm -> relu
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

pub struct ConvBlockCache {
    conv: ConvCache,
    norm: GroupNormCache,
    out: Act,
}

impl ConvBlock {
    fn new<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, stride, rng),
            norm: GroupNorm::new(&format!("{name}.norm"), cout, GROUPS),
        }
    }

    fn forward(&self, x: &Act) -> (Act, ConvBlockCache) {
        let (y, conv) = self.conv.forward(x);
        let (mut y, norm) = self.norm.forward(&y);
        relu(&mut y);
        let out = y.clone();
        (y, ConvBlockCache { conv, norm, out })
    }

    fn backward(&mut self, cache: &ConvBlockCache, mut dy: Act, need_input: bool) -> Option<Act> {
        relu_backward(&cache.out, &mut dy);
        let d = self.norm.backward(&cache.norm, &dy);
        self.conv.backward(&cache.conv, &d, need_input)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv.weight,
            &mut self.norm.gamma,
            &mut self.norm.beta,
        ]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.conv.weight, &self.norm.gamma, &self.norm.beta]
    }
}

/// Basic residual block with an optional 1x1 projection shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    first: ConvBlock,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

pub struct ResBlockCache {
    first: ConvBlockCache,
    conv2: ConvCache,
    norm2: GroupNormCache,
    shortcut: Option<(ConvCache, GroupNormCache)>,
    out: Act,
}

impl ResBlock {
    fn new<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv2d::new(&format!("{name}.proj"), cin, cout, 1, stride, rng),
                GroupNorm::new(&format!("{name}.proj_norm"), cout, GROUPS),
            )
        });
        ResBlock {
            first: ConvBlock::new(&format!("{name}.a"), cin, cout, stride, rng),
            conv2: Conv2d::new(&format!("{name}.b.conv"), cout, cout, 3, 1, rng),
            norm2: GroupNorm::new(&format!("{name}.b.norm"), cout, GROUPS),
            shortcut,
        }
    }

    fn forward(&self, x: &Act) -> (Act, ResBlockCache) {
        let (a, first) = self.first.forward(x);
        let (b, conv2) = self.conv2.forward(&a);
        let (mut y, norm2) = self.norm2.forward(&b);
        let shortcut = match &self.shortcut {
            Some((conv, norm)) => {
                let (s, cc) = conv.forward(x);
                let (s, nc) = norm.forward(&s);
                add_in_place(&mut y, &s);
                Some((cc, nc))
            }
            None => {
                add_in_place(&mut y, x);
                None
            }
        };
        relu(&mut y);
        let out = y.clone();
        (
            y,
            ResBlockCache {
                first,
                conv2,
                norm2,
                shortcut,
                out,
            },
        )
    }

    fn backward(&mut self, cache: &ResBlockCache, mut dy: Act, need_input: bool) -> Option<Act> {
        relu_backward(&cache.out, &mut dy);
        let db = self.norm2.backward(&cache.norm2, &dy);
        let da = self
            .conv2
            .backward(&cache.conv2, &db, true)
            .expect("input gradient requested");
        let dx_main = self.first.backward(&cache.first, da, need_input);
        let dx_skip = match (&mut self.shortcut, &cache.shortcut) {
            (Some((conv, norm)), Some((cc, nc))) => {
                let ds = norm.backward(nc, &dy);
                conv.backward(cc, &ds, need_input)
            }
            _ => need_input.then(|| dy.clone()),
        };
        match (dx_main, dx_skip) {
            (Some(mut m), Some(s)) => {
                add_in_place(&mut m, &s);
                Some(m)
            }
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.first.params_mut();
        out.push(&mut self.conv2.weight);
        out.push(&mut self.norm2.gamma);
        out.push(&mut self.norm2.beta);
        if let Some((conv, norm)) = &mut self.shortcut {
            out.push(&mut conv.weight);
            out.push(&mut norm.gamma);
            out.push(&mut norm.beta);
        }
        out
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = self.first.params();
        out.extend([&self.conv2.weight, &self.norm2.gamma, &self.norm2.beta]);
        if let Some((conv, norm)) = &self.shortcut {
            out.extend([&conv.weight, &norm.gamma, &norm.beta]);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    TinyConv(Vec<ConvBlock>),
    Residual { stem: ConvBlock, blocks: Vec<ResBlock> },
}

pub enum BackboneCache {
    TinyConv(Vec<ConvBlockCache>, (usize, usize, usize, usize)),
    Residual {
        stem: ConvBlockCache,
        blocks: Vec<ResBlockCache>,
        last_shape: (usize, usize, usize, usize),
    },
}

impl Backbone {
    pub fn new<R: Rng>(kind: BackboneKind, input_channels: usize, rng: &mut R) -> Self {
        match kind {
            BackboneKind::TinyConv => {
                let mut cin = input_channels;
                let blocks = STAGE_WIDTHS
                    .iter()
                    .enumerate()
                    .map(|(i, &cout)| {
                        let b = ConvBlock::new(&format!("backbone.block{i}"), cin, cout, 2, rng);
                        cin = cout;
                        b
                    })
                    .collect();
                Backbone::TinyConv(blocks)
            }
            BackboneKind::Residual => {
                let stem = ConvBlock::new("backbone.stem", input_channels, STAGE_WIDTHS[0], 2, rng);
                let blocks = STAGE_WIDTHS
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| ResBlock::new(&format!("backbone.res{i}"), w[0], w[1], 2, rng))
                    .collect();
                Backbone::Residual { stem, blocks }
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        STAGE_WIDTHS[STAGE_WIDTHS.len() - 1]
    }

    /// Returns row-major `N x feature_dim` pooled features.
    pub fn forward(&self, x: Act) -> (Vec<f32>, BackboneCache) {
        match self {
            Backbone::TinyConv(blocks) => {
                let mut caches = Vec::with_capacity(blocks.len());
                let mut h = x;
                for b in blocks {
                    let (y, c) = b.forward(&h);
                    caches.push(c);
                    h = y;
                }
                let shape = (h.c, h.n, h.h, h.w);
                (global_avg_pool(&h), BackboneCache::TinyConv(caches, shape))
            }
            Backbone::Residual { stem, blocks } => {
                let (mut h, stem_cache) = stem.forward(&x);
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (y, c) = b.forward(&h);
                    caches.push(c);
                    h = y;
                }
                let last_shape = (h.c, h.n, h.h, h.w);
                (
                    global_avg_pool(&h),
                    BackboneCache::Residual {
                        stem: stem_cache,
                        blocks: caches,
                        last_shape,
                    },
                )
            }
        }
    }

    /// Accumulates parameter gradients from the pooled-feature gradient.
    pub fn backward(&mut self, cache: &BackboneCache, dfeat: &[f32]) {
        match (self, cache) {
            (Backbone::TinyConv(blocks), BackboneCache::TinyConv(caches, shape)) => {
                let mut d = global_avg_pool_backward(dfeat, *shape);
                for (i, (b, c)) in blocks.iter_mut().zip(caches).enumerate().rev() {
                    match b.backward(c, d, i > 0) {
                        Some(next) => d = next,
                        None => break,
                    }
                }
            }
            (
                Backbone::Residual { stem, blocks },
                BackboneCache::Residual {
                    stem: stem_cache,
                    blocks: caches,
                    last_shape,
                },
            ) => {
                let mut d = global_avg_pool_backward(dfeat, *last_shape);
                for (b, c) in blocks.iter_mut().zip(caches).rev() {
                    d = b.backward(c, d, true).expect("input gradient requested");
                }
                stem.backward(stem_cache, d, false);
            }
            _ => panic!("backbone cache does not match backbone kind"),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Backbone::TinyConv(blocks) => blocks.iter_mut().flat_map(|b| b.params_mut()).collect(),
            Backbone::Residual { stem, blocks } => {
                let mut out = stem.params_mut();
                out.extend(blocks.iter_mut().flat_map(|b| b.params_mut()));
                out
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Backbone::TinyConv(blocks) => blocks.iter().flat_map(|b| b.params()).collect(),
            Backbone::Residual { stem, blocks } => {
                let mut out = stem.params();
                out.extend(blocks.iter().flat_map(|b| b.params()));
                out
            }
        }
    }
}
