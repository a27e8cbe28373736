//! Inception-style spatial feature extractor.
//!
//! A heat map passes through stride-2 stem convolutions, a stack of
//! inception-residual blocks and a final 1x1 projection to one channel. At
//! the default 256x144 input the output grid is 1 x 32 x 18
//! (channel, width, height).
//!
//! Images use the layout `[channels, width, height]`, so kernel `[3 x 1]`
//! spans three columns and one row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::heatmap::HeatMap;
use crate::nn::{conv_out_len, ConvGeom, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpatialConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// One stride-2 3x3 convolution per entry.
    pub stem_channels: Vec<usize>,
    /// Output channels of each of the four parallel branches.
    pub branch_channels: usize,
    /// Channels leaving each inception block.
    pub block_channels: usize,
    pub blocks: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            input_width: 256,
            input_height: 144,
            stem_channels: vec![8, 16, 32],
            branch_channels: 8,
            block_channels: 32,
            blocks: 2,
        }
    }
}

impl SpatialConfig {
    /// Same topology on a 16x9 input.
    pub fn miniature() -> Self {
        SpatialConfig {
            input_width: 16,
            input_height: 9,
            stem_channels: vec![2, 3, 4],
            branch_channels: 2,
            block_channels: 4,
            blocks: 2,
        }
    }

    /// Width and height of the output grid.
    pub fn output_extents(&self) -> (usize, usize) {
        let mut w = self.input_width;
        let mut h = self.input_height;
        for _ in &self.stem_channels {
            w = conv_out_len(w, 3, 2, 1).unwrap_or(0);
            h = conv_out_len(h, 3, 2, 1).unwrap_or(0);
        }
        (w, h)
    }

    pub fn feature_len(&self) -> usize {
        let (w, h) = self.output_extents();
        w * h
    }
}

/// Kernel extents of the four parallel branches, `(width, height)`.
pub const BRANCH_KERNELS: [(usize, usize); 4] = [(3, 1), (1, 3), (3, 3), (5, 5)];

#[derive(Debug, Clone)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        out_c: usize,
        in_c: usize,
        ka: usize,
        kb: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(
            &format!("{name}.w"),
            &[out_c, in_c, ka, kb],
            in_c * ka * kb,
            out_c * ka * kb,
            rng,
        );
        let b = store.add_zeros(&format!("{name}.b"), &[out_c]);
        ConvParams { w, b }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, geom: ConvGeom) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), geom)
    }
}

/// Four parallel convolutions, concatenated and merged by a 1x1 convolution,
/// plus a residual skip (1x1 projection when the channel count changes).
#[derive(Debug, Clone)]
pub struct InceptionBlock {
    branches: Vec<(ConvParams, (usize, usize))>,
    merge: ConvParams,
    skip: Option<ParamId>,
}

impl InceptionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        branch_c: usize,
        out_c: usize,
        rng: &mut R,
    ) -> Self {
        let branches = BRANCH_KERNELS
            .iter()
            .map(|&(ka, kb)| {
                let p = ConvParams::new(
                    store,
                    &format!("{name}.branch{ka}x{kb}"),
                    branch_c,
                    in_c,
                    ka,
                    kb,
                    rng,
                );
                (p, (ka, kb))
            })
            .collect();
        let merge = ConvParams::new(store, &format!("{name}.merge"), out_c, 4 * branch_c, 1, 1, rng);
        let skip = (in_c != out_c).then(|| {
            store.add_glorot(&format!("{name}.skip.w"), &[out_c, in_c, 1, 1], in_c, out_c, rng)
        });
        InceptionBlock {
            branches,
            merge,
            skip,
        }
    }

    /// `x` is `[n, c, w, h]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for (p, (ka, kb)) in &self.branches {
            let y = p.apply(g, store, x, ConvGeom::same(*ka, *kb))?;
            outs.push(g.relu(y));
        }
        let cat = g.concat(&outs, 1)?;
        let merged = self.merge.apply(g, store, cat, ConvGeom::same(1, 1))?;
        let skip = match self.skip {
            Some(w) => {
                let w = g.param(store, w);
                g.conv2d(x, w, None, ConvGeom::same(1, 1))?
            }
            None => x,
        };
        let sum = g.add(merged, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct SpatialExtractor {
    config: SpatialConfig,
    stem: Vec<ConvParams>,
    blocks: Vec<InceptionBlock>,
    head: ConvParams,
}

/// Intermediate nodes of one spatial forward pass.
#[derive(Debug, Clone)]
pub struct SpatialTrace {
    /// Stem convolution outputs before their ReLU.
    pub stem_pre: Vec<Var>,
    /// `[n, 1, w', h']`.
    pub output: Var,
}

impl SpatialExtractor {
    pub fn new<R: Rng>(config: SpatialConfig, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut stem = Vec::new();
        let mut c = 1;
        for (i, &out_c) in config.stem_channels.iter().enumerate() {
            stem.push(ConvParams::new(store, &format!("{prefix}.stem{i}"), out_c, c, 3, 3, rng));
            c = out_c;
        }
        let mut blocks = Vec::new();
        for i in 0..config.blocks {
            blocks.push(InceptionBlock::new(
                store,
                &format!("{prefix}.block{i}"),
                c,
                config.branch_channels,
                config.block_channels,
                rng,
            ));
            c = config.block_channels;
        }
        let head = ConvParams::new(store, &format!("{prefix}.head"), 1, c, 1, 1, rng);
        SpatialExtractor {
            config,
            stem,
            blocks,
            head,
        }
    }

    pub fn config(&self) -> &SpatialConfig {
        &self.config
    }

    /// `x` is `[n, 1, input_width, input_height]`.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<SpatialTrace> {
        let shape = g.value(x).shape().to_vec();
        let expected = [1, self.config.input_width, self.config.input_height];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(
                "spatial extractor",
                format!("input {shape:?}, expected [n, {expected:?}]"),
            ));
        }
        let mut h = x;
        let mut stem_pre = Vec::new();
        for p in &self.stem {
            let pre = p.apply(g, store, h, ConvGeom::new((2, 2), (1, 1)))?;
            stem_pre.push(pre);
            h = g.relu(pre);
        }
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
        }
        let output = self.head.apply(g, store, h, ConvGeom::same(1, 1))?;
        Ok(SpatialTrace { stem_pre, output })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, x)?.output)
    }
}

/// Spatial features of one keyframe, `[1, width, height]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeature {
    pub grid: Tensor,
}

/// Stacks heat maps into `[n, 1, width, height]`, scaling every value.
pub fn heatmaps_to_tensor(maps: &[HeatMap], scale: f64) -> Result<Tensor> {
    let Some(first) = maps.first() else {
        return Err(Error::shape("heatmaps", "no heat maps"));
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(maps.len() * w * h);
    for m in maps {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::shape(
                "heatmaps",
                format!("{}x{} next to {w}x{h}", m.width(), m.height()),
            ));
        }
        data.extend(m.values().iter().map(|v| v * scale));
    }
    Tensor::new(vec![maps.len(), 1, w, h], data)
}

/// Runs one heat map through the extractor (no gradient tracking).
pub fn extract_spatial(
    extractor: &SpatialExtractor,
    store: &ParamStore,
    heatmap: &HeatMap,
) -> Result<SpatialFeature> {
    let mut g = Graph::new();
    let x = g.input(heatmaps_to_tensor(std::slice::from_ref(heatmap), 1.0)?);
    let y = extractor.forward(&mut g, store, x)?;
    let v = g.value(y);
    let s = v.shape();
    let grid = v.clone().reshape(&[1, s[2], s[3]])?;
    Ok(SpatialFeature { grid })
}
