//! Encoder-decoder imputation network with histology-feature injection.
//!
//! Input channels are the RGB histology, the sparse expression (zeros off
//! the grid) and the sampling mask. Each scale applies two 3x3 convolutions
//! with leaky rectification; the encoder downsamples by max-pooling and the
//! decoder upsamples by nearest neighbour before concatenating the skip.
//! At the bottleneck a 1x1 adapter maps the histology features and the
//! result is concatenated onto the feature map. A 1x1 head emits one
//! channel per gene.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::filter::{average_pool, gaussian_blur, gradients, Plane};
use crate::sample::{luminance, Mask};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::{Error, Result, Tensor};

/// Channel count of the built-in handcrafted features.
pub const HANDCRAFTED_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub genes: usize,
    pub base_width: usize,
    /// Number of scales, the bottleneck included.
    pub depth: usize,
    pub feature_channels: usize,
}

impl BackboneConfig {
    pub fn new(genes: usize) -> Self {
        Self { genes, base_width: 16, depth: 3, feature_channels: HANDCRAFTED_CHANNELS }
    }

    pub fn in_channels(&self) -> usize {
        3 + self.genes + 1
    }

    /// Output width of the block at scale `level`.
    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial reduction factor at the bottleneck.
    pub fn bottleneck_factor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.genes == 0 {
            return Err(Error::EmptyGenePanel);
        }
        if self.base_width == 0 || self.depth == 0 || self.feature_channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate backbone config {self:?}")));
        }
        Ok(())
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let f = self.bottleneck_factor();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("{height}x{width} is not divisible by {f}"),
            });
        }
        Ok(())
    }

    /// Number of convolution blocks, which is also the number of PDL sites.
    pub fn block_count(&self) -> usize {
        2 * self.depth - 1
    }

    /// Output channels of block `site`. Sites run encoder-first in execution
    /// order: `0..depth` are encoder scales (the last is the bottleneck),
    /// then decoder blocks from coarse to fine.
    pub fn site_channels(&self, site: usize) -> Option<usize> {
        if site < self.depth {
            Some(self.width_at(site))
        } else if site < self.block_count() {
            Some(self.width_at(self.block_count() - 1 - site))
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub first: Conv,
    pub second: Conv,
}

/// Scale and shift vectors of one domain-alignment layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PdlSite {
    pub scale: ParamId,
    pub shift: ParamId,
}

/// Network parameters plus the layer layout that addresses them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: BackboneConfig,
    pub(crate) store: ParamStore,
    blocks: Vec<Block>,
    adapter: Conv,
    head: Conv,
    pub(crate) pdls: BTreeMap<usize, PdlSite>,
}

fn add_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, gain: f32) -> Conv {
    let fan_in = (cin * k * k) as f32;
    let normal = Normal::new(0.0f32, libm::sqrtf(gain / fan_in)).expect("positive std");
    let w = Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(rng));
    let weight = store.add(format!("{name}.weight"), w, true);
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
    Conv { weight, bias, kernel: k }
}

impl ModelParams {
    /// He-initialized weights, zero biases and a zero head, deterministic in `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.block_count());
        let mut cin = config.in_channels();
        for level in 0..config.depth {
            let c = config.width_at(level);
            let name = if level + 1 == config.depth { String::from("bottleneck") } else { format!("enc{level}") };
            let first = add_conv(&mut store, &mut rng, &format!("{name}.conv1"), cin, c, 3, 2.0);
            let second = add_conv(&mut store, &mut rng, &format!("{name}.conv2"), c, c, 3, 2.0);
            blocks.push(Block { first, second });
            cin = c;
        }
        let ce = config.feature_channels;
        let adapter = add_conv(&mut store, &mut rng, "adapter", ce, ce, 1, 1.0);
        cin += ce;
        for level in (0..config.depth - 1).rev() {
            let c = config.width_at(level);
            let name = format!("dec{level}");
            let first = add_conv(&mut store, &mut rng, &format!("{name}.conv1"), cin + c, c, 3, 2.0);
            let second = add_conv(&mut store, &mut rng, &format!("{name}.conv2"), c, c, 3, 2.0);
            blocks.push(Block { first, second });
            cin = c;
        }
        let head = add_conv(&mut store, &mut rng, "head", cin, config.genes, 1, 1.0);
        // A zero head starts every output at zero instead of at the scale of
        // the randomly mixed penultimate features.
        store.get_mut(head.weight).data_mut().fill(0.0);
        Ok(Self { config, store, blocks, adapter, head, pdls: BTreeMap::new() })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head(&self) -> Conv {
        self.head
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head.weight, self.head.bias]
    }

    pub fn pdl_sites(&self) -> &BTreeMap<usize, PdlSite> {
        &self.pdls
    }

    /// Ids of every parameter that is neither a head nor a PDL tensor.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let head = self.head_ids();
        let pdl: Vec<ParamId> = self.pdls.values().flat_map(|s| [s.scale, s.shift]).collect();
        self.store.ids().filter(|id| !head.contains(id) && !pdl.contains(id)).collect()
    }

    pub fn backbone_scalars(&self) -> usize {
        self.backbone_ids().iter().map(|&id| self.store.get(id).len()).sum::<usize>()
            + self.head_ids().iter().map(|&id| self.store.get(id).len()).sum::<usize>()
    }

    fn conv(&self, tape: &mut Tape<'_>, x: Var, c: Conv) -> Result<Var> {
        let (w, b) = (tape.param(c.weight), tape.param(c.bias));
        tape.conv2d(x, w, b, c.kernel / 2)
    }

    fn block(&self, tape: &mut Tape<'_>, x: Var, site: usize) -> Result<Var> {
        let blk = self.blocks[site];
        let h = self.conv(tape, x, blk.first)?;
        let h = tape.leaky_relu(h);
        let h = self.conv(tape, h, blk.second)?;
        let h = tape.leaky_relu(h);
        match self.pdls.get(&site) {
            Some(p) => {
                let (a, b) = (tape.param(p.scale), tape.param(p.shift));
                tape.channel_affine(h, a, b)
            }
            None => Ok(h),
        }
    }

    /// Records the network up to the input of the head and returns that node.
    pub fn features_tape(&self, tape: &mut Tape<'_>, input: Var, features: Var) -> Result<Var> {
        let (cin, h, w) = tape.value(input).dims3()?;
        if cin != self.config.in_channels() {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("input has {cin} channels, expected {}", self.config.in_channels()),
            });
        }
        self.config.check_dims(h, w)?;
        let f = self.config.bottleneck_factor();
        let expected = [self.config.feature_channels, h / f, w / f];
        if tape.value(features).shape() != expected {
            return Err(Error::FeatureDims { expected, got: tape.value(features).shape().to_vec() });
        }
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth - 1);
        let mut x = input;
        for level in 0..depth {
            if level > 0 {
                x = tape.max_pool2(x)?;
            }
            x = self.block(tape, x, level)?;
            if level + 1 < depth {
                skips.push(x);
            }
        }
        let injected = self.conv(tape, features, self.adapter)?;
        x = tape.concat(&[x, injected])?;
        for (i, level) in (0..depth - 1).rev().enumerate() {
            x = tape.upsample2(x)?;
            x = tape.concat(&[x, skips[level]])?;
            x = self.block(tape, x, depth + i)?;
        }
        Ok(x)
    }

    /// Applies the terminal 1x1 convolution.
    pub fn head_tape(&self, tape: &mut Tape<'_>, penultimate: Var) -> Result<Var> {
        self.conv(tape, penultimate, self.head)
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, input: Var, features: Var) -> Result<Var> {
        let p = self.features_tape(tape, input, features)?;
        self.head_tape(tape, p)
    }

    /// Penultimate activations without recording gradients.
    pub fn penultimate(&self, input: &Tensor, features: &HistologyFeatures) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let (x, f) = (tape.input(input.clone()), tape.input(features.map.clone()));
        let p = self.features_tape(&mut tape, x, f)?;
        Ok(tape.value(p).clone())
    }

    /// Dense `[G, H, W]` prediction.
    pub fn forward(&self, input: &Tensor, features: &HistologyFeatures) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let (x, f) = (tape.input(input.clone()), tape.input(features.map.clone()));
        let out = self.forward_tape(&mut tape, x, f)?;
        Ok(tape.value(out).clone())
    }
}

/// Stacks histology, sparse expression and mask into the network input.
pub fn model_input(histology: &Tensor, sparse: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (c, h, w) = histology.dims3()?;
    let (_, sh, sw) = sparse.dims3()?;
    if c != 3 || (sh, sw) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape {
            op: "model_input",
            detail: format!("histology {:?}, expression {:?}, mask {}x{}", histology.shape(), sparse.shape(), mask.height(), mask.width()),
        });
    }
    let mut data = Vec::with_capacity((c + sparse.shape()[0] + 1) * h * w);
    data.extend_from_slice(histology.data());
    data.extend_from_slice(sparse.data());
    data.extend(mask.data().iter().map(|&m| m as f32));
    Tensor::new(alloc::vec![c + sparse.shape()[0] + 1, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Handcrafted,
    Loaded,
}

/// Histology feature map at bottleneck resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HistologyFeatures {
    pub map: Tensor,
    pub source: FeatureSource,
}

impl HistologyFeatures {
    /// Wraps an externally computed map after checking it against the model.
    pub fn loaded(map: Tensor, config: &BackboneConfig, height: usize, width: usize) -> Result<Self> {
        let f = config.bottleneck_factor();
        let expected = [config.feature_channels, height / f, width / f];
        if map.shape() != expected {
            return Err(Error::FeatureDims { expected, got: map.shape().to_vec() });
        }
        Ok(Self { map, source: FeatureSource::Loaded })
    }
}

/// Luminance at three blur scales, gradient magnitude at the same scales
/// and two colour-opponent channels, average-pooled by `factor`.
pub fn extract_histology_features(histology: &Tensor, factor: usize) -> Result<HistologyFeatures> {
    let (c, h, w) = histology.dims3()?;
    if c != 3 {
        return Err(Error::Shape { op: "extract_histology_features", detail: format!("expected RGB, got {c} channels") });
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape {
            op: "extract_histology_features",
            detail: format!("{h}x{w} is not divisible by {factor}"),
        });
    }
    let lum = luminance(histology);
    let mut channels: Vec<Plane> = Vec::with_capacity(HANDCRAFTED_CHANNELS);
    let blurred: Vec<Plane> = [1.0, 2.0, 4.0].iter().map(|&s| gaussian_blur(&lum, s)).collect();
    for b in &blurred {
        channels.push(b.clone());
    }
    for b in &blurred {
        let (gx, gy) = gradients(b);
        let data = gx.data.iter().zip(&gy.data).map(|(x, y)| libm::sqrtf(x * x + y * y)).collect();
        channels.push(Plane::new(h, w, data));
    }
    let (r, g, bl) = (histology.channel(0), histology.channel(1), histology.channel(2));
    channels.push(Plane::new(h, w, r.iter().zip(g).map(|(r, g)| r - g).collect()));
    channels.push(Plane::new(h, w, r.iter().zip(g).zip(bl).map(|((r, g), b)| 0.5 * (r + g) - b).collect()));
    let mut data = Vec::with_capacity(HANDCRAFTED_CHANNELS * (h / factor) * (w / factor));
    for p in &channels {
        data.extend_from_slice(&average_pool(p, factor).data);
    }
    let map = Tensor::new(alloc::vec![HANDCRAFTED_CHANNELS, h / factor, w / factor], data)?;
    Ok(HistologyFeatures { map, source: FeatureSource::Handcrafted })
}
