//! Fixed-length region descriptors.
//!
//! Two extractors sit behind [`FeatureExtractor`]: a blockwise
//! orientation-histogram descriptor and a small forward-only convolutional
//! stack with fixed random filters. The stack also exposes receptive-field
//! geometry and top-activation retrieval for individual units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::nms;
use crate::error::{Error, Result};
use crate::geometry::BoxCorners;
use crate::imaging::{warp_region, Image, WarpConfig};

const HOG_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layer_tag: String,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub trait FeatureExtractor: Send + Sync {
    /// Side of the square patch the extractor accepts.
    fn input_size(&self) -> usize;
    fn dim(&self) -> usize;
    fn tag(&self) -> &str;
    fn extract(&self, patch: &Image) -> Result<FeatureVector>;
}

fn check_patch(patch: &Image, size: usize, channels: Option<usize>) -> Result<()> {
    if patch.width() != size || patch.height() != size {
        return Err(Error::DimensionMismatch {
            expected: size,
            actual: if patch.width() != size {
                patch.width()
            } else {
                patch.height()
            },
        });
    }
    if let Some(ch) = channels {
        if patch.channels() != ch {
            return Err(Error::DimensionMismatch {
                expected: ch,
                actual: patch.channels(),
            });
        }
    }
    Ok(())
}

/// Warp a region and subtract the dataset mean; the shared patch preparation
/// for extraction and visualization.
pub fn prepare_patch(img: &Image, region: &BoxCorners, warp: &WarpConfig, mean: &[f32]) -> Result<Image> {
    warp_region(img, region, warp, mean)?.subtract_mean(mean)
}

// ---------------------------------------------------------------------------
// Orientation histograms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HogConfig {
    /// Cell side in pixels.
    pub cell: usize,
    /// Unsigned orientation bins over [0, 180) degrees.
    pub bins: usize,
    /// Block side in cells; blocks step by one cell.
    pub block: usize,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            cell: 8,
            bins: 9,
            block: 2,
        }
    }
}

impl HogConfig {
    pub fn dim(&self, size: usize) -> Result<usize> {
        if self.cell == 0 || self.bins == 0 || self.block == 0 || !size.is_multiple_of(self.cell) {
            return Err(Error::Domain(format!(
                "patch side {size} incompatible with hog config {self:?}"
            )));
        }
        let cells = size / self.cell;
        if cells < self.block {
            return Err(Error::Domain(format!(
                "{cells} cells cannot hold a {}-cell block",
                self.block
            )));
        }
        let blocks = cells - self.block + 1;
        Ok(blocks * blocks * self.block * self.block * self.bins)
    }
}

#[derive(Debug, Clone)]
pub struct HogExtractor {
    cfg: HogConfig,
    size: usize,
    dim: usize,
}

impl HogExtractor {
    pub fn new(cfg: HogConfig, size: usize) -> Result<Self> {
        let dim = cfg.dim(size)?;
        Ok(HogExtractor { cfg, size, dim })
    }
}

impl FeatureExtractor for HogExtractor {
    fn input_size(&self) -> usize {
        self.size
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> &str {
        "hog"
    }

    fn extract(&self, patch: &Image) -> Result<FeatureVector> {
        check_patch(patch, self.size, None)?;
        let values = hog_extract(patch, &self.cfg)?;
        debug_assert_eq!(values.len(), self.dim);
        Ok(FeatureVector {
            values,
            layer_tag: "hog".into(),
        })
    }
}

/// Per-cell unsigned orientation histograms, grouped into overlapping
/// blocks and L2-normalized as `v / sqrt(|v|^2 + eps^2)`.
///
/// Gradients are central differences with edge replication; votes are
/// magnitude-weighted and split linearly between the two nearest bin
/// centers (bin `k` is centered at `k * 180 / bins` degrees).
pub fn hog_extract(patch: &Image, cfg: &HogConfig) -> Result<Vec<f64>> {
    let (w, h) = (patch.width(), patch.height());
    if w % cfg.cell != 0 || h % cfg.cell != 0 {
        return Err(Error::Domain(format!(
            "patch {w}x{h} not divisible by cell {}",
            cfg.cell
        )));
    }
    let gray = patch.to_gray();
    let (cells_x, cells_y) = (w / cfg.cell, h / cfg.cell);
    if cells_x < cfg.block || cells_y < cfg.block || cfg.bins == 0 {
        return Err(Error::Domain("patch too small for one block".into()));
    }
    let px = |x: usize, y: usize| gray.get(x, y, 0) as f64;
    let bin_width = 180.0 / cfg.bins as f64;
    let mut hist = vec![0f64; cells_x * cells_y * cfg.bins];
    for y in 0..h {
        for x in 0..w {
            let gx = px((x + 1).min(w - 1), y) - px(x.saturating_sub(1), y);
            let gy = px(x, (y + 1).min(h - 1)) - px(x, y.saturating_sub(1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let pos = angle / bin_width;
            let lower = pos.floor();
            let frac = pos - lower;
            let b0 = (lower as usize) % cfg.bins;
            let b1 = (b0 + 1) % cfg.bins;
            let cell = (y / cfg.cell) * cells_x + x / cfg.cell;
            hist[cell * cfg.bins + b0] += mag * (1.0 - frac);
            hist[cell * cfg.bins + b1] += mag * frac;
        }
    }
    let blocks_x = cells_x - cfg.block + 1;
    let blocks_y = cells_y - cfg.block + 1;
    let block_len = cfg.block * cfg.block * cfg.bins;
    let mut out = Vec::with_capacity(blocks_x * blocks_y * block_len);
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let start = out.len();
            for cy in by..by + cfg.block {
                for cx in bx..bx + cfg.block {
                    let cell = cy * cells_x + cx;
                    out.extend_from_slice(&hist[cell * cfg.bins..(cell + 1) * cfg.bins]);
                }
            }
            let block = &mut out[start..];
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + HOG_EPSILON * HOG_EPSILON).sqrt();
            block.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolutional stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Valid (unpadded) convolution followed by `max(x, 0)`.
    Conv {
        kernel: usize,
        stride: usize,
        channels: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
}

impl LayerSpec {
    fn kernel_stride(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv { kernel, stride, .. } => (kernel, stride),
            LayerSpec::MaxPool { size, stride } => (size, stride),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvStackConfig {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl Default for ConvStackConfig {
    fn default() -> Self {
        ConvStackConfig {
            layers: vec![
                LayerSpec::Conv {
                    kernel: 5,
                    stride: 1,
                    channels: 8,
                },
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv {
                    kernel: 3,
                    stride: 1,
                    channels: 16,
                },
                LayerSpec::MaxPool { size: 2, stride: 2 },
            ],
            seed: 7,
        }
    }
}

/// Spatial size and channel count after every layer, for a square input.
pub fn layer_shapes(layers: &[LayerSpec], input_size: usize, in_channels: usize) -> Result<Vec<(usize, usize)>> {
    let mut size = input_size;
    let mut channels = in_channels;
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (k, s) = layer.kernel_stride();
        if k == 0 || s == 0 {
            return Err(Error::Config(format!("layer {i}: kernel and stride must be >= 1")));
        }
        if size < k {
            return Err(Error::Domain(format!(
                "layer {i}: spatial size {size} smaller than kernel {k}"
            )));
        }
        size = (size - k) / s + 1;
        if let LayerSpec::Conv { channels: c, .. } = layer {
            if *c == 0 {
                return Err(Error::Config(format!("layer {i}: zero channels")));
            }
            channels = *c;
        }
        shapes.push((size, channels));
    }
    Ok(shapes)
}

/// `(y, x, channel)` position in a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitRef {
    pub y: usize,
    pub x: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub size: usize,
    pub channels: usize,
    /// `(y, x, c)` order, channels fastest.
    pub data: Vec<f64>,
}

impl FeatureMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.size + x) * self.channels + c]
    }

    pub fn get(&self, unit: &UnitRef) -> Option<f64> {
        (unit.y < self.size && unit.x < self.size && unit.channel < self.channels)
            .then(|| self.at(unit.y, unit.x, unit.channel))
    }

    pub fn channel_max(&self, c: usize) -> f64 {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
struct ConvWeights {
    kernel: usize,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
    /// `[out][ky][kx][in]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(ConvWeights),
    Pool { size: usize, stride: usize },
}

/// Forward-only stack of fixed random convolutions, rectification and max-pooling.
#[derive(Debug, Clone)]
pub struct ConvStack {
    cfg: ConvStackConfig,
    input_size: usize,
    in_channels: usize,
    layers: Vec<Layer>,
    out_size: usize,
    out_channels: usize,
}

impl ConvStack {
    /// Filters drawn uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from a
    /// ChaCha8 stream per layer (`seed`, stream = layer index). Biases are zero.
    pub fn new(cfg: &ConvStackConfig, input_size: usize, in_channels: usize) -> Result<Self> {
        let shapes = layer_shapes(&cfg.layers, input_size, in_channels)?;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut channels = in_channels;
        for (i, spec) in cfg.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    channels: out,
                } => {
                    let fan_in = channels * kernel * kernel;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(i as u64);
                    let weights = (0..out * fan_in).map(|_| rng.random_range(-bound..=bound)).collect();
                    layers.push(Layer::Conv(ConvWeights {
                        kernel,
                        stride,
                        in_channels: channels,
                        out_channels: out,
                        weights,
                        bias: vec![0.0; out],
                    }));
                    channels = out;
                }
                LayerSpec::MaxPool { size, stride } => layers.push(Layer::Pool { size, stride }),
            }
        }
        let (out_size, out_channels) = shapes.last().copied().unwrap_or((input_size, in_channels));
        Ok(ConvStack {
            cfg: cfg.clone(),
            input_size,
            in_channels,
            layers,
            out_size,
            out_channels,
        })
    }

    /// Replace the filters of conv layer `index` (counting conv layers only).
    /// Weights are `[out][ky][kx][in]`.
    pub fn set_conv_weights(&mut self, index: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        let conv = self
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                Layer::Pool { .. } => None,
            })
            .nth(index)
            .ok_or_else(|| Error::Domain(format!("no conv layer {index}")))?;
        let expect = conv.out_channels * conv.kernel * conv.kernel * conv.in_channels;
        if weights.len() != expect || bias.len() != conv.out_channels {
            return Err(Error::DimensionMismatch {
                expected: expect,
                actual: weights.len(),
            });
        }
        conv.weights = weights;
        conv.bias = bias;
        Ok(())
    }

    pub fn config(&self) -> &ConvStackConfig {
        &self.cfg
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.out_size, self.out_channels)
    }

    /// Output of every layer. With `rectify = false` the stack is purely
    /// linear-plus-max, which is what the scaling checks probe.
    pub fn forward_layers(&self, patch: &Image, rectify: bool) -> Result<Vec<FeatureMap>> {
        check_patch(patch, self.input_size, Some(self.in_channels))?;
        let mut cur = FeatureMap {
            size: self.input_size,
            channels: self.in_channels,
            data: patch.data().iter().map(|&v| v as f64).collect(),
        };
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => conv_layer(&cur, c, rectify),
                Layer::Pool { size, stride } => pool_layer(&cur, *size, *stride),
            };
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    /// Final feature map and its flattening.
    pub fn forward(&self, patch: &Image) -> Result<(FeatureMap, FeatureVector)> {
        let map = self.forward_layers(patch, true)?.pop().unwrap_or_else(|| FeatureMap {
            size: self.input_size,
            channels: self.in_channels,
            data: patch.data().iter().map(|&v| v as f64).collect(),
        });
        let values = map.data.clone();
        Ok((
            map,
            FeatureVector {
                values,
                layer_tag: format!("conv{}", self.layers.len()),
            },
        ))
    }

    pub fn receptive_field(&self, unit: &UnitRef) -> Result<BoxCorners> {
        receptive_field(&self.cfg, unit, self.input_size, self.in_channels)
    }
}

fn conv_layer(input: &FeatureMap, c: &ConvWeights, rectify: bool) -> FeatureMap {
    let out_size = (input.size - c.kernel) / c.stride + 1;
    let mut data = vec![0f64; out_size * out_size * c.out_channels];
    let row_len = c.kernel * c.in_channels;
    for oy in 0..out_size {
        for ox in 0..out_size {
            let base = (oy * out_size + ox) * c.out_channels;
            for oc in 0..c.out_channels {
                let w = &c.weights[oc * c.kernel * row_len..(oc + 1) * c.kernel * row_len];
                let mut acc = c.bias[oc];
                for ky in 0..c.kernel {
                    let iy = oy * c.stride + ky;
                    let start = (iy * input.size + ox * c.stride) * input.channels;
                    let src = &input.data[start..start + row_len];
                    let wr = &w[ky * row_len..(ky + 1) * row_len];
                    acc += src.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                }
                data[base + oc] = if rectify { acc.max(0.0) } else { acc };
            }
        }
    }
    FeatureMap {
        size: out_size,
        channels: c.out_channels,
        data,
    }
}

fn pool_layer(input: &FeatureMap, size: usize, stride: usize) -> FeatureMap {
    let out_size = (input.size - size) / stride + 1;
    let ch = input.channels;
    let mut data = vec![f64::NEG_INFINITY; out_size * out_size * ch];
    for oy in 0..out_size {
        for ox in 0..out_size {
            let out = &mut data[(oy * out_size + ox) * ch..(oy * out_size + ox + 1) * ch];
            for ky in 0..size {
                for kx in 0..size {
                    let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                    let src = &input.data[(iy * input.size + ix) * ch..(iy * input.size + ix + 1) * ch];
                    for (o, v) in out.iter_mut().zip(src) {
                        *o = o.max(*v);
                    }
                }
            }
        }
    }
    FeatureMap {
        size: out_size,
        channels: ch,
        data,
    }
}

/// Forward a patch through a stack built from `cfg`.
pub fn conv_forward(cfg: &ConvStackConfig, patch: &Image) -> Result<(FeatureMap, FeatureVector)> {
    ConvStack::new(cfg, patch.width(), patch.channels())?.forward(patch)
}

/// Input-space box of the pixels that can influence `unit`, clipped to the input.
///
/// Uses the recurrence `r' = r + (k - 1) * j`, `j' = j * s` over layers.
pub fn receptive_field(
    cfg: &ConvStackConfig,
    unit: &UnitRef,
    input_size: usize,
    in_channels: usize,
) -> Result<BoxCorners> {
    let shapes = layer_shapes(&cfg.layers, input_size, in_channels)?;
    let (size, channels) = shapes.last().copied().unwrap_or((input_size, in_channels));
    if unit.y >= size || unit.x >= size || unit.channel >= channels {
        return Err(Error::Domain(format!(
            "unit {unit:?} outside {size}x{size}x{channels} map"
        )));
    }
    let (mut extent, mut jump) = (1usize, 1usize);
    for layer in &cfg.layers {
        let (k, s) = layer.kernel_stride();
        extent += (k - 1) * jump;
        jump *= s;
    }
    let (x0, y0) = ((unit.x * jump) as f64, (unit.y * jump) as f64);
    let r = extent as f64;
    Ok(BoxCorners::new_unchecked(x0, y0, x0 + r, y0 + r).clip(input_size as f64, input_size as f64))
}

/// Extractor wrapper flattening the stack's final map.
#[derive(Debug, Clone)]
pub struct ConvExtractor {
    stack: ConvStack,
    dim: usize,
}

impl ConvExtractor {
    pub fn new(cfg: &ConvStackConfig, input_size: usize, in_channels: usize) -> Result<Self> {
        let stack = ConvStack::new(cfg, input_size, in_channels)?;
        let (s, c) = stack.output_shape();
        Ok(ConvExtractor { stack, dim: s * s * c })
    }

    pub fn stack(&self) -> &ConvStack {
        &self.stack
    }
}

impl FeatureExtractor for ConvExtractor {
    fn input_size(&self) -> usize {
        self.stack.input_size
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> &str {
        "conv"
    }

    fn extract(&self, patch: &Image) -> Result<FeatureVector> {
        Ok(self.stack.forward(patch)?.1)
    }
}

// ---------------------------------------------------------------------------
// Top activations
// ---------------------------------------------------------------------------

/// A candidate region for unit visualization.
#[derive(Debug, Clone, Copy)]
pub struct Region<'a> {
    pub image_id: u64,
    pub image: &'a Image,
    pub bbox: BoxCorners,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRegion {
    /// Index into the input region list.
    pub index: usize,
    pub image_id: u64,
    pub bbox: BoxCorners,
    pub activation: f64,
    /// Activation divided by the channel's max over all units and regions.
    pub normalized: f64,
}

/// Regions sorted by the unit's activation, deduplicated per image with
/// greedy NMS at `nms_thresh`, truncated to `k`.
pub fn top_activations(
    stack: &ConvStack,
    unit: &UnitRef,
    regions: &[Region<'_>],
    warp: &WarpConfig,
    mean: &[f32],
    k: usize,
    nms_thresh: f64,
) -> Result<Vec<RankedRegion>> {
    if k == 0 || regions.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored = Vec::with_capacity(regions.len());
    let mut channel_max = f64::NEG_INFINITY;
    for (i, r) in regions.iter().enumerate() {
        let patch = prepare_patch(r.image, &r.bbox, warp, mean)?;
        let (map, _) = stack.forward(&patch)?;
        let act = map
            .get(unit)
            .ok_or_else(|| Error::Domain(format!("unit {unit:?} outside final map")))?;
        channel_max = channel_max.max(map.channel_max(unit.channel));
        scored.push((i, act));
    }
    let mut by_image: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
    for (i, r) in regions.iter().enumerate() {
        by_image.entry(r.image_id).or_default().push(i);
    }
    let mut kept = Vec::new();
    for idx in by_image.values() {
        let boxes: Vec<BoxCorners> = idx.iter().map(|&i| regions[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| scored[i].1).collect();
        kept.extend(nms(&boxes, &scores, nms_thresh).into_iter().map(|j| idx[j]));
    }
    kept.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
    kept.truncate(k);
    let norm = if channel_max > 0.0 { channel_max } else { 1.0 };
    Ok(kept
        .into_iter()
        .map(|i| RankedRegion {
            index: i,
            image_id: regions[i].image_id,
            bbox: regions[i].bbox,
            activation: scored[i].1,
            normalized: if channel_max > 0.0 { scored[i].1 / norm } else { 0.0 },
        })
        .collect())
}

/// Tile patches into a grid. Each tile gets the unit's receptive field drawn
/// in white and the normalized activation printed at the field's top-left.
pub fn render_montage(
    patches: &[Image],
    ranked: &[RankedRegion],
    field: &BoxCorners,
    columns: usize,
) -> Result<(Image, String)> {
    if patches.len() != ranked.len() {
        return Err(Error::DimensionMismatch {
            expected: ranked.len(),
            actual: patches.len(),
        });
    }
    let columns = columns.max(1);
    let tile = patches.first().map(|p| p.width()).unwrap_or(1);
    let rows = patches.len().div_ceil(columns).max(1);
    let gap = 2;
    let mut canvas = Image::filled(columns * (tile + gap) + gap, rows * (tile + gap) + gap, 3, 0.0);
    let mut sidecar = String::from("# rank\timage_id\tx_min\ty_min\tx_max\ty_max\tactivation\tnormalized\n");
    for (rank, (patch, r)) in patches.iter().zip(ranked).enumerate() {
        let (col, row) = (rank % columns, rank / columns);
        let (x0, y0) = (gap + col * (tile + gap), gap + row * (tile + gap));
        let mut t = patch.to_rgb();
        t.draw_rect(field, 1.0);
        t.draw_text(
            &format!("{:.2}", r.normalized),
            field.x_min as usize + 2,
            field.y_min as usize + 2,
            1.0,
        );
        canvas.blit(&t, x0, y0);
        sidecar.push_str(&format!(
            "{rank}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.image_id, r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max, r.activation, r.normalized
        ));
    }
    Ok((canvas, sidecar))
}
