//! Inference over the conv/bn/relu/pool layer set.
//!
//! The engine exists to feed descriptor extraction, not to win benchmarks:
//! convolution is a direct loop over a zero-padded buffer with f32
//! accumulation in a fixed order. Output channels are computed independently
//! (in parallel under the `parallel` feature) and stitched back in channel
//! order, so results are bit-identical however the work is scheduled.

use crate::error::{Error, Result};
use crate::model::{LayerKind, Network, SpatialParams, TensorRole};
use crate::par;

/// Stabilizer added to batch-norm variance before the square root.
pub const BN_EPS: f32 = 1e-5;

/// A channels-first activation volume, indexed `(c * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Volume {
    /// Wraps raw data after checking its length against the dimensions.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expect = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::Shape("volume dimensions overflow".into()))?;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape("volume dimensions must be positive".into()));
        }
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {channels}x{height}x{width} volume",
                data.len()
            )));
        }
        Ok(Volume {
            channels,
            height,
            width,
            data,
        })
    }

    /// Channel count.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial height.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Spatial width.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Flat data slice.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at `(c, y, x)`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel's spatial plane.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Per-channel spatial means, accumulated in f64.
    pub fn channel_means(&self) -> Vec<f64> {
        let plane = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| self.channel(c).iter().map(|&v| v as f64).sum::<f64>() / plane)
            .collect()
    }
}

/// An input image: a volume constrained to finite values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Volume);

impl Image {
    /// Validates range and finiteness.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Argument(format!(
                "image values must lie in [0, 1], found {bad}"
            )));
        }
        Ok(Image(Volume::new(channels, height, width, data)?))
    }

    /// Channel count.
    pub fn channels(&self) -> usize {
        self.0.channels
    }

    /// Image height.
    pub fn height(&self) -> usize {
        self.0.height
    }

    /// Image width.
    pub fn width(&self) -> usize {
        self.0.width
    }

    /// The backing volume.
    pub fn as_volume(&self) -> &Volume {
        &self.0
    }

    /// Rotates counterclockwise by `quarter_turns` * 90 degrees.
    pub fn rotate90(&self, quarter_turns: u32) -> Image {
        let mut v = self.0.clone();
        for _ in 0..quarter_turns % 4 {
            v = rotate_once(&v);
        }
        Image(v)
    }

    /// Parses a binary portable graymap (`P5`, one channel) or pixmap
    /// (`P6`, three channels). Samples are scaled by the declared maximum
    /// to `[0, 1]`; only single-byte rasters (maxval <= 255) are supported.
    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Image> {
        let mut cur = PnmCursor { bytes, pos: 0 };
        let channels = match cur.token()? {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(Error::Format(format!(
                    "expected a P5 or P6 image, found '{other}'"
                )))
            }
        };
        let width: usize = cur.number("width")?;
        let height: usize = cur.number("height")?;
        let maxval: u32 = cur.number("maxval")?;
        if !(1..=255).contains(&maxval) {
            return Err(Error::Parse(format!(
                "maxval {maxval} unsupported (expected 1..=255)"
            )));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Corrupt("image raster missing".into())),
        }
        let plane = height
            .checked_mul(width)
            .ok_or_else(|| Error::Shape("image dimensions overflow".into()))?;
        let need = plane
            .checked_mul(channels)
            .ok_or_else(|| Error::Shape("image dimensions overflow".into()))?;
        let raster = bytes[cur.pos..].get(..need).ok_or_else(|| {
            Error::Corrupt(format!(
                "raster holds {} of {need} samples",
                bytes.len() - cur.pos
            ))
        })?;
        if let Some(bad) = raster.iter().find(|&&v| u32::from(v) > maxval) {
            return Err(Error::Corrupt(format!(
                "sample {bad} exceeds maxval {maxval}"
            )));
        }
        let mut data = vec![0f32; need];
        for (i, chunk) in raster.chunks_exact(channels).enumerate() {
            for (c, &v) in chunk.iter().enumerate() {
                data[c * plane + i] = v as f32 / maxval as f32;
            }
        }
        Image::new(channels, height, width, data)
    }

    /// Crops a window at `(y0, x0)` of size `height` x `width`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::Argument("crop size must be positive".into()));
        }
        if y0 + height > self.height() || x0 + width > self.width() {
            return Err(Error::Argument(format!(
                "crop {height}x{width}+{y0}+{x0} leaves the {}x{} image",
                self.height(),
                self.width()
            )));
        }
        let mut data = Vec::with_capacity(self.channels() * height * width);
        for c in 0..self.channels() {
            for y in 0..height {
                for x in 0..width {
                    data.push(self.0.at(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(Image(Volume::new(self.channels(), height, width, data).expect("sizes agree")))
    }
}

/// Reads a P5/P6 image file.
pub fn load_image(path: impl AsRef<std::path::Path>) -> Result<Image> {
    Image::from_pnm_bytes(&std::fs::read(path)?)
}

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmCursor<'a> {
    /// Next header token, skipping whitespace and `#` comment lines.
    fn token(&mut self) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Corrupt("image header ends early".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Parse("image header is not ASCII".into()))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::Parse(format!("'{tok}' is not a valid {what}")))
    }
}

fn rotate_once(v: &Volume) -> Volume {
    // One counterclockwise quarter turn: out[y][x] = in[x][w_in - 1 - y].
    let (h_out, w_out) = (v.width, v.height);
    let mut data = Vec::with_capacity(v.data.len());
    for c in 0..v.channels {
        for y in 0..h_out {
            for x in 0..w_out {
                data.push(v.at(c, x, v.width - 1 - y));
            }
        }
    }
    Volume::new(v.channels, h_out, w_out, data).expect("rotation preserves size")
}

/// Output spatial extent for a kernel/stride/padding combination.
fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Runs the network on an image. `upto` stops after the named layer
/// (inclusive); `None` runs the whole stack. Returns the final activation
/// volume.
pub fn forward(net: &Network, image: &Image, upto: Option<&str>) -> Result<Volume> {
    let stop = match upto {
        Some(name) => net.index_of(name).ok_or_else(|| {
            Error::Argument(format!("cannot stop at unknown layer '{name}'"))
        })?,
        None => net.layers().len().saturating_sub(1),
    };
    let mut acts = image.as_volume().clone();
    for layer in &net.layers()[..=stop] {
        acts = match layer.kind() {
            LayerKind::Conv => conv_layer(layer, &acts)?,
            LayerKind::BatchNorm => bn_layer(layer, &acts)?,
            LayerKind::Relu => relu(&acts),
            LayerKind::MaxPool => pool_layer(layer, &acts, PoolKind::Max)?,
            LayerKind::AvgPool => pool_layer(layer, &acts, PoolKind::Avg)?,
        };
    }
    Ok(acts)
}

fn conv_layer(layer: &crate::model::Layer, input: &Volume) -> Result<Volume> {
    let spatial = layer.spatial().expect("validated conv layer");
    let weight = layer
        .tensor(TensorRole::ConvWeight)
        .expect("validated conv layer");
    let w = weight.require_values(&format!("layer '{}' conv_weight", layer.name()))?;
    let bias = match layer.tensor(TensorRole::ConvBias) {
        Some(t) => Some(t.require_values(&format!("layer '{}' conv_bias", layer.name()))?),
        None => None,
    };
    let [out_c, in_per_group, kh, kw] = [
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    ];
    let groups = spatial.groups;
    if in_per_group * groups != input.channels {
        return Err(Error::Shape(format!(
            "layer '{}' expects {} input channels ({} per group x {} groups), got {}",
            layer.name(),
            in_per_group * groups,
            in_per_group,
            groups,
            input.channels
        )));
    }
    let oh = out_extent(input.height, kh, spatial.stride, spatial.padding)?;
    let ow = out_extent(input.width, kw, spatial.stride, spatial.padding)?;

    let padded = pad_volume(input, spatial.padding);
    let out_per_group = out_c / groups;
    let kernel_sz = in_per_group * kh * kw;

    let channels = par::map_range(out_c, |o| {
        let group = o / out_per_group;
        let in_base = group * in_per_group;
        let kw_base = o * kernel_sz;
        let mut plane = vec![0.0f32; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let iy0 = oy * spatial.stride;
                let ix0 = ox * spatial.stride;
                let mut acc = 0.0f32;
                for ic in 0..in_per_group {
                    let ch = padded.channel(in_base + ic);
                    for ky in 0..kh {
                        let row = (iy0 + ky) * padded.width + ix0;
                        let wrow = kw_base + (ic * kh + ky) * kw;
                        for kx in 0..kw {
                            acc += ch[row + kx] * w[wrow + kx];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[o];
                }
                plane[oy * ow + ox] = acc;
            }
        }
        plane
    });
    Volume::new(out_c, oh, ow, channels.concat())
}

fn pad_volume(v: &Volume, padding: usize) -> Volume {
    if padding == 0 {
        return v.clone();
    }
    let (h, w) = (v.height + 2 * padding, v.width + 2 * padding);
    let mut data = vec![0.0f32; v.channels * h * w];
    for c in 0..v.channels {
        for y in 0..v.height {
            let src = (c * v.height + y) * v.width;
            let dst = (c * h + y + padding) * w + padding;
            data[dst..dst + v.width].copy_from_slice(&v.data[src..src + v.width]);
        }
    }
    Volume::new(v.channels, h, w, data).expect("sizes agree")
}

fn bn_layer(layer: &crate::model::Layer, input: &Volume) -> Result<Volume> {
    let get = |role: TensorRole| -> Result<&[f32]> {
        layer
            .tensor(role)
            .expect("validated bn layer")
            .require_values(&format!("layer '{}' {role}", layer.name()))
    };
    let scale = get(TensorRole::BnScale)?;
    let bias = get(TensorRole::BnBias)?;
    let mean = get(TensorRole::BnMean)?;
    let var = get(TensorRole::BnVar)?;
    if scale.len() != input.channels {
        return Err(Error::Shape(format!(
            "layer '{}' normalizes {} channels but the input has {}",
            layer.name(),
            scale.len(),
            input.channels
        )));
    }
    let mut data = Vec::with_capacity(input.data.len());
    for c in 0..input.channels {
        let inv = scale[c] / (var[c] + BN_EPS).sqrt();
        for &v in input.channel(c) {
            data.push((v - mean[c]) * inv + bias[c]);
        }
    }
    Volume::new(input.channels, input.height, input.width, data)
}

fn relu(input: &Volume) -> Volume {
    let data = input.data.iter().map(|&v| v.max(0.0)).collect();
    Volume::new(input.channels, input.height, input.width, data).expect("same size")
}

enum PoolKind {
    Max,
    Avg,
}

fn pool_layer(layer: &crate::model::Layer, input: &Volume, kind: PoolKind) -> Result<Volume> {
    let spatial = layer.spatial().expect("validated pool layer");
    let SpatialParams {
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        ..
    } = *spatial;
    if padding >= kh || padding >= kw {
        return Err(Error::Shape(format!(
            "layer '{}' pads by {padding} with a {kh}x{kw} window; padding must stay below the window",
            layer.name()
        )));
    }
    let oh = out_extent(input.height, kh, stride, padding)?;
    let ow = out_extent(input.width, kw, stride, padding)?;
    let mut data = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        let ch = input.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                // Window taps outside the input are skipped: max pooling
                // ignores them, average pooling divides by the valid count.
                let y_lo = (oy * stride).saturating_sub(padding);
                let y_hi = (oy * stride + kh - padding).min(input.height);
                let x_lo = (ox * stride).saturating_sub(padding);
                let x_hi = (ox * stride + kw - padding).min(input.width);
                let v = match kind {
                    PoolKind::Max => {
                        let mut best = f32::NEG_INFINITY;
                        for y in y_lo..y_hi {
                            for x in x_lo..x_hi {
                                best = best.max(ch[y * input.width + x]);
                            }
                        }
                        best
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0f32;
                        for y in y_lo..y_hi {
                            for x in x_lo..x_hi {
                                sum += ch[y * input.width + x];
                            }
                        }
                        sum / ((y_hi - y_lo) * (x_hi - x_lo)) as f32
                    }
                };
                data.push(v);
            }
        }
    }
    Volume::new(input.channels, oh, ow, data)
}
