//! 2-D convolutions and the two convolutional adapters.
//!
//! [`ConvLayer`] implements direct and transposed convolution on
//! channel-major images, with zero padding and per-layer activation.
//! [`ConvStack`] chains layers and carries the two adapter presets:
//!
//! * the modality adapter maps an `M`-channel input to 3 channels through
//!   an inverted bottleneck of `4 * max(M, 3)` hidden channels, so
//!   arbitrary modality counts can feed an RGB-pretrained encoder;
//! * the multi-class adapter refines a `K`-channel logit volume slice by
//!   slice through a `K -> 4K -> K` bottleneck before softmax and argmax
//!   ([`mcadapter_fuse`]), turning binary-style per-class scores into one
//!   mutually exclusive labelling.

use crate::error::{Error, Result};
use crate::nn::activation::Activation;
use crate::volume::{LabelVolume, ScalarVolume, MAX_CLASSES};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Output channels of the modality adapter (RGB for the pretrained
/// encoder stem).
pub const MADAPTER_OUT_CHANNELS: usize = 3;

/// Hidden-channel multiplier of both convolutional adapters.
pub const CONV_ADAPTER_EXPANSION: usize = 4;

/// Channel-major 2-D image; element `(c, y, x)` lives at
/// `(c * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2d {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image2d {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "image dims must be positive, got ({channels}, {height}, {width})"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::validation(format!(
                "image buffer has {} entries for shape ({channels}, {height}, {width})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(
                "images must hold finite values only".to_string(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn seeded(channels: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// One channel plane as a contiguous row-major slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Whether a layer applies a direct or a transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    ConvTranspose,
}

/// One convolution layer. Weights are laid out
/// `[out_channel][in_channel][ky][kx]` for both kinds; `output_padding`
/// applies to transposed layers only and extends the output grid on the
/// bottom/right, matching the usual deconvolution convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        Self {
            kind: ConvKind::Conv,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: 0,
            weight,
            bias,
            activation,
        }
        .validated()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        Self {
            kind: ConvKind::ConvTranspose,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight,
            bias,
            activation,
        }
        .validated()
    }

    /// Uniform seeded weights in `[-0.1, 0.1]` with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn seeded(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        Self {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight,
            bias: vec![0.0; out_channels],
            activation,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::validation(
                "conv layers need positive channel counts".to_string(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::validation(format!(
                "conv kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::validation("conv stride must be positive".to_string()));
        }
        match self.kind {
            ConvKind::Conv => {
                if self.output_padding != 0 {
                    return Err(Error::validation(
                        "output_padding applies to transposed layers only".to_string(),
                    ));
                }
            }
            ConvKind::ConvTranspose => {
                if self.output_padding >= self.stride {
                    return Err(Error::validation(format!(
                        "output_padding {} must be smaller than stride {}",
                        self.output_padding, self.stride
                    )));
                }
            }
        }
        let want = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weight.len() != want {
            return Err(Error::validation(format!(
                "conv weight has {} entries, expected {want}",
                self.weight.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::validation(format!(
                "conv bias has {} entries, expected {}",
                self.bias.len(),
                self.out_channels
            )));
        }
        if !self.weight.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::validation(
                "conv parameters must be finite".to_string(),
            ));
        }
        Ok(self)
    }

    /// Spatial output size for an input of `height x width`.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let one = |n: usize| -> Result<usize> {
            match self.kind {
                ConvKind::Conv => {
                    let reach = n + 2 * self.padding;
                    if reach < self.kernel {
                        return Err(Error::validation(format!(
                            "input extent {n} too small for kernel {} with padding {}",
                            self.kernel, self.padding
                        )));
                    }
                    Ok((reach - self.kernel) / self.stride + 1)
                }
                ConvKind::ConvTranspose => {
                    let out = (n - 1) * self.stride + self.kernel + self.output_padding;
                    let out = out as i64 - 2 * self.padding as i64;
                    if out < 1 {
                        return Err(Error::validation(format!(
                            "transposed conv output collapses for extent {n}"
                        )));
                    }
                    Ok(out as usize)
                }
            }
        };
        Ok((one(height)?, one(width)?))
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&self, x: &Image2d) -> Result<Image2d> {
        if x.channels() != self.in_channels {
            return Err(Error::validation(format!(
                "layer expects {} input channels, image has {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (oh, ow) = self.output_size(x.height(), x.width())?;
        let mut out = vec![0.0; self.out_channels * oh * ow];
        match self.kind {
            ConvKind::Conv => {
                for o in 0..self.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = self.bias[o];
                            for i in 0..self.in_channels {
                                for ky in 0..self.kernel {
                                    let iy = (oy * self.stride + ky) as i64 - self.padding as i64;
                                    if iy < 0 || iy >= x.height() as i64 {
                                        continue;
                                    }
                                    for kx in 0..self.kernel {
                                        let ix =
                                            (ox * self.stride + kx) as i64 - self.padding as i64;
                                        if ix < 0 || ix >= x.width() as i64 {
                                            continue;
                                        }
                                        acc += self.w(o, i, ky, kx)
                                            * x.at(i, iy as usize, ix as usize);
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = self.activation.apply(acc);
                        }
                    }
                }
            }
            ConvKind::ConvTranspose => {
                // Scatter: every input pixel stamps a kernel-sized patch
                // onto the (virtually padded) output grid.
                for i in 0..self.in_channels {
                    for iy in 0..x.height() {
                        for ix in 0..x.width() {
                            let v = x.at(i, iy, ix);
                            for o in 0..self.out_channels {
                                for ky in 0..self.kernel {
                                    let oy =
                                        (iy * self.stride + ky) as i64 - self.padding as i64;
                                    if oy < 0 || oy >= oh as i64 {
                                        continue;
                                    }
                                    for kx in 0..self.kernel {
                                        let ox =
                                            (ix * self.stride + kx) as i64 - self.padding as i64;
                                        if ox < 0 || ox >= ow as i64 {
                                            continue;
                                        }
                                        out[(o * oh + oy as usize) * ow + ox as usize] +=
                                            self.w(o, i, ky, kx) * v;
                                    }
                                }
                            }
                        }
                    }
                }
                for o in 0..self.out_channels {
                    for v in &mut out[o * oh * ow..(o + 1) * oh * ow] {
                        *v = self.activation.apply(*v + self.bias[o]);
                    }
                }
            }
        }
        Image2d::new(self.out_channels, oh, ow, out)
    }
}

/// A sequence of convolution layers with matching channel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("conv stack needs at least one layer".to_string()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::validation(format!(
                    "conv stack channel mismatch: {} out feeds {} in",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels
    }

    pub fn forward(&self, x: &Image2d) -> Result<Image2d> {
        let mut cur = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Modality adapter: `in_channels -> 4 * max(in_channels, 3) -> 3`
    /// with a GELU between the two convolutions. Spatial size is
    /// preserved (`stride 1`, `padding kernel/2`).
    pub fn madapter(in_channels: usize, kernel: usize, seed: u64) -> Result<Self> {
        let hidden = CONV_ADAPTER_EXPANSION * in_channels.max(MADAPTER_OUT_CHANNELS);
        Self::new(vec![
            ConvLayer::seeded(
                ConvKind::Conv,
                in_channels,
                hidden,
                kernel,
                1,
                kernel / 2,
                0,
                Activation::Gelu,
                seed,
            )?,
            ConvLayer::seeded(
                ConvKind::Conv,
                hidden,
                MADAPTER_OUT_CHANNELS,
                kernel,
                1,
                kernel / 2,
                0,
                Activation::Identity,
                seed.wrapping_add(1),
            )?,
        ])
    }

    /// Multi-class adapter: `K -> 4K -> K` logit refinement, spatial size
    /// preserved.
    pub fn mc_adapter(num_classes: usize, kernel: usize, seed: u64) -> Result<Self> {
        Self::new(vec![
            ConvLayer::seeded(
                ConvKind::Conv,
                num_classes,
                CONV_ADAPTER_EXPANSION * num_classes,
                kernel,
                1,
                kernel / 2,
                0,
                Activation::Gelu,
                seed,
            )?,
            ConvLayer::seeded(
                ConvKind::Conv,
                CONV_ADAPTER_EXPANSION * num_classes,
                num_classes,
                kernel,
                1,
                kernel / 2,
                0,
                Activation::Identity,
                seed.wrapping_add(1),
            )?,
        ])
    }

    /// Multi-class adapter weights that reproduce the input exactly:
    /// 1x1 kernels where hidden channel `h` copies class `h mod K` and
    /// output channel `o` reads back hidden channel `o`.
    pub fn mc_identity(num_classes: usize) -> Result<Self> {
        let k = num_classes;
        let hidden = CONV_ADAPTER_EXPANSION * k;
        let mut w1 = vec![0.0; hidden * k];
        for h in 0..hidden {
            w1[h * k + h % k] = 1.0;
        }
        let mut w2 = vec![0.0; k * hidden];
        for o in 0..k {
            w2[o * hidden + o] = 1.0;
        }
        Self::new(vec![
            ConvLayer::conv(k, hidden, 1, 1, 0, w1, vec![0.0; hidden], Activation::Identity)?,
            ConvLayer::conv(hidden, k, 1, 1, 0, w2, vec![0.0; k], Activation::Identity)?,
        ])
    }
}

fn check_adapter_stack(
    stack: &ConvStack,
    in_channels: usize,
    out_channels: usize,
    label: &str,
) -> Result<()> {
    if stack.layers().len() != 2 {
        return Err(Error::validation(format!(
            "{label} stack must have exactly two layers, got {}",
            stack.layers().len()
        )));
    }
    let hidden = CONV_ADAPTER_EXPANSION * in_channels.max(out_channels);
    if stack.in_channels() != in_channels
        || stack.out_channels() != out_channels
        || stack.layers()[0].out_channels != hidden
    {
        return Err(Error::validation(format!(
            "{label} stack must map {in_channels} -> {hidden} -> {out_channels} channels, \
             got {} -> {} -> {}",
            stack.in_channels(),
            stack.layers()[0].out_channels,
            stack.out_channels()
        )));
    }
    Ok(())
}

/// Runs a modality-adapter stack on an `M`-channel image, producing the
/// 3-channel input expected by an RGB-pretrained encoder. The stack must
/// have the adapter shape and preserve the spatial grid.
pub fn madapter_forward(x: &Image2d, stack: &ConvStack) -> Result<Image2d> {
    check_adapter_stack(stack, x.channels(), MADAPTER_OUT_CHANNELS, "modality adapter")?;
    let out = stack.forward(x)?;
    if (out.height(), out.width()) != (x.height(), x.width()) {
        return Err(Error::validation(format!(
            "modality adapter must preserve the spatial grid, got {}x{} from {}x{}",
            out.height(),
            out.width(),
            x.height(),
            x.width()
        )));
    }
    Ok(out)
}

/// Per-voxel softmax over `scores`, written into `probs`; both are
/// `K`-length scratch slices. Subtracting the max keeps the exponentials
/// in range for any finite logits.
fn softmax_into(scores: &[f64], probs: &mut [f64]) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for (p, &s) in probs.iter_mut().zip(scores) {
        let e = (s - max).exp();
        *p = e;
        total += e;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
}

/// Index of the largest score; ties resolve to the smallest class id.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Refines a `K`-channel logit volume with a multi-class adapter stack,
/// then resolves it into probabilities and exclusive labels.
///
/// The stack runs independently on every z slice. Returns the softmax
/// probability volume (same shape as `logits`) and the argmax label
/// volume; ties pick the smallest class id.
pub fn mcadapter_fuse(
    logits: &ScalarVolume,
    stack: &ConvStack,
) -> Result<(ScalarVolume, LabelVolume)> {
    let k = logits.channels();
    if k > MAX_CLASSES {
        return Err(Error::validation(format!(
            "fuse supports at most {MAX_CLASSES} classes, got {k}"
        )));
    }
    check_adapter_stack(stack, k, k, "multi-class adapter")?;
    let [nx, ny, nz] = logits.dims();

    let mut refined = ScalarVolume::zeros(logits.dims(), logits.spacing(), k)?;
    for z in 0..nz {
        let mut plane = vec![0.0; k * ny * nx];
        for c in 0..k {
            for y in 0..ny {
                for x in 0..nx {
                    plane[(c * ny + y) * nx + x] = logits.values()[logits.index(c, x, y, z)];
                }
            }
        }
        let image = Image2d::new(k, ny, nx, plane)?;
        let out = stack.forward(&image)?;
        if out.shape() != (k, ny, nx) {
            return Err(Error::validation(format!(
                "multi-class adapter must preserve the slice grid, got {:?} from ({k}, {ny}, {nx})",
                out.shape()
            )));
        }
        for c in 0..k {
            for y in 0..ny {
                for x in 0..nx {
                    let i = refined.index(c, x, y, z);
                    refined.values_mut()[i] = out.at(c, y, x);
                }
            }
        }
    }

    let mut probs = ScalarVolume::zeros(logits.dims(), logits.spacing(), k)?;
    let mut labels = vec![0u8; nx * ny * nz];
    let mut scores = vec![0.0; k];
    let mut soft = vec![0.0; k];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                for (c, s) in scores.iter_mut().enumerate() {
                    *s = refined.values()[refined.index(c, x, y, z)];
                }
                softmax_into(&scores, &mut soft);
                for c in 0..k {
                    let i = probs.index(c, x, y, z);
                    probs.values_mut()[i] = soft[c];
                }
                labels[(z * ny + y) * nx + x] = argmax(&scores) as u8;
            }
        }
    }
    let labels = LabelVolume::new(logits.dims(), logits.spacing(), k, labels)?;
    Ok((probs, labels))
}
