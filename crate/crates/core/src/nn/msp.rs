//! Multi-scale prediction decoder.
//!
//! Consumes the five encoder feature maps, which all live on the
//! coarsest `H/16 x W/16` grid, and decodes them into class logits at
//! five resolutions: `H/16`, `H/8`, `H/4`, `H/2` and `H`.
//!
//! The decoding ladder (all features `(C_enc, H/16, W/16)`, `F5` the
//! deepest):
//!
//! ```text
//! d5 = gelu(proj(F5))                      1x1 conv, C_enc -> C_dec
//! d4 = gelu(fuse4([up(d5), lat4(F4)]))     up: x2 deconv, lat4: 1 deconv hop
//! d3 = gelu(fuse3([up(d4), lat3(F3)]))     lat3: 2 deconv hops
//! d2 = gelu(fuse2([up(d3), lat2(F2)]))     lat2: 3 deconv hops
//! d1 = gelu(fuse1([up(d2), lat1(F1)]))     lat1: 4 deconv hops
//! ```
//!
//! Every deconvolution doubles the grid (`kernel 3, stride 2, padding 1,
//! output padding 1`); `[.., ..]` is channel concatenation and each
//! `fuse` is a 3x3 convolution from `2 C_dec` back to `C_dec`. A 1x1
//! head maps each `d_i` to `num_classes` logits, so shallower encoder
//! features steer finer prediction scales.

use crate::error::{Error, Result};
use crate::nn::activation::Activation;
use crate::nn::conv::{ConvKind, ConvLayer, ConvStack, Image2d};

/// Number of encoder feature maps consumed, and of logit scales emitted.
pub const MSP_STAGES: usize = 5;

/// Grid-doubling steps between the coarsest features and full
/// resolution.
pub const MSP_UPSCALE_STEPS: usize = MSP_STAGES - 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MspGenerator {
    encoder_channels: usize,
    decoder_channels: usize,
    num_classes: usize,
    proj_deep: ConvLayer,
    /// `ups[s]` doubles the running decoder grid at stage `s`.
    ups: Vec<ConvLayer>,
    /// `laterals[s]` lifts the matching encoder feature map onto the
    /// stage grid: `s + 1` doubling hops for stage `s`.
    laterals: Vec<ConvStack>,
    fuses: Vec<ConvLayer>,
    /// `heads[i]` maps the decoder state with resolution divisor `2^i`
    /// to logits; `heads[0]` is full resolution.
    heads: Vec<ConvLayer>,
}

fn double_hop(
    in_channels: usize,
    out_channels: usize,
    seed: Option<u64>,
) -> Result<ConvLayer> {
    match seed {
        Some(s) => ConvLayer::seeded(
            ConvKind::ConvTranspose,
            in_channels,
            out_channels,
            3,
            2,
            1,
            1,
            Activation::Identity,
            s,
        ),
        None => ConvLayer::conv_transpose(
            in_channels,
            out_channels,
            3,
            2,
            1,
            1,
            vec![0.0; out_channels * in_channels * 9],
            vec![0.0; out_channels],
            Activation::Identity,
        ),
    }
}

impl MspGenerator {
    /// Seeded uniform weights with zero biases.
    pub fn seeded(
        encoder_channels: usize,
        decoder_channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(encoder_channels, decoder_channels, num_classes, Some(seed))
    }

    /// All-zero weights; every logit the decoder emits is then zero.
    pub fn zeros(
        encoder_channels: usize,
        decoder_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Self::build(encoder_channels, decoder_channels, num_classes, None)
    }

    fn build(
        encoder_channels: usize,
        decoder_channels: usize,
        num_classes: usize,
        seed: Option<u64>,
    ) -> Result<Self> {
        if encoder_channels == 0 || decoder_channels == 0 || num_classes == 0 {
            return Err(Error::validation(format!(
                "decoder needs positive channel and class counts, got \
                 ({encoder_channels}, {decoder_channels}, {num_classes})"
            )));
        }
        let mut counter = 0u64;
        let mut next = |base: Option<u64>| {
            counter += 1;
            base.map(|s| s.wrapping_add(counter))
        };

        let make_conv = |in_ch: usize, out_ch: usize, kernel: usize, act, s: Option<u64>| {
            match s {
                Some(seed) => ConvLayer::seeded(
                    ConvKind::Conv,
                    in_ch,
                    out_ch,
                    kernel,
                    1,
                    kernel / 2,
                    0,
                    act,
                    seed,
                ),
                None => ConvLayer::conv(
                    in_ch,
                    out_ch,
                    kernel,
                    1,
                    kernel / 2,
                    vec![0.0; out_ch * in_ch * kernel * kernel],
                    vec![0.0; out_ch],
                    act,
                ),
            }
        };

        let proj_deep = make_conv(
            encoder_channels,
            decoder_channels,
            1,
            Activation::Gelu,
            next(seed),
        )?;

        let mut ups = Vec::with_capacity(MSP_UPSCALE_STEPS);
        let mut laterals = Vec::with_capacity(MSP_UPSCALE_STEPS);
        let mut fuses = Vec::with_capacity(MSP_UPSCALE_STEPS);
        for stage in 0..MSP_UPSCALE_STEPS {
            ups.push(double_hop(decoder_channels, decoder_channels, next(seed))?);
            let mut hops = vec![double_hop(encoder_channels, decoder_channels, next(seed))?];
            for _ in 0..stage {
                hops.push(double_hop(decoder_channels, decoder_channels, next(seed))?);
            }
            laterals.push(ConvStack::new(hops)?);
            fuses.push(make_conv(
                2 * decoder_channels,
                decoder_channels,
                3,
                Activation::Gelu,
                next(seed),
            )?);
        }
        let mut heads = Vec::with_capacity(MSP_STAGES);
        for _ in 0..MSP_STAGES {
            heads.push(make_conv(
                decoder_channels,
                num_classes,
                1,
                Activation::Identity,
                next(seed),
            )?);
        }
        Ok(Self {
            encoder_channels,
            decoder_channels,
            num_classes,
            proj_deep,
            ups,
            laterals,
            fuses,
            heads,
        })
    }

    pub fn encoder_channels(&self) -> usize {
        self.encoder_channels
    }

    pub fn decoder_channels(&self) -> usize {
        self.decoder_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Decodes the feature maps, ordered shallow to deep (`F1 .. F5`).
    pub fn forward(&self, features: &[Image2d; MSP_STAGES]) -> Result<MspOutputs> {
        let shape = features[0].shape();
        if shape.0 != self.encoder_channels {
            return Err(Error::validation(format!(
                "decoder expects {} encoder channels, features have {}",
                self.encoder_channels, shape.0
            )));
        }
        for (i, f) in features.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::validation(format!(
                    "feature {} has shape {:?}, expected {shape:?}",
                    i + 1,
                    f.shape()
                )));
            }
        }

        // logits[i] holds the head output with resolution divisor 2^i.
        let mut logits: Vec<Option<Image2d>> = vec![None; MSP_STAGES];
        let mut d = self.proj_deep.forward(&features[MSP_STAGES - 1])?;
        logits[MSP_STAGES - 1] = Some(self.heads[MSP_STAGES - 1].forward(&d)?);

        for stage in 0..MSP_UPSCALE_STEPS {
            let up = self.ups[stage].forward(&d)?;
            let lateral = self.laterals[stage].forward(&features[MSP_STAGES - 2 - stage])?;
            if up.shape() != lateral.shape() {
                return Err(Error::validation(format!(
                    "stage {stage}: upsampled grid {:?} does not match lateral grid {:?}",
                    up.shape(),
                    lateral.shape()
                )));
            }
            let mut cat = up.data().to_vec();
            cat.extend_from_slice(lateral.data());
            let cat = Image2d::new(
                2 * self.decoder_channels,
                up.height(),
                up.width(),
                cat,
            )?;
            d = self.fuses[stage].forward(&cat)?;
            let head = MSP_STAGES - 2 - stage;
            logits[head] = Some(self.heads[head].forward(&d)?);
        }

        let mut out = logits.into_iter().map(|l| l.unwrap());
        let final_logits = out.next().unwrap();
        Ok(MspOutputs {
            final_logits,
            deep_supervision: out.collect(),
        })
    }
}

/// Logits at every decoder scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MspOutputs {
    /// Full-resolution logits, `(num_classes, H, W)`.
    pub final_logits: Image2d,
    /// Coarser logits ordered fine to coarse: divisors 2, 4, 8, 16.
    pub deep_supervision: Vec<Image2d>,
}

impl MspOutputs {
    /// All five heads ordered fine to coarse; index `i` has resolution
    /// divisor `2^i`. This matches the layout the deep-supervision loss
    /// weights expect.
    pub fn supervised_heads(&self) -> Vec<&Image2d> {
        let mut heads = vec![&self.final_logits];
        heads.extend(self.deep_supervision.iter());
        heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(
        c_enc: usize,
        h: usize,
        w: usize,
        seed: u64,
    ) -> [Image2d; MSP_STAGES] {
        std::array::from_fn(|i| Image2d::seeded(c_enc, h, w, seed + i as u64).unwrap())
    }

    #[test]
    fn decodes_the_documented_shape_ladder() {
        let msp = MspGenerator::seeded(16, 16, 4, 1).unwrap();
        let out = msp.forward(&features(16, 4, 4, 5)).unwrap();
        assert_eq!(out.final_logits.shape(), (4, 64, 64));
        let ds: Vec<_> = out.deep_supervision.iter().map(|l| l.shape()).collect();
        assert_eq!(ds, [(4, 32, 32), (4, 16, 16), (4, 8, 8), (4, 4, 4)]);
    }

    #[test]
    fn shape_ladder_holds_for_random_configs() {
        for seed in 0..10u64 {
            let h = 1 + (seed % 3) as usize;
            let w = 1 + (seed % 2) as usize;
            let c_enc = 2 + (seed % 2) as usize;
            let c_dec = 2 + (seed % 3) as usize;
            let k = 1 + (seed % 4) as usize;
            let msp = MspGenerator::seeded(c_enc, c_dec, k, seed).unwrap();
            let out = msp.forward(&features(c_enc, h, w, seed + 40)).unwrap();
            assert_eq!(out.final_logits.shape(), (k, 16 * h, 16 * w));
            assert_eq!(out.deep_supervision.len(), MSP_UPSCALE_STEPS);
            for (i, l) in out.deep_supervision.iter().enumerate() {
                let div = 2usize << i;
                assert_eq!(l.shape(), (k, 16 * h / div, 16 * w / div), "seed {seed}");
            }
            let heads = out.supervised_heads();
            assert_eq!(heads.len(), MSP_STAGES);
            assert_eq!(heads[0].shape(), out.final_logits.shape());
        }
    }

    #[test]
    fn zero_weights_emit_zero_logits_at_every_scale() {
        let msp = MspGenerator::zeros(3, 4, 2).unwrap();
        let out = msp.forward(&features(3, 2, 2, 9)).unwrap();
        for head in out.supervised_heads() {
            assert!(head.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let a = MspGenerator::seeded(2, 3, 2, 11).unwrap();
        let b = MspGenerator::seeded(2, 3, 2, 11).unwrap();
        let c = MspGenerator::seeded(2, 3, 2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let f = features(2, 2, 3, 1);
        assert_eq!(a.forward(&f).unwrap(), b.forward(&f).unwrap());
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let msp = MspGenerator::seeded(2, 2, 2, 0).unwrap();
        let mut f = features(2, 2, 2, 0);
        f[3] = Image2d::seeded(2, 3, 2, 0).unwrap();
        assert!(msp.forward(&f).is_err());
        let narrow = features(3, 2, 2, 0);
        assert!(msp.forward(&narrow).is_err());
        assert!(MspGenerator::seeded(0, 2, 2, 0).is_err());
    }
}
