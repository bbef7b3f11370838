//! Pre-norm transformer block with optional depth-fused adapters.
//!
//! The vanilla block is the usual ViT layout, applied to each depth frame
//! independently (attention never crosses depth slices):
//!
//! ```text
//! y1  = x  + MSA(LN1(x))
//! out = y1 + MLP(LN2(y1))
//! ```
//!
//! With adapters attached, one adapter runs serially after attention and
//! another in parallel to the MLP, both on the full `(D, N, C)` tensor:
//!
//! ```text
//! y2  = adapter_serial(y1)
//! out = y2 + MLP(LN2(y2)) + (adapter_parallel(LN2(y2)) - LN2(y2))
//! ```
//!
//! The parallel term adds only the adapter's residual update, so adapters
//! whose up-projection is zero leave the block's function untouched; the
//! depth matmuls inside the adapters are then the only place depth frames
//! interact.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::activation::Activation;
use crate::nn::adapter::{dfused_forward, AdapterParams};
use crate::nn::tensor::{Mat, Tensor3, INIT_RANGE};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hidden-width multiplier of the MLP (`C -> 4C -> C`).
pub const MLP_EXPANSION: usize = 4;

/// Per-token layer normalization over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if gamma.is_empty() || gamma.len() != beta.len() {
            return Err(Error::validation(
                "layer norm scale and shift must share a positive length".to_string(),
            ));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::validation("layer norm eps must be positive".to_string()));
        }
        if !gamma.iter().chain(&beta).all(|v| v.is_finite()) {
            return Err(Error::validation(
                "layer norm parameters must be finite".to_string(),
            ));
        }
        Ok(Self { gamma, beta, eps })
    }

    /// `gamma = 1`, `beta = 0`: pure normalization.
    pub fn identity(channels: usize) -> Result<Self> {
        Self::new(vec![1.0; channels], vec![0.0; channels], LAYER_NORM_EPS)
    }
}

/// Multi-head self-attention weights; all four projections are `C x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub num_heads: usize,
    pub w_q: Mat,
    pub b_q: Vec<f64>,
    pub w_k: Mat,
    pub b_k: Vec<f64>,
    pub w_v: Mat,
    pub b_v: Vec<f64>,
    pub w_o: Mat,
    pub b_o: Vec<f64>,
}

/// Two-layer MLP, `C -> 4C -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// Everything one block needs besides its (optional) adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams {
    pub channels: usize,
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl TransformerBlockParams {
    /// Seeded random weights: projections and biases uniform in the
    /// initializer range, layer-norm scales perturbed around one.
    pub fn seeded(channels: usize, num_heads: usize, seed: u64) -> Result<Self> {
        if num_heads == 0 || channels % num_heads != 0 {
            return Err(Error::validation(format!(
                "channels {channels} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vals =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect() };
        let c = channels;
        let hidden = MLP_EXPANSION * c;
        let ln = |vals: &mut dyn FnMut(usize) -> Vec<f64>| -> Result<LayerNormParams> {
            let gamma = vals(c).iter().map(|v| 1.0 + v).collect();
            LayerNormParams::new(gamma, vals(c), LAYER_NORM_EPS)
        };
        Ok(Self {
            channels: c,
            ln1: ln(&mut vals)?,
            attn: AttentionParams {
                num_heads,
                w_q: Mat::new(c, c, vals(c * c))?,
                b_q: vals(c),
                w_k: Mat::new(c, c, vals(c * c))?,
                b_k: vals(c),
                w_v: Mat::new(c, c, vals(c * c))?,
                b_v: vals(c),
                w_o: Mat::new(c, c, vals(c * c))?,
                b_o: vals(c),
            },
            ln2: ln(&mut vals)?,
            mlp: MlpParams {
                w1: Mat::new(c, hidden, vals(c * hidden))?,
                b1: vals(hidden),
                w2: Mat::new(hidden, c, vals(hidden * c))?,
                b2: vals(c),
                activation: Activation::Gelu,
            },
        })
    }

    fn check(&self, x: &Tensor3) -> Result<()> {
        let c = self.channels;
        if x.channels() != c {
            return Err(Error::validation(format!(
                "block expects {c} channels, input has {}",
                x.channels()
            )));
        }
        if self.attn.num_heads == 0 || c % self.attn.num_heads != 0 {
            return Err(Error::validation(format!(
                "channels {c} must be a positive multiple of num_heads {}",
                self.attn.num_heads
            )));
        }
        let square = [
            ("w_q", &self.attn.w_q),
            ("w_k", &self.attn.w_k),
            ("w_v", &self.attn.w_v),
            ("w_o", &self.attn.w_o),
        ];
        for (name, m) in square {
            if (m.rows(), m.cols()) != (c, c) {
                return Err(Error::validation(format!(
                    "{name} must be {c} x {c}, got {} x {}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let hidden = MLP_EXPANSION * c;
        if (self.mlp.w1.rows(), self.mlp.w1.cols()) != (c, hidden)
            || (self.mlp.w2.rows(), self.mlp.w2.cols()) != (hidden, c)
        {
            return Err(Error::validation(format!(
                "mlp must map {c} -> {hidden} -> {c} channels"
            )));
        }
        for (name, b, want) in [
            ("b_q", &self.attn.b_q, c),
            ("b_k", &self.attn.b_k, c),
            ("b_v", &self.attn.b_v, c),
            ("b_o", &self.attn.b_o, c),
            ("b1", &self.mlp.b1, hidden),
            ("b2", &self.mlp.b2, c),
            ("ln1.gamma", &self.ln1.gamma, c),
            ("ln2.gamma", &self.ln2.gamma, c),
        ] {
            if b.len() != want {
                return Err(Error::validation(format!(
                    "{name} must have {want} entries, got {}",
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

/// The serial and parallel depth-fused adapters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters {
    /// Applied to the attention output (serial insertion).
    pub after_attention: AdapterParams,
    /// Applied to the normalized MLP input; only its residual update is
    /// added (parallel insertion).
    pub parallel_mlp: AdapterParams,
}

impl BlockAdapters {
    pub fn seeded(depth: usize, channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            after_attention: AdapterParams::seeded(depth, channels, seed)?,
            parallel_mlp: AdapterParams::seeded(depth, channels, seed.wrapping_add(10))?,
        })
    }
}

/// Per-token layer norm over the channel axis.
fn layer_norm(x: &Tensor3, p: &LayerNormParams) -> Tensor3 {
    let c = x.channels();
    let mut out = x.clone();
    for token in out.data_mut().chunks_mut(c) {
        let mean = token.iter().sum::<f64>() / c as f64;
        let var = token.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + p.eps).sqrt();
        for (i, v) in token.iter_mut().enumerate() {
            *v = (*v - mean) * inv * p.gamma[i] + p.beta[i];
        }
    }
    out
}

/// `out[i] = bias + tokens[i] . w` for `n` row-major tokens.
fn affine(tokens: &[f64], n: usize, w: &Mat, b: &[f64]) -> Vec<f64> {
    let c_in = w.rows();
    let c_out = w.cols();
    debug_assert_eq!(tokens.len(), n * c_in);
    let mut out = vec![0.0; n * c_out];
    for i in 0..n {
        let row = &tokens[i * c_in..(i + 1) * c_in];
        let dst = &mut out[i * c_out..(i + 1) * c_out];
        dst.copy_from_slice(b);
        for (ci, &xv) in row.iter().enumerate() {
            for (o, &wv) in dst.iter_mut().zip(w.row(ci)) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// Multi-head self-attention over one depth frame of `n` tokens.
fn attention_frame(tokens: &[f64], n: usize, p: &AttentionParams) -> Vec<f64> {
    let c = p.w_q.rows();
    let heads = p.num_heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = affine(tokens, n, &p.w_q, &p.b_q);
    let k = affine(tokens, n, &p.w_k, &p.b_k);
    let v = affine(tokens, n, &p.w_v, &p.b_v);

    let mut ctx = vec![0.0; n * c];
    let mut scores = vec![0.0; n];
    for head in 0..heads {
        let off = head * dh;
        for i in 0..n {
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..dh {
                    dot += q[i * c + off + t] * k[j * c + off + t];
                }
                *s = dot * scale;
            }
            let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = s / total;
                for t in 0..dh {
                    ctx[i * c + off + t] += w * v[j * c + off + t];
                }
            }
        }
    }
    affine(&ctx, n, &p.w_o, &p.b_o)
}

/// Two-layer MLP applied to every token of the tensor.
fn mlp(x: &Tensor3, p: &MlpParams) -> Result<Tensor3> {
    let (d, n, c) = x.shape();
    let act = p.activation;
    let mut hidden = affine(x.data(), d * n, &p.w1, &p.b1);
    for v in &mut hidden {
        *v = act.apply(*v);
    }
    let out = affine(&hidden, d * n, &p.w2, &p.b2);
    Tensor3::new(d, n, c, out)
}

/// Runs one block. Attention and the MLP treat each depth frame as an
/// independent token grid; only the adapters (when given) mix depth.
pub fn transformer_block_forward(
    x: &Tensor3,
    params: &TransformerBlockParams,
    adapters: Option<&BlockAdapters>,
) -> Result<Tensor3> {
    params.check(x)?;
    let (d, n, _) = x.shape();

    let normed = layer_norm(x, &params.ln1);
    let mut y1 = x.clone();
    for di in 0..d {
        let att = attention_frame(normed.frame(di), n, &params.attn);
        for (o, a) in y1.frame_mut(di).iter_mut().zip(&att) {
            *o += a;
        }
    }

    let y2 = match adapters {
        Some(ad) => dfused_forward(&y1, &ad.after_attention)?,
        None => y1,
    };

    let t2 = layer_norm(&y2, &params.ln2);
    let out = y2.add(&mlp(&t2, &params.mlp)?)?;
    match adapters {
        Some(ad) => {
            let refined = dfused_forward(&t2, &ad.parallel_mlp)?;
            out.add(&refined.sub(&t2)?)
        }
        None => Ok(out),
    }
}
