//! Factorized spatio-temporal UNet ε-predictor.
//!
//! Every stage runs `[2D conv block → 1D temporal conv → 2D self-attention →
//! 1D temporal self-attention → text cross-attention]`. The temporal layers
//! are residual with zero-initialized output projections, so a freshly
//! initialized network acts on each frame independently, and image mode
//! (a single frame) simply skips them.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::TextContext;
use crate::error::{Error, Result};
use crate::nn::{self, join, Attention, Builder, Conv1d, Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::noise;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Video,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub frame_count: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub base_width: usize,
    pub depth: usize,
    pub attention_heads: usize,
    pub text_dim: usize,
    pub temporal_pos_embed: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            frame_count: 16,
            latent_height: 16,
            latent_width: 16,
            base_width: 64,
            depth: 2,
            attention_heads: 4,
            text_dim: 64,
            temporal_pos_embed: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_channels == 0 || self.frame_count == 0 || self.base_width == 0 {
            return bad("latent_channels, frame_count and base_width must be >= 1".into());
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        let div = 1usize << (self.depth - 1);
        if self.latent_height % div != 0 || self.latent_width % div != 0 {
            return bad(format!(
                "latent size {}x{} not divisible by {div}",
                self.latent_height, self.latent_width
            ));
        }
        if self.attention_heads == 0 || self.base_width % self.attention_heads != 0 {
            return bad(format!(
                "base_width {} not divisible by {} heads",
                self.base_width, self.attention_heads
            ));
        }
        if self.text_dim == 0 {
            return bad("text_dim must be >= 1".into());
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    fn time_dim(&self) -> usize {
        4 * self.base_width
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: candle_nn::GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder, path: &str, c_in: usize, c_out: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: nn::group_norm(b, &join(path, "norm1"), c_in)?,
            conv1: Conv2d::new(b, &join(path, "conv1"), c_in, c_out, 3, 1)?,
            time_proj: Linear::new(b, &join(path, "time_proj"), time_dim, c_out)?,
            norm2: nn::group_norm(b, &join(path, "norm2"), c_out)?,
            conv2: Conv2d::new(b, &join(path, "conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(b, &join(path, "skip"), c_in, c_out, 1, 1)?)
            },
        })
    }

    fn forward(&self, xs: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(xs)?.silu()?)?;
        let t = self.time_proj.forward(temb)?;
        let (n, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((n, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(xs)?,
            None => xs.clone(),
        };
        Ok((skip + h)?)
    }
}

/// `(B·F, C, H, W)` ↔ `(B·H·W, C, F)`.
fn to_temporal_channels(xs: &Tensor, frames: usize) -> Result<Tensor> {
    let (n, c, h, w) = xs.dims4()?;
    Ok(xs
        .reshape((n / frames, frames, c, h, w))?
        .permute((0, 3, 4, 2, 1))?
        .contiguous()?
        .reshape((n / frames * h * w, c, frames))?)
}

fn from_temporal_channels(xs: &Tensor, batch: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, c, frames) = xs.dims3()?;
    Ok(xs
        .reshape((batch, h, w, c, frames))?
        .permute((0, 4, 3, 1, 2))?
        .contiguous()?
        .reshape((batch * frames, c, h, w))?)
}

/// `(B·F, C, H, W)` ↔ `(B·H·W, F, C)`.
fn to_temporal_tokens(xs: &Tensor, frames: usize) -> Result<Tensor> {
    let (n, c, h, w) = xs.dims4()?;
    Ok(xs
        .reshape((n / frames, frames, c, h, w))?
        .permute((0, 3, 4, 1, 2))?
        .contiguous()?
        .reshape((n / frames * h * w, frames, c))?)
}

fn from_temporal_tokens(xs: &Tensor, batch: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, frames, c) = xs.dims3()?;
    Ok(xs
        .reshape((batch, h, w, frames, c))?
        .permute((0, 3, 4, 1, 2))?
        .contiguous()?
        .reshape((batch * frames, c, h, w))?)
}

/// `(N, C, H, W)` ↔ `(N, H·W, C)`.
fn to_spatial_tokens(xs: &Tensor) -> Result<Tensor> {
    Ok(xs.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

fn from_spatial_tokens(xs: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, _, c) = xs.dims3()?;
    Ok(xs.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}

#[derive(Debug, Clone)]
struct TemporalConv {
    norm: candle_nn::GroupNorm,
    conv: Conv1d,
}

impl TemporalConv {
    fn forward(&self, xs: &Tensor, batch: usize, frames: usize) -> Result<Tensor> {
        let (_, _, h, w) = xs.dims4()?;
        let seq = to_temporal_channels(xs, frames)?;
        let out = self.conv.forward(&self.norm.forward(&seq)?.silu()?)?;
        Ok((xs + from_temporal_channels(&out, batch, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct SpatialAttention {
    norm: candle_nn::GroupNorm,
    attn: Attention,
}

impl SpatialAttention {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = xs.dims4()?;
        let tokens = to_spatial_tokens(&self.norm.forward(xs)?)?;
        let out = self.attn.forward(&tokens, None, None)?;
        Ok((xs + from_spatial_tokens(&out, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct TemporalAttention {
    norm: LayerNorm,
    frame_embed: Option<Tensor>,
    attn: Attention,
}

impl TemporalAttention {
    fn forward(&self, xs: &Tensor, batch: usize, frames: usize) -> Result<Tensor> {
        let (_, _, h, w) = xs.dims4()?;
        let tokens = to_temporal_tokens(xs, frames)?;
        let mut q = self.norm.forward(&tokens)?;
        if let Some(pos) = &self.frame_embed {
            q = q.broadcast_add(&pos.narrow(0, 0, frames)?)?;
        }
        let out = self.attn.forward(&q, None, None)?;
        Ok((xs + from_temporal_tokens(&out, batch, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl CrossAttention {
    fn forward(&self, xs: &Tensor, ctx: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = xs.dims4()?;
        let tokens = self.norm.forward(&to_spatial_tokens(xs)?)?;
        let out = self.attn.forward(&tokens, Some(ctx), mask)?;
        Ok((xs + from_spatial_tokens(&out, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct StageBlock {
    res: ResBlock,
    temporal_conv: TemporalConv,
    spatial_attn: SpatialAttention,
    temporal_attn: TemporalAttention,
    cross_attn: CrossAttention,
}

struct Conditioning<'a> {
    temb: &'a Tensor,
    text: &'a Tensor,
    mask: Option<&'a Tensor>,
    batch: usize,
    frames: usize,
    mode: Mode,
}

impl StageBlock {
    fn new(b: &mut Builder, path: &str, cfg: &DenoiserConfig, c_in: usize, c_out: usize) -> Result<Self> {
        let heads = cfg.attention_heads;
        let frame_embed = if cfg.temporal_pos_embed {
            Some(b.param(&join(path, "tattn.frame_embed"), &[cfg.frame_count, c_out], Init::Normal(0.02))?)
        } else {
            None
        };
        Ok(Self {
            res: ResBlock::new(b, &join(path, "res"), c_in, c_out, cfg.time_dim())?,
            temporal_conv: TemporalConv {
                norm: nn::group_norm(b, &join(path, "tconv.norm"), c_out)?,
                conv: Conv1d::zeroed(b, &join(path, "tconv.conv"), c_out, c_out, 3)?,
            },
            spatial_attn: SpatialAttention {
                norm: nn::group_norm(b, &join(path, "sattn.norm"), c_out)?,
                attn: Attention::new(b, &join(path, "sattn.attn"), c_out, c_out, heads, false)?,
            },
            temporal_attn: TemporalAttention {
                norm: LayerNorm::new(b, &join(path, "tattn.norm"), c_out)?,
                frame_embed,
                attn: Attention::new(b, &join(path, "tattn.attn"), c_out, c_out, heads, true)?,
            },
            cross_attn: CrossAttention {
                norm: LayerNorm::new(b, &join(path, "xattn.norm"), c_out)?,
                attn: Attention::new(b, &join(path, "xattn.attn"), c_out, cfg.text_dim, heads, false)?,
            },
        })
    }

    fn forward(&self, xs: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let mut h = self.res.forward(xs, cond.temb)?;
        if cond.mode == Mode::Video {
            h = self.temporal_conv.forward(&h, cond.batch, cond.frames)?;
        }
        h = self.spatial_attn.forward(&h)?;
        if cond.mode == Mode::Video {
            h = self.temporal_attn.forward(&h, cond.batch, cond.frames)?;
        }
        self.cross_attn.forward(&h, cond.text, cond.mask)
    }
}

#[derive(Debug, Clone)]
struct UNet {
    conv_in: Conv2d,
    time_in: Linear,
    time_out: Linear,
    down: Vec<StageBlock>,
    downsample: Vec<Conv2d>,
    mid: StageBlock,
    up: Vec<StageBlock>,
    upsample: Vec<Conv2d>,
    norm_out: candle_nn::GroupNorm,
    conv_out: Conv2d,
}

/// The ε-prediction network and its parameters.
#[derive(Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    net: UNet,
}

impl Denoiser {
    /// Builds the network with seeded initialization. Temporal output
    /// projections start at exactly zero.
    pub fn init(cfg: &DenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut rng = noise::seeded(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let c2 = 2 * cfg.latent_channels;
        let td = cfg.time_dim();
        let conv_in = Conv2d::new(&mut b, "conv_in", c2, cfg.base_width, 3, 1)?;
        let time_in = Linear::new(&mut b, "time_in", cfg.base_width, td)?;
        let time_out = Linear::new(&mut b, "time_out", td, td)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for s in 0..cfg.depth {
            let c_in = if s == 0 { cfg.base_width } else { cfg.width(s - 1) };
            down.push(StageBlock::new(&mut b, &format!("down{s}"), cfg, c_in, cfg.width(s))?);
            if s + 1 < cfg.depth {
                downsample.push(Conv2d::new(&mut b, &format!("downsample{s}"), cfg.width(s), cfg.width(s), 3, 2)?);
            }
        }
        let deepest = cfg.width(cfg.depth - 1);
        let mid = StageBlock::new(&mut b, "mid", cfg, deepest, deepest)?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for s in 0..cfg.depth {
            up.push(StageBlock::new(&mut b, &format!("up{s}"), cfg, 2 * cfg.width(s), cfg.width(s))?);
            if s > 0 {
                upsample.push(Conv2d::new(&mut b, &format!("upsample{s}"), cfg.width(s), cfg.width(s - 1), 3, 1)?);
            }
        }
        let norm_out = nn::group_norm(&mut b, "norm_out", cfg.base_width)?;
        let conv_out = Conv2d::new(&mut b, "conv_out", cfg.base_width, cfg.latent_channels, 3, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            net: UNet {
                conv_in,
                time_in,
                time_out,
                down,
                downsample,
                mid,
                up,
                upsample,
                norm_out,
                conv_out,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Names of the zero-initialized temporal output projections.
    pub fn temporal_output_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(k, _)| k)
            .filter(|k| k.contains(".tconv.conv.") || k.contains(".tattn.attn.to_out."))
            .cloned()
            .collect()
    }

    /// Predicts ε for a batch `z_concat` of shape `(B, F, 2C, H, W)`: noisy
    /// latent channels first, image-condition channels second. `steps` holds
    /// one diffusion step per batch entry and `text` one context per entry.
    pub fn denoise(&self, z_concat: &Tensor, steps: &[usize], text: &TextContext, mode: Mode) -> Result<Tensor> {
        let (batch, frames, channels, h, w) = z_concat.dims5().map_err(|_| {
            Error::Shape(format!("expected (B, F, 2C, H, W) input, got {:?}", z_concat.dims()))
        })?;
        let c = self.cfg.latent_channels;
        if channels != 2 * c {
            return Err(Error::Shape(format!("expected {} input channels, got {channels}", 2 * c)));
        }
        match mode {
            Mode::Image if frames != 1 => {
                return Err(Error::Mode(format!("image mode needs a single frame, got {frames}")))
            }
            Mode::Video if frames > self.cfg.frame_count => {
                return Err(Error::Mode(format!(
                    "{frames} frames exceed configured {}",
                    self.cfg.frame_count
                )))
            }
            _ => {}
        }
        if steps.len() != batch || text.batch() != batch {
            return Err(Error::Shape(format!(
                "batch {batch} with {} steps and {} text contexts",
                steps.len(),
                text.batch()
            )));
        }
        let n = batch * frames;
        let xs = z_concat.reshape((n, channels, h, w))?;

        let t: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        let temb = nn::sinusoidal_embedding(&t, self.cfg.base_width, self.dtype(), z_concat.device())?;
        let temb = self.net.time_out.forward(&self.net.time_in.forward(&temb)?.silu()?)?.silu()?;
        let temb = repeat_per_frame(&temb, frames)?;
        let ctx = repeat_per_frame(text.embeddings(), frames)?;
        let mask = text.mask().map(|m| repeat_per_frame(m, frames)).transpose()?;
        let cond = Conditioning {
            temb: &temb,
            text: &ctx,
            mask: mask.as_ref(),
            batch,
            frames,
            mode,
        };

        let mut hs = self.net.conv_in.forward(&xs)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for s in 0..self.cfg.depth {
            hs = self.net.down[s].forward(&hs, &cond)?;
            skips.push(hs.clone());
            if s + 1 < self.cfg.depth {
                hs = self.net.downsample[s].forward(&hs)?;
            }
        }
        hs = self.net.mid.forward(&hs, &cond)?;
        for s in (0..self.cfg.depth).rev() {
            hs = Tensor::cat(&[&hs, &skips[s]], 1)?;
            hs = self.net.up[s].forward(&hs, &cond)?;
            if s > 0 {
                let (_, _, hh, ww) = hs.dims4()?;
                hs = self.net.upsample[s - 1].forward(&hs.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        let out = self.net.conv_out.forward(&self.net.norm_out.forward(&hs)?.silu()?)?;
        Ok(out.reshape((batch, frames, c, h, w))?)
    }

    /// Cross-attention probabilities of the first stage for hidden states
    /// `(N, H·W, width)` against one text context per row: shape
    /// `(N, heads, H·W, L)`.
    pub fn cross_attention_probs(&self, hidden: &Tensor, text: &TextContext) -> Result<Tensor> {
        self.net.down[0]
            .cross_attn
            .attn
            .probs(hidden, text.embeddings(), text.mask())
    }
}

/// `(B, ...)` → `(B·F, ...)` with each row repeated `frames` times.
fn repeat_per_frame(xs: &Tensor, frames: usize) -> Result<Tensor> {
    if frames == 1 {
        return Ok(xs.clone());
    }
    let mut dims = xs.dims().to_vec();
    let b = dims[0];
    let mut expanded = vec![b, frames];
    expanded.extend_from_slice(&dims[1..]);
    let out = xs.unsqueeze(1)?.broadcast_as(expanded)?.contiguous()?;
    dims[0] = b * frames;
    Ok(out.reshape(dims)?)
}
