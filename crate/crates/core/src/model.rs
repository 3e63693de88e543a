//! The trainable model: denoiser + text encoder, plus the frozen codec and
//! the affine map between codec latents and the diffusion space.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{Codec, CodecKind, FrameLatent, LearnedCodec, LearnedCodecConfig, TextContext, TextEncoder, TextEncoderConfig};
use crate::denoiser::{Denoiser, DenoiserConfig, Mode};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::noise;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub text: TextEncoderConfig,
    pub codec: CodecKind,
    pub patch: usize,
    /// Diffusion-space latent is `(codec latent − shift) · scale`.
    pub latent_shift: f64,
    pub latent_scale: f64,
    #[serde(default)]
    pub learned_codec: Option<LearnedCodecConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            text: TextEncoderConfig::default(),
            codec: CodecKind::SpaceToDepth,
            patch: 2,
            latent_shift: 0.5,
            latent_scale: 2.0,
            learned_codec: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.text.dim != self.denoiser.text_dim {
            return Err(Error::Config(format!(
                "text encoder dim {} != denoiser text_dim {}",
                self.text.dim, self.denoiser.text_dim
            )));
        }
        let channels = match self.codec {
            CodecKind::SpaceToDepth => 3 * self.patch * self.patch,
            CodecKind::Learned => {
                if self.patch != 2 {
                    return Err(Error::Config("learned codec uses patch 2".into()));
                }
                self.learned_codec.as_ref().map_or(12, |c| c.latent_channels)
            }
        };
        if channels != self.denoiser.latent_channels {
            return Err(Error::Config(format!(
                "codec yields {channels} channels, denoiser expects {}",
                self.denoiser.latent_channels
            )));
        }
        if self.latent_scale == 0.0 || !self.latent_scale.is_finite() {
            return Err(Error::Config("latent_scale must be finite and nonzero".into()));
        }
        Ok(())
    }

    /// A small model for smoke runs and tests: `frames` frames on a square
    /// `canvas` (even) with the analytic codec.
    pub fn compact(frames: usize, canvas: usize) -> Self {
        Self {
            denoiser: DenoiserConfig {
                latent_channels: 12,
                frame_count: frames,
                latent_height: canvas / 2,
                latent_width: canvas / 2,
                base_width: 8,
                depth: 2,
                attention_heads: 2,
                text_dim: 8,
                temporal_pos_embed: true,
            },
            text: TextEncoderConfig {
                dim: 8,
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Pixel canvas `(H, W)` implied by the latent size and patch.
    pub fn canvas(&self) -> (usize, usize) {
        (self.denoiser.latent_height * self.patch, self.denoiser.latent_width * self.patch)
    }
}

#[derive(Clone)]
pub struct Model {
    cfg: ModelConfig,
    pub denoiser: Denoiser,
    pub text: TextEncoder,
    codec: Codec,
    params: ParamStore,
}

impl Model {
    pub fn init(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let denoiser = Denoiser::init(&cfg.denoiser, dtype, noise::derive_seed(seed, 0))?;
        let text = TextEncoder::init(&cfg.text, dtype, noise::derive_seed(seed, 1))?;
        let codec = match cfg.codec {
            CodecKind::SpaceToDepth => Codec::space_to_depth(cfg.patch),
            CodecKind::Learned => Codec::Learned(LearnedCodec::init(&cfg.learned_codec.clone().unwrap_or_default())?),
        };
        Self::assemble(cfg.clone(), denoiser, text, codec)
    }

    fn assemble(cfg: ModelConfig, denoiser: Denoiser, text: TextEncoder, codec: Codec) -> Result<Self> {
        let params = ParamStore::merged(&[("unet", denoiser.params()), ("text", text.params())])?;
        Ok(Self {
            cfg,
            denoiser,
            text,
            codec,
            params,
        })
    }

    /// Replaces the codec, e.g. with a separately trained learned codec.
    pub fn with_codec(self, codec: Codec) -> Result<Self> {
        if codec.latent_channels() != self.cfg.denoiser.latent_channels {
            return Err(Error::Config("codec channel count does not match the denoiser".into()));
        }
        Self::assemble(self.cfg, self.denoiser, self.text, codec)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    /// All trainable parameters (`unet.*`, `text.*`).
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn frames(&self) -> usize {
        self.cfg.denoiser.frame_count
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.denoiser.latent_channels
    }

    pub fn text_context(&self, captions: &[Vec<u32>]) -> Result<TextContext> {
        self.text.encode_batch(captions)
    }

    pub fn denoise(&self, z_concat: &Tensor, steps: &[usize], text: &TextContext, mode: Mode) -> Result<Tensor> {
        self.denoiser.denoise(z_concat, steps, text, mode)
    }

    /// Codec latent → diffusion space.
    pub fn to_diffusion(&self, latent: &Tensor) -> Result<Tensor> {
        let (s, k) = (self.cfg.latent_shift, self.cfg.latent_scale);
        Ok(latent.to_dtype(self.dtype())?.affine(k, -s * k)?)
    }

    /// Diffusion space → codec latent.
    pub fn from_diffusion(&self, z: &Tensor) -> Result<Tensor> {
        let (s, k) = (self.cfg.latent_shift, self.cfg.latent_scale);
        Ok(z.affine(1.0 / k, s)?)
    }

    pub fn latent_to_diffusion(&self, latent: &FrameLatent) -> Result<FrameLatent> {
        FrameLatent::new(self.to_diffusion(latent.tensor())?)
    }

    /// Encodes pixel frames `(N, 3, H, W)` straight into diffusion space.
    pub fn encode_pixels(&self, frames: &Tensor) -> Result<Tensor> {
        self.to_diffusion(&self.codec.encode_frames(&frames.to_dtype(self.dtype())?)?)
    }

    /// Decodes diffusion-space latents `(N, C, H′, W′)` to pixels without
    /// clamping.
    pub fn decode_pixels(&self, z: &Tensor) -> Result<Tensor> {
        self.codec.decode_frames(&self.from_diffusion(z)?)
    }

    /// Named tensors of the frozen codec (empty for the analytic codec).
    pub fn codec_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        match &self.codec {
            Codec::SpaceToDepth { .. } => Ok(BTreeMap::new()),
            Codec::Learned(c) => Ok(c
                .params()
                .snapshot()?
                .into_iter()
                .map(|(k, v)| (format!("codec.{k}"), v))
                .collect()),
        }
    }

    /// Restores parameters (and a learned codec when present) from named
    /// tensors as produced by [`Model::params`] and [`Model::codec_tensors`].
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let params: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter(|(k, _)| k.starts_with("unet.") || k.starts_with("text."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.params.load(&params)?;
        if self.cfg.codec == CodecKind::Learned {
            let codec: BTreeMap<String, Tensor> = tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("codec.").map(|n| (n.to_string(), v.clone())))
                .collect();
            let cfg = self.cfg.learned_codec.clone().unwrap_or_default();
            self.codec = Codec::Learned(LearnedCodec::load(&cfg, &codec)?);
        }
        Ok(())
    }
}
