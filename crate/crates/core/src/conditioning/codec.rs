use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::nn::{Builder, Conv2d, ParamStore};
use crate::noise;
use crate::trainer::optim::{AdamW, AdamWConfig};

/// A `3×H×W` frame with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Frame(Tensor);

impl Frame {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, _, _) = data
            .dims3()
            .map_err(|_| Error::Shape(format!("frame must be 3xHxW, got {:?}", data.dims())))?;
        if c != 3 {
            return Err(Error::Shape(format!("frame must have 3 channels, got {c}")));
        }
        let v = data.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return arg("frame values must lie in [0, 1]");
        }
        Ok(Self(data))
    }

    /// Clamps arbitrary decoder output into the valid pixel range.
    pub fn from_decoded(data: &Tensor) -> Result<Self> {
        Self::new(data.clamp(0.0, 1.0)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }
}

/// A `C×H′×W′` frame latent.
#[derive(Debug, Clone)]
pub struct FrameLatent(Tensor);

impl FrameLatent {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims3()
            .map_err(|_| Error::Shape(format!("latent must be CxHxW, got {:?}", data.dims())))?;
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    SpaceToDepth,
    Learned,
}

/// Maps pixel frames to latents and back.
#[derive(Clone)]
pub enum Codec {
    /// Exact rearrangement of `p×p` pixel blocks into channels:
    /// pixel `(c, y, x)` goes to channel `c·p² + (y mod p)·p + (x mod p)` at
    /// position `(y / p, x / p)`.
    SpaceToDepth { patch: usize },
    /// Small frozen convolutional autoencoder.
    Learned(LearnedCodec),
}

impl Codec {
    pub fn space_to_depth(patch: usize) -> Self {
        Self::SpaceToDepth { patch }
    }

    pub fn patch(&self) -> usize {
        match self {
            Self::SpaceToDepth { patch } => *patch,
            Self::Learned(_) => 2,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Self::SpaceToDepth { patch } => 3 * patch * patch,
            Self::Learned(c) => c.cfg.latent_channels,
        }
    }

    /// Whether `decode(encode(x)) == x` holds bit for bit.
    pub fn is_exact(&self) -> bool {
        matches!(self, Self::SpaceToDepth { .. })
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let p = self.patch();
        if p == 0 || h % p != 0 || w % p != 0 {
            return arg(format!("frame {h}x{w} not divisible by patch {p}"));
        }
        Ok(())
    }

    /// Encodes a stack of frames `(N, 3, H, W)` into `(N, C, H/p, W/p)`.
    pub fn encode_frames(&self, frames: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = frames.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        self.check_dims(h, w)?;
        match self {
            Self::SpaceToDepth { patch: p } => {
                let p = *p;
                Ok(frames
                    .reshape((n, 3, h / p, p, w / p, p))?
                    .permute((0, 1, 3, 5, 2, 4))?
                    .contiguous()?
                    .reshape((n, 3 * p * p, h / p, w / p))?)
            }
            Self::Learned(codec) => codec.encode(frames),
        }
    }

    /// Inverse of [`Codec::encode_frames`]; no clamping is applied.
    pub fn decode_frames(&self, latents: &Tensor) -> Result<Tensor> {
        let (n, c, hp, wp) = latents.dims4()?;
        if c != self.latent_channels() {
            return Err(Error::Shape(format!(
                "expected {} latent channels, got {c}",
                self.latent_channels()
            )));
        }
        match self {
            Self::SpaceToDepth { patch: p } => {
                let p = *p;
                Ok(latents
                    .reshape((n, 3, p, p, hp, wp))?
                    .permute((0, 1, 4, 2, 5, 3))?
                    .contiguous()?
                    .reshape((n, 3, hp * p, wp * p))?)
            }
            Self::Learned(codec) => codec.decode(latents),
        }
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<FrameLatent> {
        FrameLatent::new(self.encode_frames(&frame.tensor().unsqueeze(0)?)?.squeeze(0)?)
    }

    pub fn decode_frame(&self, latent: &FrameLatent) -> Result<Tensor> {
        Ok(self.decode_frames(&latent.tensor().unsqueeze(0)?)?.squeeze(0)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnedCodecConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LearnedCodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            hidden: 32,
            steps: 500,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// `conv → SiLU → stride-2 conv` encoder with a mirrored
/// `upsample → conv → SiLU → conv` decoder.
#[derive(Clone)]
pub struct LearnedCodec {
    cfg: LearnedCodecConfig,
    params: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
}

impl LearnedCodec {
    pub fn init(cfg: &LearnedCodecConfig) -> Result<Self> {
        let mut params = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = noise::seeded(cfg.seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let (c, h) = (cfg.latent_channels, cfg.hidden);
        let enc1 = Conv2d::new(&mut b, "enc1", 3, h, 3, 1)?;
        let enc2 = Conv2d::new(&mut b, "enc2", h, c, 3, 2)?;
        let dec1 = Conv2d::new(&mut b, "dec1", c, h, 3, 1)?;
        let dec2 = Conv2d::new(&mut b, "dec2", h, 3, 3, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            enc1,
            enc2,
            dec1,
            dec2,
        })
    }

    pub fn config(&self) -> &LearnedCodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn load(cfg: &LearnedCodecConfig, values: &BTreeMap<String, Tensor>) -> Result<Self> {
        let codec = Self::init(cfg)?;
        codec.params.load(values)?;
        Ok(codec)
    }

    fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let x = frames.to_dtype(DType::F32)?;
        let h = self.enc1.forward(&x)?.silu()?;
        Ok(self.enc2.forward(&h)?.to_dtype(frames.dtype())?)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let z = latents.to_dtype(DType::F32)?;
        let (_, _, h, w) = z.dims4()?;
        let up = z.upsample_nearest2d(2 * h, 2 * w)?;
        let x = self.dec2.forward(&self.dec1.forward(&up)?.silu()?)?;
        Ok(x.to_dtype(latents.dtype())?)
    }

    /// Fits the autoencoder to reconstruct `frames` `(N, 3, H, W)` and
    /// returns it with the per-step reconstruction losses. The result is
    /// meant to be used frozen.
    pub fn train(cfg: &LearnedCodecConfig, frames: &Tensor) -> Result<(Self, Vec<f64>)> {
        let codec = Self::init(cfg)?;
        let frames = frames.to_dtype(DType::F32)?;
        let n = frames.dim(0)?;
        if n == 0 {
            return arg("no frames to train the codec on");
        }
        let mut opt = AdamW::new(
            &codec.params,
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = noise::seeded(noise::derive_seed(cfg.seed, 1));
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let idx: Vec<u32> = (0..cfg.batch_size.min(n))
                .map(|_| rng.random_range(0..n as u32))
                .collect();
            let batch = frames.index_select(&Tensor::new(idx, &Device::Cpu)?, 0)?;
            let recon = codec.decode(&codec.encode(&batch)?)?;
            let loss = (recon - &batch)?.sqr()?.mean_all()?;
            losses.push(loss.to_scalar::<f32>()? as f64);
            let grads = loss.backward()?;
            opt.step(&codec.params, &grads)?;
        }
        Ok((codec, losses))
    }
}
