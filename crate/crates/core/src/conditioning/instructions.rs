use candle_core::Tensor;
use rand::Rng as _;

use super::codec::{Codec, FrameLatent};
use super::text::NULL_TOKEN;
use crate::error::{arg, Error, Result};
use crate::noise::Rng;

/// The `F×C×H′×W′` image condition `[f_first, PADs, f_last]`. Interior
/// slots are always zero; the last slot is zero when no last-frame
/// instruction is given.
#[derive(Debug, Clone)]
pub struct ImageCondition {
    data: Tensor,
    last_present: bool,
}

impl ImageCondition {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn last_present(&self) -> bool {
        self.last_present
    }

    /// Slots that carry an instruction.
    pub fn occupied_slots(&self) -> Vec<usize> {
        let last = self.frames() - 1;
        if self.last_present && last != 0 {
            vec![0, last]
        } else {
            vec![0]
        }
    }

    pub(crate) fn with_tensor(&self, data: Tensor) -> Self {
        Self {
            data,
            last_present: self.last_present,
        }
    }

    /// Copy with the last slot zeroed.
    pub fn without_last(&self) -> Result<Self> {
        if !self.last_present {
            return Ok(self.clone());
        }
        let f = self.frames();
        let head = self.data.narrow(0, 0, f - 1)?;
        let zero = self.data.narrow(0, f - 1, 1)?.zeros_like()?;
        Ok(Self {
            data: Tensor::cat(&[&head, &zero], 0)?,
            last_present: false,
        })
    }

    /// Single-frame condition used for image-modality batches.
    pub fn single(f_first: &FrameLatent) -> Result<Self> {
        Ok(Self {
            data: f_first.tensor().unsqueeze(0)?,
            last_present: false,
        })
    }
}

pub fn compose_image_condition(
    f_first: &FrameLatent,
    f_last: Option<&FrameLatent>,
    frames: usize,
) -> Result<ImageCondition> {
    if frames < 2 {
        return arg(format!("image condition needs at least 2 frames, got {frames}"));
    }
    let first = f_first.tensor();
    if let Some(last) = f_last {
        if last.tensor().dims() != first.dims() {
            return Err(Error::Shape(format!(
                "first {:?} and last {:?} latents differ",
                first.dims(),
                last.tensor().dims()
            )));
        }
    }
    let zero = first.zeros_like()?.unsqueeze(0)?;
    let mut slots = vec![first.unsqueeze(0)?];
    for _ in 1..frames - 1 {
        slots.push(zero.clone());
    }
    slots.push(match f_last {
        Some(l) => l.tensor().unsqueeze(0)?,
        None => zero,
    });
    Ok(ImageCondition {
        data: Tensor::cat(&slots, 0)?,
        last_present: f_last.is_some(),
    })
}

/// The ⟨text, first frame, last frame⟩ instruction triple.
#[derive(Debug, Clone)]
pub struct InstructionSet {
    pub text_tokens: Vec<u32>,
    pub f_first: FrameLatent,
    pub f_last: Option<FrameLatent>,
}

/// What [`sample_training_instructions`] decided, for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionDraw {
    pub last_index: usize,
    pub last_dropped: bool,
    pub text_dropped: bool,
}

/// Training-time instruction sampling: the first frame always, a last frame
/// chosen uniformly among the final three frames and then dropped with
/// probability `eta`, and the caption replaced by the null token with
/// probability `text_drop`. `clip` is `(F, 3, H, W)` in pixel space.
pub fn sample_training_instructions(
    clip: &Tensor,
    caption: &[u32],
    codec: &Codec,
    rng: &mut Rng,
    eta: f64,
    text_drop: f64,
) -> Result<(InstructionSet, InstructionDraw)> {
    let frames = clip.dim(0)?;
    if frames < 4 {
        return arg(format!("clip needs at least 4 frames, got {frames}"));
    }
    if !(0.0..=1.0).contains(&eta) || !(0.0..=1.0).contains(&text_drop) {
        return arg("drop probabilities must lie in [0, 1]");
    }
    let last_index = frames - 3 + rng.random_range(0..3usize);
    let last_dropped = rng.random::<f64>() < eta;
    let text_dropped = rng.random::<f64>() < text_drop;

    let idx = Tensor::new(&[0u32, last_index as u32], clip.device())?;
    let latents = codec.encode_frames(&clip.index_select(&idx, 0)?)?;
    let f_first = FrameLatent::new(latents.get(0)?)?;
    let f_last = if last_dropped {
        None
    } else {
        Some(FrameLatent::new(latents.get(1)?)?)
    };
    let text_tokens = if text_dropped {
        vec![NULL_TOKEN]
    } else {
        caption.to_vec()
    };
    Ok((
        InstructionSet {
            text_tokens,
            f_first,
            f_last,
        },
        InstructionDraw {
            last_index,
            last_dropped,
            text_dropped,
        },
    ))
}
