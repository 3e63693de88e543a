//! Frame and text encoders, image-condition composition and the
//! training-time instruction sampling rules.

mod codec;
mod instructions;
mod text;

pub use codec::{Codec, CodecKind, Frame, FrameLatent, LearnedCodec, LearnedCodecConfig};
pub use instructions::{
    compose_image_condition, sample_training_instructions, ImageCondition, InstructionDraw, InstructionSet,
};
pub use text::{TextContext, TextEmbedding, TextEncoder, TextEncoderConfig, Vocab, NULL_TOKEN};
