use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::nn::{join, Attention, Builder, Init, LayerNorm, Linear, ParamStore};
use crate::noise;

/// Token id of the unconditional (empty) caption.
pub const NULL_TOKEN: u32 = 0;
const NULL_WORD: &str = "<null>";

/// Closed vocabulary; line index in the vocabulary file is the token id and
/// id 0 is reserved for the null token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(NULL_WORD) {
            return Err(Error::Config(format!("vocabulary must start with {NULL_WORD}")));
        }
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("bad vocabulary entry {w:?} on line {}", i + 1)));
            }
            if ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, ids })
    }

    /// The caption-grammar vocabulary.
    pub fn builtin() -> Self {
        let words = std::iter::once(NULL_WORD)
            .chain(crate::synthdata::VOCAB_WORDS.iter().copied())
            .map(String::from)
            .collect();
        Self::new(words).expect("builtin vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.ids.get(word).copied().ok_or_else(|| Error::Lookup(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("#{id}")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = text.split_whitespace().map(|w| self.id(w)).collect::<Result<_>>()?;
        Ok(if ids.is_empty() { vec![NULL_TOKEN] } else { ids })
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(ids.iter().map(|&i| self.word(i)).collect::<Result<Vec<_>>>()?.join(" "))
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(text.lines().map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocab::builtin().len(),
            dim: 64,
            heads: 4,
            layers: 2,
            max_len: 24,
        }
    }
}

/// An `L×D` caption embedding.
#[derive(Debug, Clone)]
pub struct TextEmbedding(Tensor);

impl TextEmbedding {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of caption embeddings `(B, L, D)`, right-padded, with an additive
/// key mask `(B, L)` when lengths differ.
#[derive(Debug, Clone)]
pub struct TextContext {
    embeddings: Tensor,
    mask: Option<Tensor>,
}

const MASKED: f64 = -1e9;

impl TextContext {
    pub fn new(embeddings: Tensor, mask: Option<Tensor>) -> Result<Self> {
        let (b, l, _) = embeddings.dims3()?;
        if let Some(m) = &mask {
            if m.dims() != [b, l] {
                return Err(Error::Shape(format!("mask {:?} for text {:?}", m.dims(), embeddings.dims())));
            }
        }
        Ok(Self { embeddings, mask })
    }

    pub fn from_embeddings(items: &[TextEmbedding]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Argument("empty text batch".into()))?;
        let dim = first.0.dims()[1];
        let max_len = items.iter().map(TextEmbedding::len).max().unwrap_or(1);
        let ragged = items.iter().any(|e| e.len() != max_len);
        let mut rows = Vec::with_capacity(items.len());
        let mut mask = Vec::with_capacity(items.len() * max_len);
        for e in items {
            let pad = max_len - e.len();
            let row = if pad > 0 {
                let zeros = Tensor::zeros((pad, dim), e.0.dtype(), e.0.device())?;
                Tensor::cat(&[&e.0, &zeros], 0)?
            } else {
                e.0.clone()
            };
            rows.push(row.unsqueeze(0)?);
            mask.extend((0..max_len).map(|i| if i < e.len() { 0.0 } else { MASKED }));
        }
        let embeddings = Tensor::cat(&rows, 0)?;
        let mask = if ragged {
            Some(Tensor::from_vec(mask, (items.len(), max_len), embeddings.device())?.to_dtype(embeddings.dtype())?)
        } else {
            None
        };
        Self::new(embeddings, mask)
    }

    pub fn batch(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    /// Concatenates two contexts along the batch axis.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let (l1, l2) = (self.embeddings.dims()[1], other.embeddings.dims()[1]);
        let l = l1.max(l2);
        let pad = |ctx: &Self, len: usize| -> Result<(Tensor, Tensor)> {
            let (b, _, d) = ctx.embeddings.dims3()?;
            let dt = ctx.embeddings.dtype();
            let dev = ctx.embeddings.device();
            let mask = match &ctx.mask {
                Some(m) => m.clone(),
                None => Tensor::zeros((b, len), dt, dev)?,
            };
            if len == l {
                return Ok((ctx.embeddings.clone(), mask));
            }
            let e = Tensor::cat(&[&ctx.embeddings, &Tensor::zeros((b, l - len, d), dt, dev)?], 1)?;
            let m = Tensor::cat(&[&mask, &Tensor::full(MASKED, (b, l - len), dev)?.to_dtype(dt)?], 1)?;
            Ok((e, m))
        };
        let (e1, m1) = pad(self, l1)?;
        let (e2, m2) = pad(other, l2)?;
        let needs_mask = self.mask.is_some() || other.mask.is_some() || l1 != l2;
        Self::new(
            Tensor::cat(&[&e1, &e2], 0)?,
            if needs_mask { Some(Tensor::cat(&[&m1, &m2], 0)?) } else { None },
        )
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Token embedding followed by bi-directional pre-norm transformer layers.
/// The null token bypasses the encoder and maps to its own embedding row.
#[derive(Clone)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    params: ParamStore,
    token_embed: Tensor,
    pos_embed: Tensor,
    layers: Vec<EncoderLayer>,
    norm_out: LayerNorm,
}

impl TextEncoder {
    pub fn init(cfg: &TextEncoderConfig, dtype: DType, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("text dim {} must be a multiple of {} heads", cfg.dim, cfg.heads)));
        }
        if cfg.vocab_size < 2 || cfg.max_len == 0 {
            return Err(Error::Config("text encoder needs a vocabulary and max_len >= 1".into()));
        }
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut rng = noise::seeded(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let d = cfg.dim;
        let token_embed = b.param("token_embed", &[cfg.vocab_size, d], Init::Normal(0.5))?;
        let pos_embed = b.param("pos_embed", &[cfg.max_len, d], Init::Normal(0.1))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("layer{i}");
            layers.push(EncoderLayer {
                norm1: LayerNorm::new(&mut b, &join(&p, "norm1"), d)?,
                attn: Attention::new(&mut b, &join(&p, "attn"), d, d, cfg.heads, false)?,
                norm2: LayerNorm::new(&mut b, &join(&p, "norm2"), d)?,
                fc1: Linear::new(&mut b, &join(&p, "fc1"), d, 4 * d)?,
                fc2: Linear::new(&mut b, &join(&p, "fc2"), 4 * d, d)?,
            });
        }
        let norm_out = LayerNorm::new(&mut b, "norm_out", d)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            token_embed,
            pos_embed,
            layers,
            norm_out,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<TextEmbedding> {
        if tokens.is_empty() {
            return arg("empty token sequence (use the null token)");
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Lookup(format!("#{t}")));
        }
        if tokens == [NULL_TOKEN] {
            return Ok(TextEmbedding(self.token_embed.narrow(0, 0, 1)?));
        }
        if tokens.contains(&NULL_TOKEN) {
            return arg("null token may only appear alone");
        }
        if tokens.len() > self.cfg.max_len {
            return arg(format!("caption of {} tokens exceeds max_len {}", tokens.len(), self.cfg.max_len));
        }
        let idx = Tensor::new(tokens, self.token_embed.device())?;
        let mut x = self
            .token_embed
            .index_select(&idx, 0)?
            .broadcast_add(&self.pos_embed.narrow(0, 0, tokens.len())?)?
            .unsqueeze(0)?;
        for layer in &self.layers {
            let h = layer.norm1.forward(&x)?;
            x = (&x + layer.attn.forward(&h, None, None)?)?;
            let h = layer.norm2.forward(&x)?;
            x = (&x + layer.fc2.forward(&layer.fc1.forward(&h)?.gelu_erf()?)?)?;
        }
        Ok(TextEmbedding(self.norm_out.forward(&x)?.squeeze(0)?))
    }

    pub fn encode_batch(&self, captions: &[Vec<u32>]) -> Result<TextContext> {
        let items = captions.iter().map(|c| self.encode(c)).collect::<Result<Vec<_>>>()?;
        TextContext::from_embeddings(&items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> TextEncoder {
        TextEncoder::init(
            &TextEncoderConfig {
                dim: 8,
                heads: 2,
                ..Default::default()
            },
            DType::F32,
            1,
        )
        .unwrap()
    }

    #[test]
    fn vocab_roundtrip_and_lookup_errors() {
        let v = Vocab::builtin();
        assert!(v.len() <= 64);
        assert_eq!(v.id("<null>").unwrap(), NULL_TOKEN);
        let ids = v.encode("red square moves right").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "red square moves right");
        assert!(matches!(v.encode("purple square"), Err(Error::Lookup(_))));
        assert_eq!(v.encode("").unwrap(), vec![NULL_TOKEN]);
        let parsed = Vocab::new(v.to_text().lines().map(String::from).collect()).unwrap();
        assert_eq!(parsed, v);
        assert!(Vocab::new(vec!["red".into()]).is_err());
        assert!(Vocab::new(vec!["<null>".into(), "a".into(), "a".into()]).is_err());
    }

    #[test]
    fn null_token_is_single_row() {
        let enc = encoder();
        let e = enc.encode(&[NULL_TOKEN]).unwrap();
        assert_eq!(e.tensor().dims(), &[1, 8]);
        let row = enc.params().get("token_embed").unwrap().as_tensor().get(0).unwrap();
        let diff = (e.tensor().squeeze(0).unwrap() - row).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn shapes_and_determinism() {
        let enc = encoder();
        let toks = [1u32, 2, 3, 4, 5, 6, 7];
        let a = enc.encode(&toks).unwrap();
        assert_eq!(a.tensor().dims(), &[7, 8]);
        let b = enc.encode(&toks).unwrap();
        assert_eq!(
            a.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(matches!(enc.encode(&[999]), Err(Error::Lookup(_))));
        assert!(enc.encode(&[]).is_err());
        assert!(enc.encode(&[1, NULL_TOKEN]).is_err());
    }

    #[test]
    fn batches_pad_and_mask() {
        let enc = encoder();
        let ctx = enc.encode_batch(&[vec![1, 2, 3], vec![NULL_TOKEN]]).unwrap();
        assert_eq!(ctx.embeddings().dims(), &[2, 3, 8]);
        let m = ctx.mask().unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(m[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(m[1][0], 0.0);
        assert!(m[1][1] < -1e8);
        let same = enc.encode_batch(&[vec![1, 2], vec![3, 4]]).unwrap();
        assert!(same.mask().is_none());
        let joined = same.concat(&enc.encode_batch(&[vec![NULL_TOKEN], vec![NULL_TOKEN]]).unwrap()).unwrap();
        assert_eq!(joined.embeddings().dims(), &[4, 2, 8]);
        assert!(joined.mask().is_some());
    }
}
