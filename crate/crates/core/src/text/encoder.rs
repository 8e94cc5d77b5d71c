//! Word-level text encoder: embedding lookup followed by one residual
//! self-attention block.

use candle_core::{DType, Device, Tensor};
use std::collections::HashMap;

use crate::data::{lexicon, Expression};
use crate::error::{argument, Result};
use crate::nn::{key_padding_bias, ops, Init, MultiHeadAttention, ParamGroup, ParamStore};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index = HashMap::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !index.contains_key(&w) && w != "<pad>" && w != "<unk>" {
                index.insert(w.clone(), all.len() as u32);
                all.push(w);
            }
        }
        Self { words: all, index }
    }

    /// Vocabulary of the synthetic expression templates.
    pub fn template() -> Self {
        Self::new(lexicon::template_words())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All entries in id order, the two reserved ones first.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, expression: &Expression) -> Vec<u32> {
        expression.parse.forms().map(|w| self.id(w)).collect()
    }
}

/// Word-level features of one expression, `(L, C)`.
#[derive(Debug, Clone)]
pub struct WordFeatures {
    pub features: Tensor,
}

impl WordFeatures {
    pub fn len(&self) -> usize {
        self.features.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.dim(1).unwrap_or(0)
    }
}

/// Padded token batch.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `(S, L)` token ids, padded with [`PAD_ID`].
    pub ids: Tensor,
    /// `(S, L)` ones on real tokens, in the model dtype.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(sequences: &[Vec<u32>], dtype: DType) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return argument("token batch needs nonempty sequences");
        }
        let len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sequences.len() * len);
        let mut mask = Vec::with_capacity(sequences.len() * len);
        for s in sequences {
            for i in 0..len {
                ids.push(s.get(i).copied().unwrap_or(PAD_ID));
                mask.push(if i < s.len() { 1.0 } else { 0.0 });
            }
        }
        let n = sequences.len();
        Ok(Self {
            ids: Tensor::from_vec(ids, (n, len), &Device::Cpu)?,
            mask: ops::constant(mask, &[n, len], dtype)?,
            lengths: sequences.iter().map(Vec::len).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: Tensor,
    pub attention: MultiHeadAttention,
    positional: bool,
    dim: usize,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, vocab_size: usize, dim: usize, heads: usize, positional: bool) -> Result<Self> {
        Ok(Self {
            embedding: ps.get("text.embedding", &[vocab_size, dim], Init::Normal(1.0), ParamGroup::Head)?,
            attention: MultiHeadAttention::new(ps, "text.attn", dim, heads, ParamGroup::Head)?,
            positional,
            dim,
        })
    }

    /// Features `(S, L, C)` for a padded batch; padded rows carry no meaning.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let (s, l) = tokens.ids.dims2()?;
        let vocab = self.embedding.dim(0)?;
        let flat = tokens.ids.flatten_all()?;
        if flat.to_vec1::<u32>()?.iter().any(|&id| id as usize >= vocab) {
            return argument("token id outside the embedding table");
        }
        let mut x = self.embedding.index_select(&flat, 0)?.reshape((s, l, self.dim))?;
        if self.positional {
            let pe = ops::constant(ops::sinusoidal_1d(l, self.dim), &[1, l, self.dim], x.dtype())?;
            x = x.broadcast_add(&pe)?;
        }
        let bias = key_padding_bias(&tokens.mask)?;
        Ok((&x + self.attention.forward(&x, &x, &x, Some(&bias))?)?)
    }

    pub fn encode(&self, vocab: &Vocabulary, expression: &Expression) -> Result<WordFeatures> {
        let batch = TokenBatch::new(&[vocab.encode(expression)], self.embedding.dtype())?;
        Ok(WordFeatures { features: self.forward(&batch)?.squeeze(0)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{direct_parse, ExpressionKind};

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::template();
        assert_eq!(v.id("clownfish"), UNK_ID);
        assert_ne!(v.id("Red"), UNK_ID);
        assert_eq!(v.id("red"), v.id("RED"));
    }

    #[test]
    fn shape_and_determinism() {
        let vocab = Vocabulary::template();
        let mut ps = ParamStore::new(DType::F64, 1);
        let enc = TextEncoder::new(&mut ps, vocab.len(), 16, 4, false).unwrap();
        let e = Expression::from_parse(direct_parse("red", "circle"), ExpressionKind::Direct);
        let a = enc.encode(&vocab, &e).unwrap();
        let b = enc.encode(&vocab, &e).unwrap();
        assert_eq!(a.features.dims(), &[3, 16]);
        assert_eq!(a.features.to_vec2::<f64>().unwrap(), b.features.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn padding_does_not_change_real_rows() {
        let vocab = Vocabulary::template();
        let mut ps = ParamStore::new(DType::F64, 1);
        let enc = TextEncoder::new(&mut ps, vocab.len(), 16, 4, false).unwrap();
        let short = vec![vocab.id("the"), vocab.id("red"), vocab.id("circle")];
        let long = vec![vocab.id("find"), vocab.id("the"), vocab.id("blue"), vocab.id("box"), vocab.id("left")];
        let alone = enc.forward(&TokenBatch::new(&[short.clone()], DType::F64).unwrap()).unwrap();
        let padded = enc.forward(&TokenBatch::new(&[short, long], DType::F64).unwrap()).unwrap();
        let a = alone.get(0).unwrap().to_vec2::<f64>().unwrap();
        let b = padded.get(0).unwrap().narrow(0, 0, 3).unwrap().to_vec2::<f64>().unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
