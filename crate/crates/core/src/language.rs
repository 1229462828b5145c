//! Expression encoding: vocabulary, word embeddings, per-module word
//! attention, phrase embeddings and module weights.
//!
//! Word attention scores each position with a learned per-module query over
//! the word embedding concatenated with a fixed sinusoidal position code.
//! Module weights come from a linear-softmax head over the first, last and
//! mean word embeddings.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, Module};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

/// Whitespace tokenization with lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token/id mapping. Ids 0 and 1 are reserved for padding and unknown tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in the given order, skipping repeats.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::default();
        for t in tokens {
            vocab.push(t.as_ref());
        }
        vocab
    }

    /// Sorted unique tokens of a corpus.
    pub fn build<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut all: Vec<&str> = corpus
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
            .collect();
        all.sort_unstable();
        all.dedup();
        Self::from_tokens(all)
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len() + RESERVED);
            self.tokens.push(token.to_string());
        }
    }

    /// Number of ids including the reserved ones.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        match id {
            PAD_ID => "<pad>",
            UNK_ID => "<unk>",
            _ => self.tokens.get(id - RESERVED).map_or("<unk>", String::as_str),
        }
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line `n` holds id `n + 2`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab = Self::default();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Malformed(format!(
                    "vocabulary line {} is not a single token: {line:?}",
                    line_no + 1
                )));
            }
            if vocab.index.contains_key(line) {
                return Err(Error::Malformed(format!("duplicate vocabulary token {line:?}")));
            }
            vocab.push(line);
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Maps tokens to ids; unseen tokens map to [`UNK_ID`].
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::EmptyExpression);
    }
    Ok(tokens.iter().map(|t| vocab.id(t.as_ref())).collect())
}

/// Sinusoidal position codes with base 10000: even columns `sin`, odd `cos`.
pub fn position_codes(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data)
}

/// Non-padding positions of an id sequence.
pub fn token_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&id| id != PAD_ID).collect()
}

/// Word embeddings `[T x d]`; padding rows are zero and receive no gradient.
pub fn embed(g: &mut Graph, params: &BoundParams, ids: &[usize]) -> Result<Var> {
    let vocab = params.config().vocab_size;
    let rows: Vec<Option<usize>> = ids
        .iter()
        .map(|&id| {
            if id >= vocab {
                Err(Error::Index { index: id, bound: vocab })
            } else {
                Ok((id != PAD_ID).then_some(id))
            }
        })
        .collect::<Result<_>>()?;
    g.gather_rows(params.embedding(), &rows)
}

/// Per-word attention for one module: softmax over positions of
/// `<query_m, [e_t ; pos_t]>` with padding masked.
pub fn word_attention(
    g: &mut Graph,
    params: &BoundParams,
    words: Var,
    mask: &[bool],
    module: Module,
) -> Result<Var> {
    let shape = g.value(words).shape().to_vec();
    let (len, d) = (shape[0], shape[1]);
    let query = params.query(module);
    let q_word = g.slice_rows(query, 0, d)?;
    let q_pos = g.slice_rows(query, d, d)?;
    let codes = g.constant(position_codes(len, d));
    let from_words = g.matmul(words, q_word)?;
    let from_pos = g.matmul(codes, q_pos)?;
    let logits = g.add(from_words, from_pos)?;
    let logits = g.reshape(logits, &[len])?;
    g.softmax(logits, Some(mask))
}

/// `q^m = sum_t lambda_t e_t`.
pub fn phrase_embedding(g: &mut Graph, words: Var, attention: Var) -> Result<Var> {
    g.weighted_rows(attention, words)
}

/// Softmax weights over `(subj, loc, rel)` from `[first ; last ; mean]` of the
/// non-padding word embeddings.
pub fn module_weights(g: &mut Graph, params: &BoundParams, words: Var, mask: &[bool]) -> Result<Var> {
    let live: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let (Some(&first), Some(&last)) = (live.first(), live.last()) else {
        return Err(Error::EmptyExpression);
    };
    let d = g.value(words).cols();
    let first = g.gather_rows(words, &[Some(first)])?;
    let first = g.reshape(first, &[d])?;
    let last = g.gather_rows(words, &[Some(last)])?;
    let last = g.reshape(last, &[d])?;
    let mean = g.mean_rows(words, mask)?;
    let summary = g.concat(&[first, last, mean])?;
    let summary = g.reshape(summary, &[1, 3 * d])?;
    let logits = g.matmul(summary, params.weights_w())?;
    let logits = g.reshape(logits, &[3])?;
    let logits = g.add(logits, params.weights_b())?;
    g.softmax(logits, None)
}

/// Graph handles for one encoded expression.
#[derive(Clone, Debug)]
pub struct ExpressionNodes {
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub words: Var,
    pub attention: [Var; 3],
    pub phrases: [Var; 3],
    pub module_weights: Var,
}

impl ExpressionNodes {
    pub fn values(&self, g: &Graph) -> ExpressionEncoding {
        ExpressionEncoding {
            token_ids: self.token_ids.clone(),
            word_embeddings: g.value(self.words).clone(),
            phrase_embeddings: self.phrases.map(|v| g.value(v).clone()),
            word_attention: self.attention.map(|v| g.value(v).clone()),
            module_weights: g.value(self.module_weights).clone(),
        }
    }
}

/// Materialized expression encoding, indexed by [`Module::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionEncoding {
    pub token_ids: Vec<usize>,
    pub word_embeddings: Tensor,
    pub phrase_embeddings: [Tensor; 3],
    pub word_attention: [Tensor; 3],
    pub module_weights: Tensor,
}

/// Runs the full language side for one id sequence.
pub fn encode_expression(g: &mut Graph, params: &BoundParams, ids: &[usize]) -> Result<ExpressionNodes> {
    let mask = token_mask(ids);
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyExpression);
    }
    let words = embed(g, params, ids)?;
    let mut attention = Vec::with_capacity(3);
    let mut phrases = Vec::with_capacity(3);
    for m in Module::ALL {
        let a = word_attention(g, params, words, &mask, m)?;
        phrases.push(phrase_embedding(g, words, a)?);
        attention.push(a);
    }
    let weights = module_weights(g, params, words, &mask)?;
    Ok(ExpressionNodes {
        token_ids: ids.to_vec(),
        mask,
        words,
        attention: [attention[0], attention[1], attention[2]],
        phrases: [phrases[0], phrases[1], phrases[2]],
        module_weights: weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelConfig, ModelParams};

    fn fixture_vocab() -> Vocabulary {
        // ids: a=5, brown=17, bowl=42 once the fillers are placed.
        let mut tokens: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        tokens[3] = "a".into();
        tokens[15] = "brown".into();
        tokens.push("bowl".into());
        Vocabulary::from_tokens(tokens)
    }

    #[test]
    fn encode_tokens_examples() {
        let vocab = fixture_vocab();
        assert_eq!(encode_tokens(&["a", "brown", "bowl"], &vocab).unwrap(), vec![5, 17, 42]);
        assert_eq!(encode_tokens(&["zzz"], &vocab).unwrap(), vec![UNK_ID]);
        let empty: [&str; 0] = [];
        assert!(matches!(encode_tokens(&empty, &vocab), Err(Error::EmptyExpression)));
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let vocab = Vocabulary::build([&tokenize("The red Ball")[..], &tokenize("red cup")[..]]);
        assert_eq!(vocab.tokens(), &["ball", "cup", "red", "the"]);
        assert_eq!(vocab.id("ball"), 2);
        let text = vocab.to_text();
        assert_eq!(text.lines().next(), Some("ball"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), vocab);
        assert!(Vocabulary::from_text("a\na\n").is_err());
    }

    fn params(d: usize) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                embed_dim: d,
                hidden_dim: 3,
                visual_dim: 2,
                vocab_size: 8,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn padding_rows_are_zero_and_duplicates_identical() {
        let p = params(4);
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        let words = embed(&mut g, &b, &[3, 0, 3]).unwrap();
        let w = g.value(words);
        assert!(w.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(w.row(0), w.row(2));
        assert!(matches!(embed(&mut g, &b, &[8]), Err(Error::Index { .. })));
    }

    #[test]
    fn embedding_gradient_touches_only_used_rows() {
        let p = params(4);
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        let words = embed(&mut g, &b, &[0, 5]).unwrap();
        let s = g.sum(words);
        g.backward(s).unwrap();
        let grad = g.grad(b.embedding());
        for r in 0..8 {
            let expected = if r == 5 { 1.0 } else { 0.0 };
            assert!(grad.row(r).iter().all(|&v| v == expected), "row {r}");
        }
    }

    #[test]
    fn singleton_attention_is_one() {
        let p = params(4);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let enc = encode_expression(&mut g, &b, &[4]).unwrap();
        for a in enc.attention {
            assert_eq!(g.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn identical_words_without_position_signal_are_uniform() {
        let mut p = params(4);
        // Zero the position half of the subject query.
        let q = p.get_mut("lang.query.subj").unwrap();
        q.data_mut()[4..].fill(0.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let words = embed(&mut g, &b, &[6, 6, 6]).unwrap();
        let a = word_attention(&mut g, &b, words, &[true; 3], Module::Subject).unwrap();
        for &v in g.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn phrase_embedding_selects_and_averages() {
        let mut g = Graph::new();
        let words = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let one_hot = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let q = phrase_embedding(&mut g, words, one_hot).unwrap();
        assert_eq!(g.value(q).data(), &[3.0, 4.0]);
        let uniform = g.constant(Tensor::vector(vec![1.0 / 3.0; 3]));
        let q = phrase_embedding(&mut g, words, uniform).unwrap();
        assert!((g.value(q).data()[0] - 3.0).abs() < 1e-15);
        assert!((g.value(q).data()[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_uniform_module_weights() {
        let mut p = params(4);
        p.get_mut("lang.weights.w").unwrap().data_mut().fill(0.0);
        p.get_mut("lang.weights.b").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let enc = encode_expression(&mut g, &b, &[2, 3, 4]).unwrap();
        for &w in g.value(enc.module_weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn all_padding_is_empty() {
        let p = params(4);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        assert!(matches!(encode_expression(&mut g, &b, &[0, 0]), Err(Error::EmptyExpression)));
    }

    #[test]
    fn position_codes_first_row() {
        let p = position_codes(2, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((p.row(1)[2] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
