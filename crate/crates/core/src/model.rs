//! A small pre-norm transformer encoder–decoder with language-tag conditioning.
//!
//! Both sides prepend a language tag token: the encoder sees `[tag, x₁ … xₙ]`
//! and the decoder sees `[tag, y₁ … yₘ₋₁]` when teacher-forced on `y₁ … yₘ`.
//! Input and output embeddings are tied and positions use fixed sinusoids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub type TokenId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("token {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("token {0} is not a language tag of this model")]
    UnknownTag(TokenId),
    #[error("input width {got} does not match d_model {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub language_tags: Vec<TokenId>,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, language_tags: Vec<TokenId>) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_len: 64,
            language_tags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if let Some(&t) = self.language_tags.iter().find(|&&t| t >= self.vocab_size) {
            return Err(ModelError::Config(format!(
                "language tag {t} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Per-position vectors produced by the encoder or decoder, bound to a graph.
#[derive(Debug, Clone, Copy)]
pub struct HiddenSeq {
    pub vectors: Var,
    pub len: usize,
    pub lang: TokenId,
}

impl HiddenSeq {
    pub fn values<'g, T: Scalar>(&self, g: &'g Graph<'_, T>) -> &'g Tensor<T> {
        g.value(self.vectors)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attn,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attn,
    norm2: Norm,
    cross_attn: Attn,
    norm3: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
}

struct Init<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-0.08..=0.08))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.w"), &[din, dout]),
            b: self.uniform(format!("{name}.b"), &[dout]),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, ff),
            down: self.linear(&format!("{name}.down"), ff, d),
        }
    }
}

/// Builds the parameter layout. Registration order here is the checkpoint order.
fn build_layout<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore<T>, Layout) {
    let d = cfg.d_model;
    let mut init = Init {
        store: ParamStore::new(),
        rng,
    };
    let embed = init.uniform("embed".into(), &[cfg.vocab_size, d]);
    let encoder = (0..cfg.layers)
        .map(|l| EncoderLayer {
            norm1: init.norm(&format!("enc{l}.norm1"), d),
            attn: init.attn(&format!("enc{l}.attn"), d),
            norm2: init.norm(&format!("enc{l}.norm2"), d),
            ffn: init.ffn(&format!("enc{l}.ffn"), d, cfg.ff_dim),
        })
        .collect();
    let encoder_norm = init.norm("enc.norm", d);
    let decoder = (0..cfg.layers)
        .map(|l| DecoderLayer {
            norm1: init.norm(&format!("dec{l}.norm1"), d),
            self_attn: init.attn(&format!("dec{l}.self"), d),
            norm2: init.norm(&format!("dec{l}.norm2"), d),
            cross_attn: init.attn(&format!("dec{l}.cross"), d),
            norm3: init.norm(&format!("dec{l}.norm3"), d),
            ffn: init.ffn(&format!("dec{l}.ffn"), d, cfg.ff_dim),
        })
        .collect();
    let decoder_norm = init.norm("dec.norm", d);
    (
        init.store,
        Layout {
            embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        },
    )
}

fn sinusoids<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows * d];
    for pos in 0..rows {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, d], data).expect("shape")
}

/// The translation model. Parameters are only mutated by the optimizer.
#[derive(Debug, Clone)]
pub struct Seq2Seq<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    positions: Tensor<T>,
}

impl<T: Scalar> Seq2Seq<T> {
    /// Fresh model with uniform(-0.08, 0.08) weights; layer-norm gains start at one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&config, &mut rng);
        let positions = sinusoids(config.max_len + 1, config.d_model);
        Ok(Self {
            config,
            params,
            layout,
            positions,
        })
    }

    /// Rebuilds a model around stored parameter values (shapes must match the layout).
    pub fn from_params(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (slot, t) in model.params.tensors_mut().iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                    op: "from_params",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                }));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn check_tag(&self, lang: TokenId) -> Result<()> {
        if self.config.language_tags.contains(&lang) {
            Ok(())
        } else {
            Err(ModelError::UnknownTag(lang))
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Scaled embedding rows for `tokens`; this is what the encoder consumes.
    pub fn embed<'a>(&'a self, g: &mut Graph<'a, T>, tokens: &[TokenId]) -> Result<Var> {
        let table = g.param(&self.params, self.layout.embed)?;
        let e = g.embedding(table, tokens)?;
        Ok(g.scale(e, T::from_usize_lossy(self.config.d_model).sqrt())?)
    }

    fn add_positions(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let d = self.config.d_model;
        let pe = Tensor::new(vec![n, d], self.positions.data()[..n * d].to_vec())?;
        let pe = g.constant(pe)?;
        Ok(g.add(x, pe)?)
    }

    fn linear<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w)?;
        let b = g.param(&self.params, l.b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    fn norm<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, n: Norm) -> Result<Var> {
        let gain = g.param(&self.params, n.gain)?;
        let bias = g.param(&self.params, n.bias)?;
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn attend<'a>(&'a self, g: &mut Graph<'a, T>, xq: Var, xkv: Var, a: Attn, causal: bool) -> Result<Var> {
        let q = self.linear(g, xq, a.q)?;
        let k = self.linear(g, xkv, a.k)?;
        let v = self.linear(g, xkv, a.v)?;
        let h = g.attention(q, k, v, self.config.heads, causal)?;
        self.linear(g, h, a.o)
    }

    fn feed_forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, f: Ffn) -> Result<Var> {
        let h = self.linear(g, x, f.up)?;
        let h = g.relu(h)?;
        self.linear(g, h, f.down)
    }

    fn run_encoder<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, lang: TokenId) -> Result<HiddenSeq> {
        let mut x = self.add_positions(g, x)?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, layer.norm1)?;
            let h = self.attend(g, h, h, layer.attn, false)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.norm2)?;
            let h = self.feed_forward(g, h, layer.ffn)?;
            x = g.add(x, h)?;
        }
        let out = self.norm(g, x, self.layout.encoder_norm)?;
        Ok(HiddenSeq {
            vectors: out,
            len: g.shape(out)[0],
            lang,
        })
    }

    /// `Encoder(X, ℓ)`: output has one more position than `tokens` (the tag).
    pub fn encode<'a>(&'a self, g: &mut Graph<'a, T>, tokens: &[TokenId], lang: TokenId) -> Result<HiddenSeq> {
        self.check_tag(lang)?;
        self.check_tokens(tokens)?;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(lang);
        ids.extend_from_slice(tokens);
        let x = self.embed(g, &ids)?;
        self.run_encoder(g, x, lang)
    }

    /// Encoder over continuous inputs `[n, d_model]`, bypassing the token lookup.
    pub fn encode_soft<'a>(&'a self, g: &mut Graph<'a, T>, vectors: Var, lang: TokenId) -> Result<HiddenSeq> {
        self.check_tag(lang)?;
        let shape = g.shape(vectors).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(ModelError::WidthMismatch {
                expected: self.config.d_model,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        if shape[0] > self.config.max_len {
            return Err(ModelError::TooLong {
                len: shape[0],
                max: self.config.max_len,
            });
        }
        if !g.value(vectors).is_finite() {
            return Err(TensorError::NonFinite { op: "encode_soft" }.into());
        }
        let tag = self.embed(g, &[lang])?;
        let x = g.concat_rows(&[tag, vectors])?;
        self.run_encoder(g, x, lang)
    }

    fn run_decoder<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        memory: &HiddenSeq,
        lang: TokenId,
        inputs: &[TokenId],
    ) -> Result<HiddenSeq> {
        let x = self.embed(g, inputs)?;
        let mut x = self.add_positions(g, x)?;
        for layer in &self.layout.decoder {
            let h = self.norm(g, x, layer.norm1)?;
            let h = self.attend(g, h, h, layer.self_attn, true)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.norm2)?;
            let h = self.attend(g, h, memory.vectors, layer.cross_attn, false)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.norm3)?;
            let h = self.feed_forward(g, h, layer.ffn)?;
            x = g.add(x, h)?;
        }
        let out = self.norm(g, x, self.layout.decoder_norm)?;
        Ok(HiddenSeq {
            vectors: out,
            len: inputs.len(),
            lang,
        })
    }

    /// Projection of decoder states onto the (tied) vocabulary.
    pub fn project<'a>(&'a self, g: &mut Graph<'a, T>, states: Var) -> Result<Var> {
        let table = g.param(&self.params, self.layout.embed)?;
        Ok(g.matmul_bt(states, table)?)
    }

    /// Probability-weighted mix of scaled embeddings under the tied projection
    /// of `states`; an encoder input on the same scale as [`Self::embed`].
    pub fn expected_embedding<'a>(&'a self, g: &mut Graph<'a, T>, states: Var) -> Result<Var> {
        let table = g.param(&self.params, self.layout.embed)?;
        let logits = g.matmul_bt(states, table)?;
        let p = g.softmax(logits)?;
        let e = g.matmul(p, table)?;
        Ok(g.scale(e, T::from_usize_lossy(self.config.d_model).sqrt())?)
    }

    /// `Decoder(memory, ℓ)` teacher-forced on `teacher`. Row `t` of the logits
    /// scores `teacher[t]` given the tag and `teacher[..t]`.
    pub fn decode<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        memory: &HiddenSeq,
        lang: TokenId,
        teacher: &[TokenId],
    ) -> Result<(HiddenSeq, Var)> {
        self.check_tag(lang)?;
        self.check_tokens(teacher)?;
        let mut inputs = Vec::with_capacity(teacher.len());
        inputs.push(lang);
        inputs.extend_from_slice(&teacher[..teacher.len() - 1]);
        let states = self.run_decoder(g, memory, lang, &inputs)?;
        let logits = self.project(g, states.vectors)?;
        Ok((states, logits))
    }

    /// Next-token logits after the model has emitted `prefix` (possibly empty).
    ///
    /// Equal to the last logits row of `decode(memory, lang, prefix ++ [any])`.
    pub fn step_logits(&self, memory: &Tensor<T>, lang: TokenId, prefix: &[TokenId]) -> Result<Vec<T>> {
        self.check_tag(lang)?;
        if prefix.len() + 1 > self.config.max_len {
            return Err(ModelError::TooLong {
                len: prefix.len() + 1,
                max: self.config.max_len,
            });
        }
        if let Some(&id) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        let mut g = Graph::new();
        let mem = g.constant(memory.clone())?;
        let memory = HiddenSeq {
            vectors: mem,
            len: memory.rows(),
            lang,
        };
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(lang);
        inputs.extend_from_slice(prefix);
        let states = self.run_decoder(&mut g, &memory, lang, &inputs)?;
        let last = g.rows(states.vectors, inputs.len() - 1, inputs.len())?;
        let logits = self.project(&mut g, last)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Encoder output values for inference.
    pub fn encode_value(&self, tokens: &[TokenId], lang: TokenId) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let h = self.encode(&mut g, tokens, lang)?;
        Ok(g.value(h.vectors).clone())
    }

    /// Teacher-forced decoder states and logits as plain values.
    pub fn decode_value(&self, memory: &Tensor<T>, lang: TokenId, teacher: &[TokenId]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let mem = g.constant(memory.clone())?;
        let memory = HiddenSeq {
            vectors: mem,
            len: memory.rows(),
            lang,
        };
        let (states, logits) = self.decode(&mut g, &memory, lang, teacher)?;
        Ok((g.value(states.vectors).clone(), g.value(logits).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Seq2Seq<f64> {
        let mut cfg = ModelConfig::new(20, vec![2, 3]);
        cfg.max_len = 10;
        Seq2Seq::new(cfg, 7).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(10, vec![1]);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::new(10, vec![10]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = Seq2Seq::<f64>::new(ModelConfig::new(20, vec![2, 3]), 1).unwrap();
        let a = m.encode_value(&[5, 6, 7, 8, 9], 2).unwrap();
        assert_eq!(a.shape(), &[6, 32]);
        let b = m.encode_value(&[5, 6, 7, 8, 9], 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.encode_value(&[], 2), Err(ModelError::Empty));
        assert!(matches!(m.encode_value(&[5; 65], 2), Err(ModelError::TooLong { len: 65, max: 64 })));
        assert!(matches!(m.encode_value(&[5], 4), Err(ModelError::UnknownTag(4))));
    }

    #[test]
    fn encode_soft_matches_token_path() {
        let m = toy();
        let tokens = [4, 9, 11, 5];
        let mut g = Graph::new();
        let hard = m.encode(&mut g, &tokens, 3).unwrap();
        let e = m.embed(&mut g, &tokens).unwrap();
        let soft = m.encode_soft(&mut g, e, 3).unwrap();
        assert_eq!(g.shape(soft.vectors), &[5, 32]);
        for (a, b) in hard.values(&g).data().iter().zip(soft.values(&g).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let bad = g.constant(Tensor::zeros(&[2, 31])).unwrap();
        assert!(matches!(m.encode_soft(&mut g, bad, 3), Err(ModelError::WidthMismatch { .. })));
        let nan = {
            let mut t = Tensor::zeros(&[2, 32]);
            t.data_mut()[3] = f64::NAN;
            t
        };
        assert!(g.constant(nan).is_err());
    }

    #[test]
    fn decode_shapes_and_causality() {
        let m = toy();
        let mem = m.encode_value(&[4, 5, 6], 2).unwrap();
        let teacher = [7, 8, 9, 10, 11, 12, 1];
        let (states, logits) = m.decode_value(&mem, 3, &teacher).unwrap();
        assert_eq!(states.shape(), &[7, 32]);
        assert_eq!(logits.shape(), &[7, 20]);
        for k in 0..teacher.len() {
            let mut changed = teacher;
            changed[k] = 15;
            let (_, other) = m.decode_value(&mem, 3, &changed).unwrap();
            // Row t depends on teacher[..t]; changing position k affects rows > k only.
            for t in 0..=k {
                assert_eq!(logits.row(t), other.row(t), "row {t} changed by position {k}");
            }
        }
    }

    #[test]
    fn degenerate_memory_is_fine() {
        let m = toy();
        let mem = Tensor::new(vec![1, 32], vec![0.1; 32]).unwrap();
        let (_, logits) = m.decode_value(&mem, 2, &[5, 6]).unwrap();
        assert_eq!(logits.shape(), &[2, 20]);
        assert!(matches!(m.decode_value(&mem, 2, &[5; 11]), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn step_logits_matches_decode() {
        let m = toy();
        let mem = m.encode_value(&[4, 5], 2).unwrap();
        let prefix = [6, 7, 8];
        let step = m.step_logits(&mem, 3, &prefix).unwrap();
        let (_, logits) = m.decode_value(&mem, 3, &[6, 7, 8, 13]).unwrap();
        for (a, b) in step.iter().zip(logits.row(3)) {
            assert!((a - b).abs() <= 1e-12);
        }
        let first = m.step_logits(&mem, 3, &[]).unwrap();
        assert_eq!(first.len(), 20);
        assert_eq!(first, m.step_logits(&mem, 3, &[]).unwrap());
        let (_, one) = m.decode_value(&mem, 3, &[6]).unwrap();
        assert_eq!(first.as_slice(), one.row(0));
    }

    #[test]
    fn language_tag_changes_logits() {
        let m = toy();
        let mem = m.encode_value(&[4, 5], 2).unwrap();
        let a = m.step_logits(&mem, 2, &[6]).unwrap();
        let b = m.step_logits(&mem, 3, &[6]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn single_precision_model_runs() {
        let m = Seq2Seq::<f32>::new(ModelConfig::new(12, vec![1]), 3).unwrap();
        let h = m.encode_value(&[4, 5], 1).unwrap();
        assert_eq!(h.shape(), &[3, 32]);
    }
}
