//! Transformer-in-Transformer classifier.
//!
//! The image splits into "sentences" (coarse patches) and each sentence into
//! "words" (sub-patches). Every block runs an inner transformer over each
//! sentence's words, folds the word features back into the sentence
//! embedding (flatten, layer norm, linear projection, residual add), then
//! runs an outer transformer over the sentences plus a learned class token.
//! The head reads the class token.
//!
//! Parameter count closed form, per config (wp/sp = word/sentence patch,
//! Di/Do = inner/outer dim, Nw/Ns = word/sentence counts, Hi/Ho = MLP hidden
//! widths, K = classes, and enc(d, h) = 6d + 4d² + dh + h + hd abbreviates a
//! pre-norm encoder block):
//!   projections: 3wp²·Di + Di + 3sp²·Do + Do
//!   embeddings:  Nw·Di + Ns·Do + Do
//!   each block:  enc(Di, Hi) + (2Nw·Di + Nw·Di·Do + Do) + enc(Do, Ho)
//!   head:        2Do + Do·K + K

use crate::nn::{EncoderBlock, Initializer, LayerNorm, Linear, NamedParams};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TntError {
    #[error("img_size {img_size} is not divisible by sentence_patch {sentence_patch}")]
    SentenceIndivisible {
        img_size: usize,
        sentence_patch: usize,
    },
    #[error("sentence_patch {sentence_patch} is not divisible by word_patch {word_patch}")]
    WordIndivisible {
        sentence_patch: usize,
        word_patch: usize,
    },
    #[error("outer_dim {dim} is not divisible by {heads} outer heads")]
    OuterHeadsIndivisible { dim: usize, heads: usize },
    #[error("inner_dim {dim} is not divisible by {heads} inner heads")]
    InnerHeadsIndivisible { dim: usize, heads: usize },
    #[error("num_classes {num_classes} must be at least 2")]
    TooFewClasses { num_classes: usize },
    #[error("mlp_ratio {mlp_ratio} must be positive")]
    BadMlpRatio { mlp_ratio: f64 },
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("input shape {actual:?} does not match the configured {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters for the two-level transformer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TntConfig {
    pub img_size: usize,
    pub sentence_patch: usize,
    pub word_patch: usize,
    pub outer_dim: usize,
    pub inner_dim: usize,
    pub depth: usize,
    pub outer_heads: usize,
    pub inner_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl TntConfig {
    /// The small preset at 384x384 input: a 24x24 sentence grid.
    pub fn small() -> Self {
        TntConfig {
            img_size: 384,
            sentence_patch: 16,
            word_patch: 4,
            outer_dim: 384,
            inner_dim: 24,
            depth: 12,
            outer_heads: 6,
            inner_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 3,
        }
    }

    /// Tiny configuration for tests: 4 sentences of 4 words each.
    pub fn toy() -> Self {
        TntConfig {
            img_size: 16,
            sentence_patch: 8,
            word_patch: 4,
            outer_dim: 16,
            inner_dim: 8,
            depth: 2,
            outer_heads: 2,
            inner_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<(), TntError> {
        if self.sentence_patch == 0 || self.img_size % self.sentence_patch != 0 {
            return Err(TntError::SentenceIndivisible {
                img_size: self.img_size,
                sentence_patch: self.sentence_patch,
            });
        }
        if self.word_patch == 0 || self.sentence_patch % self.word_patch != 0 {
            return Err(TntError::WordIndivisible {
                sentence_patch: self.sentence_patch,
                word_patch: self.word_patch,
            });
        }
        if self.outer_heads == 0 || self.outer_dim % self.outer_heads != 0 {
            return Err(TntError::OuterHeadsIndivisible {
                dim: self.outer_dim,
                heads: self.outer_heads,
            });
        }
        if self.inner_heads == 0 || self.inner_dim % self.inner_heads != 0 {
            return Err(TntError::InnerHeadsIndivisible {
                dim: self.inner_dim,
                heads: self.inner_heads,
            });
        }
        if self.num_classes < 2 {
            return Err(TntError::TooFewClasses {
                num_classes: self.num_classes,
            });
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(TntError::BadMlpRatio {
                mlp_ratio: self.mlp_ratio,
            });
        }
        if self.depth == 0 {
            return Err(TntError::ZeroDepth);
        }
        Ok(())
    }

    /// Sentences per image: `(img_size / sentence_patch)²`.
    pub fn num_sentences(&self) -> usize {
        (self.img_size / self.sentence_patch).pow(2)
    }

    /// Words per sentence: `(sentence_patch / word_patch)²`.
    pub fn num_words(&self) -> usize {
        (self.sentence_patch / self.word_patch).pow(2)
    }

    fn inner_hidden(&self) -> usize {
        (self.inner_dim as f64 * self.mlp_ratio) as usize
    }

    fn outer_hidden(&self) -> usize {
        (self.outer_dim as f64 * self.mlp_ratio) as usize
    }

    /// Closed-form parameter count (see module docs). Regression-locked
    /// against the actual parameter registry.
    pub fn param_count(&self) -> usize {
        let (di, do_) = (self.inner_dim, self.outer_dim);
        let (nw, ns) = (self.num_words(), self.num_sentences());
        let encoder =
            |d: usize, h: usize| 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h + h * d + d);
        let projections =
            3 * self.word_patch.pow(2) * di + di + 3 * self.sentence_patch.pow(2) * do_ + do_;
        let embeddings = nw * di + ns * do_ + do_;
        let aggregate = 2 * (nw * di) + (nw * di) * do_ + do_;
        let per_block =
            encoder(di, self.inner_hidden()) + aggregate + encoder(do_, self.outer_hidden());
        projections
            + embeddings
            + self.depth * per_block
            + 2 * do_
            + do_ * self.num_classes
            + self.num_classes
    }
}

/// One depth level: inner transformer over words, word-to-sentence
/// aggregation, outer transformer over sentences plus class token.
struct TntBlock<E: Scalar> {
    inner: EncoderBlock<E>,
    agg_norm: LayerNorm<E>,
    agg_proj: Linear<E>,
    outer: EncoderBlock<E>,
}

impl<E: Scalar> TntBlock<E> {
    fn new(cfg: &TntConfig, init: &mut Initializer) -> Result<Self, TntError> {
        let flat = cfg.num_words() * cfg.inner_dim;
        Ok(TntBlock {
            inner: EncoderBlock::new(cfg.inner_dim, cfg.inner_heads, cfg.inner_hidden(), init)
                .map_err(|_| TntError::InnerHeadsIndivisible {
                    dim: cfg.inner_dim,
                    heads: cfg.inner_heads,
                })?,
            agg_norm: LayerNorm::new(flat, init),
            agg_proj: Linear::new(flat, cfg.outer_dim, true, init),
            outer: EncoderBlock::new(cfg.outer_dim, cfg.outer_heads, cfg.outer_hidden(), init)
                .map_err(|_| TntError::OuterHeadsIndivisible {
                    dim: cfg.outer_dim,
                    heads: cfg.outer_heads,
                })?,
        })
    }

    /// Fold word features into sentence embeddings: flatten each sentence's
    /// words, layer-norm, project to the outer width, add residually.
    fn aggregate(
        &self,
        words: &Tensor<E>,
        sentences: &Tensor<E>,
    ) -> crate::tensor::Result<Tensor<E>> {
        let s = sentences.shape();
        let (b, ns) = (s[0], s[1]);
        let flat = words.reshape(&[b, ns, words.numel() / (b * ns)])?;
        sentences.add(&self.agg_proj.forward(&self.agg_norm.forward(&flat)?)?)
    }

    /// `words` is `(B·Ns, Nw, Di)`, `tokens` is `(B, Ns+1, Do)` with the
    /// class token first. `outer_extras` are additive attention-logit terms
    /// for the outer transformer (empty in normal operation).
    fn forward(
        &self,
        words: &Tensor<E>,
        tokens: &Tensor<E>,
        outer_extras: &[&Tensor<E>],
    ) -> crate::tensor::Result<(Tensor<E>, Tensor<E>)> {
        let words = self.inner.forward(words)?;
        let seq = tokens.shape()[1];
        let class = tokens.slice(1, 0, 1)?;
        let sentences = self.aggregate(&words, &tokens.slice(1, 1, seq - 1)?)?;
        let tokens = Tensor::concat(&[&class, &sentences], 1)?;
        let tokens = self.outer.forward_with_extras(&tokens, outer_extras)?;
        Ok((words, tokens))
    }

    fn collect_params(&self, prefix: &str, out: &mut NamedParams<E>) {
        self.inner.collect_params(&format!("{prefix}.inner"), out);
        self.agg_norm.collect_params(&format!("{prefix}.agg.norm"), out);
        self.agg_proj.collect_params(&format!("{prefix}.agg.proj"), out);
        self.outer.collect_params(&format!("{prefix}.outer"), out);
    }
}

/// The assembled classifier.
pub struct TntModel<E: Scalar> {
    cfg: TntConfig,
    word_proj: Linear<E>,
    sent_proj: Linear<E>,
    word_pos: Tensor<E>,
    sent_pos: Tensor<E>,
    class_token: Tensor<E>,
    blocks: Vec<TntBlock<E>>,
    norm: LayerNorm<E>,
    head: Linear<E>,
}

impl<E: Scalar> TntModel<E> {
    pub fn new(cfg: TntConfig, seed: u64) -> Result<Self, TntError> {
        cfg.validate()?;
        let mut init = Initializer::new(seed);
        let word_proj = Linear::new(
            3 * cfg.word_patch * cfg.word_patch,
            cfg.inner_dim,
            true,
            &mut init,
        );
        let sent_proj = Linear::new(
            3 * cfg.sentence_patch * cfg.sentence_patch,
            cfg.outer_dim,
            true,
            &mut init,
        );
        let word_pos = init.trunc_normal(&[cfg.num_words(), cfg.inner_dim]);
        let sent_pos = init.trunc_normal(&[cfg.num_sentences(), cfg.outer_dim]);
        let class_token = init.zeros(&[1, cfg.outer_dim]);
        let blocks = (0..cfg.depth)
            .map(|_| TntBlock::new(&cfg, &mut init))
            .collect::<Result<Vec<_>, _>>()?;
        let norm = LayerNorm::new(cfg.outer_dim, &mut init);
        let head = Linear::new(cfg.outer_dim, cfg.num_classes, true, &mut init);
        Ok(TntModel {
            cfg,
            word_proj,
            sent_proj,
            word_pos,
            sent_pos,
            class_token,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &TntConfig {
        &self.cfg
    }

    /// Project and position-embed both streams: sentences `(B, Ns, Do)` and
    /// words `(B·Ns, Nw, Di)`.
    fn split(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>), TntError> {
        let cfg = &self.cfg;
        let expected = vec![
            x.shape().first().copied().unwrap_or(0),
            3,
            cfg.img_size,
            cfg.img_size,
        ];
        if x.rank() != 4 || x.shape()[1..] != expected[1..] {
            return Err(TntError::InputShape {
                expected,
                actual: x.shape().to_vec(),
            });
        }
        let b = x.shape()[0];
        let (sp, wp) = (cfg.sentence_patch, cfg.word_patch);
        let gs = cfg.img_size / sp;
        let sw = sp / wp;
        let (ns, nw) = (gs * gs, sw * sw);
        let patches = x
            .reshape(&[b, 3, gs, sp, gs, sp])?
            .permute(&[0, 2, 4, 3, 5, 1])? // (B, gs, gs, sp, sp, 3)
            .reshape(&[b, ns, sp, sp, 3])?;
        let sentences = self
            .sent_proj
            .forward(&patches.reshape(&[b, ns, sp * sp * 3])?)?
            .add(&self.sent_pos)?;
        let words = self
            .word_proj
            .forward(
                &patches
                    .reshape(&[b, ns, sw, wp, sw, wp, 3])?
                    .permute(&[0, 1, 2, 4, 3, 5, 6])? // word-major within sentence
                    .reshape(&[b * ns, nw, wp * wp * 3])?,
            )?
            .add(&self.word_pos)?;
        Ok((sentences, words))
    }

    /// Prepend the learned class token: `(B, Ns, Do)` to `(B, Ns+1, Do)`.
    fn prepend_class(&self, sentences: &Tensor<E>) -> crate::tensor::Result<Tensor<E>> {
        let s = sentences.shape();
        let expanded = Tensor::zeros(&[s[0], 1, s[2]]).add(&self.class_token)?;
        Tensor::concat(&[&expanded, sentences], 1)
    }

    /// Head on the (layer-normed) class token.
    fn classify(&self, tokens: &Tensor<E>) -> crate::tensor::Result<Tensor<E>> {
        let s = tokens.shape();
        let class = tokens.slice(1, 0, 1)?.reshape(&[s[0], s[2]])?;
        self.head.forward(&self.norm.forward(&class)?)
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, TntError> {
        let (sentences, mut words) = self.split(x)?;
        let mut tokens = self.prepend_class(&sentences)?;
        for block in &self.blocks {
            let (w, t) = block.forward(&words, &tokens, &[])?;
            words = w;
            tokens = t;
        }
        Ok(self.classify(&tokens)?)
    }

    /// All parameters under stable dotted names, in construction order.
    pub fn named_params(&self) -> NamedParams<E> {
        let mut out = NamedParams::new();
        self.word_proj.collect_params("word_proj", &mut out);
        self.sent_proj.collect_params("sent_proj", &mut out);
        out.push(("word_pos".to_string(), self.word_pos.clone()));
        out.push(("sent_pos".to_string(), self.sent_pos.clone()));
        out.push(("class_token".to_string(), self.class_token.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect_params(&format!("blocks.{i}"), &mut out);
        }
        self.norm.collect_params("norm", &mut out);
        self.head.collect_params("head", &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck_leaves, label_smoothed_ce};
    use approx::assert_relative_eq;

    fn toy_input(b: usize, seed: u64) -> Tensor<f64> {
        let n = b * 3 * 16 * 16;
        let mut state = seed;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Tensor::from_vec(data, &[b, 3, 16, 16]).unwrap()
    }

    #[test]
    fn presets_validate() {
        TntConfig::small().validate().unwrap();
        TntConfig::toy().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut c = TntConfig::toy();
        c.sentence_patch = 7;
        assert!(matches!(
            c.validate(),
            Err(TntError::SentenceIndivisible { .. })
        ));

        let mut c = TntConfig::toy();
        c.word_patch = 3;
        assert!(matches!(c.validate(), Err(TntError::WordIndivisible { .. })));

        let mut c = TntConfig::toy();
        c.inner_heads = 3;
        assert!(matches!(
            c.validate(),
            Err(TntError::InnerHeadsIndivisible { .. })
        ));

        let mut c = TntConfig::toy();
        c.outer_heads = 5;
        assert!(matches!(
            c.validate(),
            Err(TntError::OuterHeadsIndivisible { .. })
        ));

        let mut c = TntConfig::toy();
        c.num_classes = 1;
        assert!(matches!(c.validate(), Err(TntError::TooFewClasses { .. })));

        let mut c = TntConfig::toy();
        c.depth = 0;
        assert!(matches!(c.validate(), Err(TntError::ZeroDepth)));
    }

    #[test]
    fn small_config_token_arithmetic() {
        let c = TntConfig::small();
        assert_eq!(c.num_sentences(), 576);
        assert_eq!(c.num_words(), 16);
    }

    #[test]
    fn toy_param_count_matches_closed_form_and_registry() {
        let cfg = TntConfig::toy();
        // hand-computed from the closed form in the module docs
        assert_eq!(cfg.param_count(), 10507);
        let model = TntModel::<f64>::new(cfg.clone(), 7).unwrap();
        let actual: usize = model.named_params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(actual, cfg.param_count());
    }

    #[test]
    fn small_param_count_matches_published_scale() {
        // the published small variant is ~23.8M at 1000 classes; the 3-class
        // head trims a few hundred thousand
        let count = TntConfig::small().param_count();
        assert!((23_000_000..25_000_000).contains(&count), "count {count}");
    }

    #[test]
    fn split_shapes_toy() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 3).unwrap();
        let (sentences, words) = model.split(&toy_input(2, 1)).unwrap();
        assert_eq!(sentences.shape(), &[2, 4, 16]);
        assert_eq!(words.shape(), &[8, 4, 8]);
    }

    #[test]
    fn zero_image_splits_to_positional_embeddings() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 5).unwrap();
        let (sentences, words) = model.split(&Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        // zero pixels through zero-initialized projection bias leave exactly
        // the positional embeddings
        let sp = model.sent_pos.to_vec();
        for batch in sentences.to_vec().chunks(sp.len()) {
            assert_eq!(batch, &sp[..]);
        }
        let wp = model.word_pos.to_vec();
        for group in words.to_vec().chunks(wp.len()) {
            assert_eq!(group, &wp[..]);
        }
    }

    #[test]
    fn split_rejects_wrong_size() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 3).unwrap();
        assert!(matches!(
            model.forward(&Tensor::zeros(&[1, 3, 32, 32])),
            Err(TntError::InputShape { .. })
        ));
    }

    #[test]
    fn single_word_inner_block_reduces_to_value_path() {
        let mut init = Initializer::new(11);
        let block = EncoderBlock::<f64>::new(2, 1, 4, &mut init).unwrap();
        let mut named = NamedParams::new();
        block.collect_params("blk", &mut named);
        let by_name = |n: &str| {
            named
                .iter()
                .find(|(name, _)| name == n)
                .map(|(_, t)| t.clone())
                .unwrap()
        };
        // silence the MLP branch so only the attention path remains
        by_name("blk.mlp.fc2.weight").set_data(&[0.0; 8]);
        by_name("blk.mlp.fc2.bias").set_data(&[0.0; 2]);

        let x = Tensor::from_vec(vec![0.3, -0.7], &[1, 1, 2]).unwrap();
        let out = block.forward(&x).unwrap().to_vec();

        // a singleton softmax is 1, so attention output is proj(v(ln(x)))
        let ln = |a: f64, b: f64| {
            let m = (a + b) / 2.0;
            let v = ((a - m).powi(2) + (b - m).powi(2)) / 2.0;
            let s = 1.0 / (v + 1e-5).sqrt();
            [(a - m) * s, (b - m) * s]
        };
        let n1 = ln(0.3, -0.7);
        let wqkv = by_name("blk.attn.qkv.weight").to_vec();
        let bqkv = by_name("blk.attn.qkv.bias").to_vec();
        let v: Vec<f64> = (4..6)
            .map(|j| n1[0] * wqkv[j] + n1[1] * wqkv[6 + j] + bqkv[j])
            .collect();
        let wp = by_name("blk.attn.proj.weight").to_vec();
        let bp = by_name("blk.attn.proj.bias").to_vec();
        let expected = [
            0.3 + v[0] * wp[0] + v[1] * wp[2] + bp[0],
            -0.7 + v[0] * wp[1] + v[1] * wp[3] + bp[1],
        ];
        assert_relative_eq!(out[0], expected[0], max_relative = 1e-12);
        assert_relative_eq!(out[1], expected[1], max_relative = 1e-12);
    }

    #[test]
    fn inner_attention_rows_are_distributions() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 13).unwrap();
        let (_, words) = model.split(&toy_input(1, 9)).unwrap();
        let inner = &model.blocks[0].inner;
        let normed = inner.norm1.forward(&words).unwrap();
        let (_, attn) = inner.attn.forward_with_weights(&normed, &[]).unwrap();
        assert_eq!(attn.shape(), &[4, 2, 4, 4]);
        for row in attn.to_vec().chunks(4) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn word_groups_are_isolated() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 17).unwrap();
        let inner = &model.blocks[0].inner;
        // three independent word groups of two words each
        let words = Tensor::from_vec(
            (0..48).map(|v| (v as f64) * 0.11 - 2.0).collect::<Vec<_>>(),
            &[3, 2, 8],
        )
        .unwrap()
        .requires_grad();
        inner
            .forward(&words)
            .unwrap()
            .slice(0, 1, 1)
            .unwrap()
            .sum_all()
            .backward()
            .unwrap();
        let g = words.grad().unwrap();
        // the Jacobian across groups is exactly zero, not merely small
        assert!(g[..16].iter().all(|&v| v == 0.0), "leakage into group 0");
        assert!(g[16..32].iter().any(|&v| v != 0.0), "dead gradient in group 1");
        assert!(g[32..].iter().all(|&v| v == 0.0), "leakage into group 2");
    }

    #[test]
    fn aggregate_with_zero_words_is_identity() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 19).unwrap();
        let sentences = Tensor::from_vec(
            (0..128).map(|v| (v as f64) * 0.03 - 1.9).collect::<Vec<_>>(),
            &[2, 4, 16],
        )
        .unwrap();
        let words = Tensor::zeros(&[8, 4, 8]);
        // layer norm of a zero vector is zero and the projection bias starts
        // at zero, so the residual add contributes nothing
        let out = model.blocks[0].aggregate(&words, &sentences).unwrap();
        assert_eq!(out.shape(), sentences.shape());
        assert_eq!(out.to_vec(), sentences.to_vec());
    }

    #[test]
    fn outer_attention_with_class_token_rows_are_distributions() {
        let mut init = Initializer::new(23);
        let block = EncoderBlock::<f64>::new(16, 2, 32, &mut init).unwrap();
        // single sentence plus class token: 2x2 attention per head
        let x = Tensor::from_vec(
            (0..32).map(|v| (v as f64) * 0.07 - 1.0).collect::<Vec<_>>(),
            &[1, 2, 16],
        )
        .unwrap();
        let normed = block.norm1.forward(&x).unwrap();
        let (_, attn) = block.attn.forward_with_weights(&normed, &[]).unwrap();
        assert_eq!(attn.shape(), &[1, 2, 2, 2]);
        for row in attn.to_vec().chunks(2) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn outer_block_is_permutation_equivariant_without_positions() {
        let mut init = Initializer::new(29);
        let block = EncoderBlock::<f64>::new(8, 2, 16, &mut init).unwrap();
        let x = Tensor::from_vec(
            (0..24).map(|v| (v as f64) * 0.13 - 1.4).collect::<Vec<_>>(),
            &[1, 3, 8],
        )
        .unwrap();
        let perm = Tensor::concat(
            &[
                &x.slice(1, 2, 1).unwrap(),
                &x.slice(1, 0, 1).unwrap(),
                &x.slice(1, 1, 1).unwrap(),
            ],
            1,
        )
        .unwrap();
        let out = block.forward(&x).unwrap().to_vec();
        let out_perm = block.forward(&perm).unwrap().to_vec();
        // rows (2, 0, 1) of the original must appear as rows (0, 1, 2)
        for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
            for k in 0..8 {
                assert_relative_eq!(
                    out_perm[dst * 8 + k],
                    out[src * 8 + k],
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn outer_block_gradcheck() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 31).unwrap();
        let outer = &model.blocks[0].outer;
        let x = Tensor::from_vec(
            (0..48).map(|v| (v as f64) * 0.09 - 2.1).collect::<Vec<_>>(),
            &[1, 3, 16],
        )
        .unwrap()
        .requires_grad();
        let mut leaves = vec![x.clone()];
        let mut named = NamedParams::new();
        outer.collect_params("outer", &mut named);
        leaves.extend(named.iter().map(|(_, t)| t.clone()));
        let err =
            gradcheck_leaves(|| Ok(outer.forward(&x)?.sum_all()), &leaves, 1e-5).unwrap();
        assert!(err < 1e-4, "err = {err:e}");
    }

    #[test]
    fn forward_shape_softmax_and_determinism() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 37).unwrap();
        let x = toy_input(2, 70);
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.to_vec().iter().all(|v| v.is_finite()));
        for row in logits.softmax(1).unwrap().to_vec().chunks(3) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
        let again = TntModel::<f64>::new(TntConfig::toy(), 37)
            .unwrap()
            .forward(&x)
            .unwrap();
        assert_eq!(logits.to_vec(), again.to_vec());
    }

    #[test]
    fn masked_outer_attention_reduces_to_isolated_class_token() {
        // Ns = 1: two outer tokens (class + one sentence). Masking every
        // query onto the class token makes the class token evolve exactly as
        // a one-token sequence through the same outer blocks, bit for bit.
        let cfg = TntConfig {
            img_size: 16,
            sentence_patch: 16,
            word_patch: 4,
            ..TntConfig::toy()
        };
        let model = TntModel::<f64>::new(cfg, 41).unwrap();
        let x = toy_input(1, 80);
        let (sentences, mut words) = model.split(&x).unwrap();
        let mut tokens = model.prepend_class(&sentences).unwrap();
        let mask =
            Tensor::from_vec(vec![0.0, -1e9, 0.0, -1e9], &[2, 2]).unwrap();
        for block in &model.blocks {
            let (w, t) = block.forward(&words, &tokens, &[&mask]).unwrap();
            words = w;
            tokens = t;
        }
        let masked_logits = model.classify(&tokens).unwrap();

        let mut solo = Tensor::zeros(&[1, 1, 16]).add(&model.class_token).unwrap();
        for block in &model.blocks {
            solo = block.outer.forward(&solo).unwrap();
        }
        let expected = model.classify(&solo).unwrap();
        assert_eq!(masked_logits.to_vec(), expected.to_vec());
    }

    #[test]
    fn word_path_carries_gradient() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 43).unwrap();
        let x = toy_input(1, 90).requires_grad();
        let logits = model.forward(&x).unwrap();
        label_smoothed_ce(&logits, &[0], 0.1)
            .unwrap()
            .backward()
            .unwrap();
        let named = model.named_params();
        let (_, wproj) = named
            .iter()
            .find(|(n, _)| n == "word_proj.weight")
            .unwrap();
        let g = wproj.grad().expect("word projection is a leaf");
        assert!(
            g.iter().any(|&v| v != 0.0),
            "aggregation passes no gradient to the word path"
        );
        assert!(x.grad().unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn full_toy_model_gradcheck() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 47).unwrap();
        let x = toy_input(1, 100).requires_grad();
        let mut leaves = vec![x.clone()];
        leaves.extend(model.named_params().into_iter().map(|(_, t)| t));
        let err = gradcheck_leaves(
            || {
                let logits = model.forward(&x).expect("toy config accepts this input");
                label_smoothed_ce(&logits, &[2], 0.1)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err:e}");
    }

    #[test]
    fn param_names_are_unique_and_stable() {
        let model = TntModel::<f64>::new(TntConfig::toy(), 53).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        for expected in [
            "word_proj.weight",
            "sent_pos",
            "class_token",
            "blocks.0.inner.attn.qkv.weight",
            "blocks.0.agg.proj.weight",
            "blocks.1.outer.mlp.fc2.bias",
            "head.bias",
        ] {
            assert!(names.iter().any(|n| n == expected), "missing {expected}");
        }
    }
}
