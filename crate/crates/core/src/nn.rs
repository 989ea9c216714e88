//! Shared neural-network layers used by both classifier architectures.
//!
//! Layers own their parameters as `requires_grad` leaf tensors and expose
//! them through `collect_params` under stable dotted names, which the
//! checkpoint format and the optimizer both key on.

use crate::rng::Stream;
use crate::tensor::{self, Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("embedding dim {dim} is not divisible by {heads} heads")]
    HeadsDontDivide { dim: usize, heads: usize },
}

/// Weight initializer: truncated normal for projections, zeros for biases.
pub struct Initializer {
    stream: Stream,
    sigma: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            stream: Stream::from_seed(seed),
            sigma: 0.02,
        }
    }

    /// Truncated normal (|z| <= 2 sigma) leaf parameter.
    pub fn trunc_normal<E: Scalar>(&mut self, shape: &[usize]) -> Tensor<E> {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(self.stream.trunc_standard_normal() * self.sigma))
            .collect();
        Tensor::from_vec(data, shape)
            .expect("shape/product consistency is local")
            .requires_grad()
    }

    pub fn zeros<E: Scalar>(&mut self, shape: &[usize]) -> Tensor<E> {
        Tensor::zeros(shape).requires_grad()
    }

    pub fn ones<E: Scalar>(&mut self, shape: &[usize]) -> Tensor<E> {
        Tensor::ones(shape).requires_grad()
    }
}

pub type NamedParams<E> = Vec<(String, Tensor<E>)>;

fn push_param<E: Scalar>(out: &mut NamedParams<E>, prefix: &str, name: &str, t: &Tensor<E>) {
    out.push((format!("{prefix}.{name}"), t.clone()));
}

/// Affine map `x @ W + b` on the last axis; weight is stored `(in, out)`.
pub struct Linear<E: Scalar> {
    weight: Tensor<E>,
    bias: Option<Tensor<E>>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(in_dim: usize, out_dim: usize, with_bias: bool, init: &mut Initializer) -> Self {
        Linear {
            weight: init.trunc_normal(&[in_dim, out_dim]),
            bias: with_bias.then(|| init.zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> tensor::Result<Tensor<E>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<E>) {
        push_param(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push_param(out, prefix, "bias", b);
        }
    }
}

/// Last-axis layer normalization with learned affine.
pub struct LayerNorm<E: Scalar> {
    gamma: Tensor<E>,
    beta: Tensor<E>,
    eps: f64,
}

impl<E: Scalar> LayerNorm<E> {
    pub fn new(dim: usize, init: &mut Initializer) -> Self {
        LayerNorm {
            gamma: init.ones(&[dim]),
            beta: init.zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> tensor::Result<Tensor<E>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<E>) {
        push_param(out, prefix, "gamma", &self.gamma);
        push_param(out, prefix, "beta", &self.beta);
    }
}

/// Two-layer feed-forward block with GELU, the transformer MLP.
pub struct Mlp<E: Scalar> {
    fc1: Linear<E>,
    fc2: Linear<E>,
}

impl<E: Scalar> Mlp<E> {
    pub fn new(dim: usize, hidden: usize, init: &mut Initializer) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, true, init),
            fc2: Linear::new(hidden, dim, true, init),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> tensor::Result<Tensor<E>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<E>) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

/// Stochastic depth on a residual branch: with probability `rate` a batch
/// sample's branch output is zeroed, survivors are rescaled by `1/(1-rate)`
/// so the expectation is unchanged. Axis 0 indexes samples. `rng = None`
/// (the inference and gradient-check path) or `rate = 0` is the identity.
pub fn drop_path<E: Scalar>(
    x: &Tensor<E>,
    rate: f64,
    rng: Option<&mut Stream>,
) -> tensor::Result<Tensor<E>> {
    assert!((0.0..1.0).contains(&rate), "drop rate {rate} outside [0, 1)");
    let rng = match rng {
        Some(r) if rate > 0.0 => r,
        _ => return Ok(x.clone()),
    };
    let shape = x.shape().to_vec();
    let batch = shape[0];
    let per: usize = shape[1..].iter().product();
    let keep = 1.0 - rate;
    let scale = E::from_f64(1.0 / keep);
    let mut mask = vec![E::zero(); batch * per];
    for s in 0..batch {
        if rng.uniform() >= rate {
            mask[s * per..(s + 1) * per].fill(scale);
        }
    }
    x.mul(&Tensor::from_vec(mask, &shape).expect("mask mirrors input shape"))
}

/// Multi-head scaled dot-product self-attention over the last two axes
/// `(.., N, C)`. Additive logit terms (relative-position bias, shift masks)
/// are passed as `extras` and must suffix-broadcast onto the logit shape
/// `leading ++ [heads, N, N]`.
pub struct MultiHeadAttention<E: Scalar> {
    dim: usize,
    heads: usize,
    qkv: Linear<E>,
    proj: Linear<E>,
}

impl<E: Scalar> MultiHeadAttention<E> {
    pub fn new(dim: usize, heads: usize, init: &mut Initializer) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::HeadsDontDivide { dim, heads });
        }
        Ok(MultiHeadAttention {
            dim,
            heads,
            qkv: Linear::new(dim, 3 * dim, true, init),
            proj: Linear::new(dim, dim, true, init),
        })
    }

    pub fn forward(&self, x: &Tensor<E>, extras: &[&Tensor<E>]) -> tensor::Result<Tensor<E>> {
        Ok(self.forward_with_weights(x, extras)?.0)
    }

    /// Returns `(output, attention)` where attention has shape
    /// `leading ++ [heads, N, N]` and every row is a distribution.
    pub fn forward_with_weights(
        &self,
        x: &Tensor<E>,
        extras: &[&Tensor<E>],
    ) -> tensor::Result<(Tensor<E>, Tensor<E>)> {
        let shape = x.shape().to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != self.dim {
            return Err(TensorError::ShapeMismatch {
                expected: vec![self.dim],
                actual: shape.clone(),
            });
        }
        let n = shape[rank - 2];
        let c = self.dim;
        let h = self.heads;
        let d = c / h;
        let bf = x.numel() / (n * c);

        let xf = x.reshape(&[bf, n, c])?;
        let qkv = self.qkv.forward(&xf)?; // (bf, n, 3c), packed [q | k | v]
        let split = |off: usize| -> tensor::Result<Tensor<E>> {
            qkv.slice(2, off * c, c)?
                .reshape(&[bf, n, h, d])?
                .permute(&[0, 2, 1, 3]) // (bf, h, n, d)
        };
        let q = split(0)?;
        let k = split(1)?;
        let v = split(2)?;

        let scale = E::from_f64(1.0 / (d as f64).sqrt());
        let mut logits = q.matmul(&k.t2()?)?.scale(scale); // (bf, h, n, n)
        let lead: Vec<usize> = shape[..rank - 2]
            .iter()
            .copied()
            .chain([h, n, n])
            .collect();
        if !extras.is_empty() {
            let mut shaped = logits.reshape(&lead)?;
            for e in extras {
                shaped = shaped.add(e)?;
            }
            logits = shaped.reshape(&[bf, h, n, n])?;
        }
        let attn = logits.softmax(3)?;
        let out = attn
            .matmul(&v)? // (bf, h, n, d)
            .permute(&[0, 2, 1, 3])? // (bf, n, h, d)
            .reshape(&[bf, n, c])?;
        let out = self.proj.forward(&out)?.reshape(&shape)?;
        Ok((out, attn.reshape(&lead)?))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<E>) {
        self.qkv.collect_params(&format!("{prefix}.qkv"), out);
        self.proj.collect_params(&format!("{prefix}.proj"), out);
    }
}

/// Pre-norm transformer encoder block: `y = x + attn(ln(x))`, then
/// `y + mlp(ln(y))`. Shape-preserving on `(.., N, C)`.
pub struct EncoderBlock<E: Scalar> {
    pub(crate) norm1: LayerNorm<E>,
    pub(crate) attn: MultiHeadAttention<E>,
    pub(crate) norm2: LayerNorm<E>,
    pub(crate) mlp: Mlp<E>,
}

impl<E: Scalar> EncoderBlock<E> {
    pub fn new(
        dim: usize,
        heads: usize,
        hidden: usize,
        init: &mut Initializer,
    ) -> Result<Self, NnError> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(dim, init),
            attn: MultiHeadAttention::new(dim, heads, init)?,
            norm2: LayerNorm::new(dim, init),
            mlp: Mlp::new(dim, hidden, init),
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> tensor::Result<Tensor<E>> {
        self.forward_with_extras(x, &[])
    }

    /// `extras` are additive attention-logit terms, see
    /// [`MultiHeadAttention::forward`].
    pub fn forward_with_extras(
        &self,
        x: &Tensor<E>,
        extras: &[&Tensor<E>],
    ) -> tensor::Result<Tensor<E>> {
        let y = x.add(&self.attn.forward(&self.norm1.forward(x)?, extras)?)?;
        y.add(&self.mlp.forward(&self.norm2.forward(&y)?)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<E>) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
    }
}
