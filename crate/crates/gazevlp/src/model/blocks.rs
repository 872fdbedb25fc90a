//! Shared building blocks: linear layers, layer norm, multi-head attention,
//! and the latent cross-attention (Perceiver) stack.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{uniform_init, ParamSet, Parameter};
use crate::tensor::{gelu, layer_norm_rows, softmax_rows, Tensor};

pub struct Linear {
    pub(crate) weight: Parameter,
    pub(crate) bias: Parameter,
}

impl Linear {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Linear {
        let weight = set.register(Parameter::new(
            format!("{prefix}.weight"),
            uniform_init(rng, d_in, d_out, d_in),
            &[d_in, d_out],
        ));
        let bias = set.register(Parameter::new(
            format!("{prefix}.bias"),
            vec![0.0; d_out],
            &[1, d_out],
        ));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.tensor())?.add_rowvec(&self.bias.tensor())?)
    }
}

pub struct LayerNorm {
    gain: Parameter,
    bias: Parameter,
    eps: f64,
}

impl LayerNorm {
    pub fn new(set: &mut ParamSet, prefix: &str, d: usize) -> LayerNorm {
        let gain = set.register(Parameter::new(format!("{prefix}.gain"), vec![1.0; d], &[1, d]));
        let bias = set.register(Parameter::new(format!("{prefix}.bias"), vec![0.0; d], &[1, d]));
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = layer_norm_rows(x, self.eps)?;
        Ok(normed
            .mul_rowvec(&self.gain.tensor())?
            .add_rowvec(&self.bias.tensor())?)
    }
}

pub struct MultiHeadAttention {
    pub(crate) query: Linear,
    pub(crate) key: Linear,
    pub(crate) value: Linear,
    pub(crate) output: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(d % heads == 0, "model dim {d} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(set, rng, &format!("{prefix}.q"), d, d),
            key: Linear::new(set, rng, &format!("{prefix}.k"), d, d),
            value: Linear::new(set, rng, &format!("{prefix}.v"), d, d),
            output: Linear::new(set, rng, &format!("{prefix}.out"), d, d),
            heads,
            head_dim: d / heads,
        }
    }

    /// Per-head attention distributions (each `m x n`, rows summing to 1).
    pub fn attention_probs(&self, queries: &Tensor, keys_values: &Tensor) -> Result<Vec<Tensor>> {
        if keys_values.shape()[0] == 0 {
            return Err(Error::numeric("attention requires at least one key/value row"));
        }
        let q = self.query.forward(queries)?;
        let k = self.key.forward(keys_values)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * self.head_dim, self.head_dim)?;
            let kh = k.slice_cols(h * self.head_dim, self.head_dim)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            probs.push(softmax_rows(&scores)?);
        }
        Ok(probs)
    }

    pub fn forward(&self, queries: &Tensor, keys_values: &Tensor) -> Result<Tensor> {
        let probs = self.attention_probs(queries, keys_values)?;
        let v = self.value.forward(keys_values)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for (h, p) in probs.iter().enumerate() {
            let vh = v.slice_cols(h * self.head_dim, self.head_dim)?;
            head_outs.push(p.matmul(&vh)?);
        }
        let merged = Tensor::concat_cols(&head_outs)?;
        self.output.forward(&merged)
    }
}

pub struct FeedForward {
    pub(crate) lift: Linear,
    pub(crate) drop: Linear,
}

impl FeedForward {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> FeedForward {
        FeedForward {
            lift: Linear::new(set, rng, &format!("{prefix}.lift"), d, hidden),
            drop: Linear::new(set, rng, &format!("{prefix}.drop"), hidden, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.drop.forward(&gelu(&self.lift.forward(x)?)?)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
pub struct SelfAttentionBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> SelfAttentionBlock {
        SelfAttentionBlock {
            norm_attn: LayerNorm::new(set, &format!("{prefix}.norm_attn"), d),
            attn: MultiHeadAttention::new(set, rng, &format!("{prefix}.attn"), d, heads),
            norm_ff: LayerNorm::new(set, &format!("{prefix}.norm_ff"), d),
            ff: FeedForward::new(set, rng, &format!("{prefix}.ff"), d, 4 * d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = self.norm_attn.forward(x)?;
        let x = x.add(&self.attn.forward(&normed, &normed)?)?;
        let out = x.add(&self.ff.forward(&self.norm_ff.forward(&x)?)?)?;
        Ok(out)
    }
}

/// One latent cross-attention round: latents attend to the inputs, then a
/// feed-forward, both with residual connections and pre-norms.
pub struct CrossAttentionBlock {
    pub(crate) norm_latents: LayerNorm,
    pub(crate) norm_inputs: LayerNorm,
    pub(crate) attn: MultiHeadAttention,
    pub(crate) norm_ff: LayerNorm,
    pub(crate) ff: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> CrossAttentionBlock {
        CrossAttentionBlock {
            norm_latents: LayerNorm::new(set, &format!("{prefix}.norm_latents"), d),
            norm_inputs: LayerNorm::new(set, &format!("{prefix}.norm_inputs"), d),
            attn: MultiHeadAttention::new(set, rng, &format!("{prefix}.attn"), d, heads),
            norm_ff: LayerNorm::new(set, &format!("{prefix}.norm_ff"), d),
            ff: FeedForward::new(set, rng, &format!("{prefix}.ff"), d, 4 * d),
        }
    }

    pub fn forward(&self, latents: &Tensor, inputs: &Tensor) -> Result<Tensor> {
        let nq = self.norm_latents.forward(latents)?;
        let nkv = self.norm_inputs.forward(inputs)?;
        let latents = latents.add(&self.attn.forward(&nq, &nkv)?)?;
        let out = latents.add(&self.ff.forward(&self.norm_ff.forward(&latents)?)?)?;
        Ok(out)
    }
}

/// A stack of latent cross-attention rounds compressing `n` input rows into
/// a fixed number of latent rows.
pub struct Perceiver {
    blocks: Vec<CrossAttentionBlock>,
}

impl Perceiver {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Perceiver {
        let blocks = (0..layers)
            .map(|i| CrossAttentionBlock::new(set, rng, &format!("{prefix}.{i}"), d, heads))
            .collect();
        Perceiver { blocks }
    }

    pub fn forward(&self, latents: &Tensor, inputs: &Tensor) -> Result<Tensor> {
        if inputs.shape()[0] == 0 {
            return Err(Error::numeric("perceiver requires at least one input row"));
        }
        let mut x = latents.clone();
        for block in &self.blocks {
            x = block.forward(&x, inputs)?;
        }
        Ok(x)
    }

}
