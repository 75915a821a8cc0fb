use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Forward-pass mode. Training carries the dropout RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(rng) => ops::dropout(x, rate, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Xavier-style normal init, zero bias.
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self::with_std(ps, name, fan_in, fan_out, bias, std)
    }

    pub fn with_std(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), &[fan_in, fan_out], std)?;
        let bias = if bias {
            Some(ps.zeros(&format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.ones(&format!("{name}.gamma"), &[dim])?,
            beta: ps.zeros(&format!("{name}.beta"), &[dim])?,
            eps: 1e-12,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Post-norm transformer encoder layer (self-attention + GELU FFN).
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_attn: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ln_ff: LayerNorm,
    num_heads: usize,
    dropout: f64,
}

impl TransformerLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        hidden: usize,
        num_heads: usize,
        ffn: usize,
        dropout: f64,
    ) -> Result<Self> {
        if num_heads == 0 || !hidden.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "hidden size {hidden} not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.attn.q"), hidden, hidden, true)?,
            k: Linear::new(ps, &format!("{name}.attn.k"), hidden, hidden, true)?,
            v: Linear::new(ps, &format!("{name}.attn.v"), hidden, hidden, true)?,
            o: Linear::new(ps, &format!("{name}.attn.o"), hidden, hidden, true)?,
            ln_attn: LayerNorm::new(ps, &format!("{name}.attn.ln"), hidden)?,
            ff_in: Linear::new(ps, &format!("{name}.ffn.in"), hidden, ffn, true)?,
            ff_out: Linear::new(ps, &format!("{name}.ffn.out"), ffn, hidden, true)?,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ffn.ln"), hidden)?,
            num_heads,
            dropout,
        })
    }

    /// `x: [B, T, H]`; `key_bias: [B, T]` additive attention bias (0 or a
    /// large negative number on padding).
    pub fn forward(&self, x: &Tensor, key_bias: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, t, h) = x.dims3()?;
        let heads = self.num_heads;
        let dh = h / heads;
        let flat = x.reshape((b * t, h))?;
        let split = |y: Tensor| -> Result<Tensor> { Ok(y.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.q.forward(&flat)?)?;
        let k = split(self.k.forward(&flat)?)?;
        let v = split(self.v.forward(&flat)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let bias = key_bias.reshape((b, 1, 1, t))?;
        let probs = ops::softmax_last(&scores.broadcast_add(&bias)?)?;
        let probs = mode.dropout(&probs, self.dropout)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b * t, h))?;
        let attn = mode.dropout(&self.o.forward(&ctx)?, self.dropout)?;
        let x1 = self.ln_attn.forward(&(flat + attn)?)?;
        let ff = self.ff_out.forward(&ops::gelu(&self.ff_in.forward(&x1)?)?)?;
        let ff = mode.dropout(&ff, self.dropout)?;
        let x2 = self.ln_ff.forward(&(x1 + ff)?)?;
        Ok(x2.reshape((b, t, h))?)
    }
}

/// Additive key bias from a 0/1 validity mask `[B, T]`.
pub fn key_bias_from_mask(valid: &Tensor) -> Result<Tensor> {
    Ok(valid.affine(1e9, -1e9)?)
}

/// Two-layer feed-forward head with a configurable activation in between.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu()?,
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::Identity => x.clone(),
        })
    }
}

impl Mlp2 {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(ps, &format!("{name}.0"), input, hidden, true)?,
            second: Linear::new(ps, &format!("{name}.1"), hidden, output, true)?,
            activation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.first.forward(x)?)?;
        self.second.forward(&h)
    }
}

/// Mean over rows of `x: [n, d]` selected by index groups; returns `[groups, d]`.
pub fn mean_pool_groups(x: &Tensor, groups: &[Vec<u32>]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(groups.len());
    for g in groups {
        if g.is_empty() {
            return Err(Error::InvalidArgument("empty pooling group".into()));
        }
        let idx = ops::ids(g)?;
        rows.push(x.index_select(&idx, 0)?.mean_keepdim(0)?);
    }
    Ok(Tensor::cat(&rows, 0)?)
}

pub fn last_dim(x: &Tensor) -> Result<usize> {
    Ok(x.dim(D::Minus1)?)
}
