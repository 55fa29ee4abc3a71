use rand_chacha::ChaCha8Rng;

use super::params::{xavier, Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::substrate::{Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// All-zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]))?;
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?);
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let rows = g.value(x).rows();
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(self.gain);
        let gain = g.gather_rows(gain, &vec![0; rows])?;
        let y = g.mul(n, gain)?;
        let shift = g.param(self.shift);
        g.add_row(y, shift)
    }
}

/// Multi-head attention. Keys carry no bias: a key bias shifts every score in a
/// softmax row equally and so never affects the output.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// Queries from `x`, keys and values from `context`; both split into `blocks` aligned groups.
    pub fn forward(&self, g: &mut Graph, x: Var, context: Var, blocks: usize) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let a = g.block_attention(q, k, v, self.heads, blocks)?;
        self.out.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}
