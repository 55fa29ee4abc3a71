use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::substrate::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub proj_dim: usize,
    /// L2-normalize both projections before the dot product.
    pub normalize: bool,
    pub init_tau: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            proj_dim: 16,
            normalize: true,
            init_tau: 0.07,
        }
    }
}

/// Per-modality projections `f_v`, `f_t` and the temperature, stored as `log τ`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub video: Linear,
    pub text: Linear,
    pub log_tau: ParamId,
    pub normalize: bool,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, config: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.proj_dim == 0 {
            return Err(Error::config("projection dim must be positive"));
        }
        if !(config.init_tau > 0.0 && config.init_tau.is_finite()) {
            return Err(Error::config(format!("initial temperature {} must be positive", config.init_tau)));
        }
        Ok(ProjectionHead {
            video: Linear::new(store, &format!("{name}.video"), dim, config.proj_dim, true, rng)?,
            text: Linear::new(store, &format!("{name}.text"), dim, config.proj_dim, true, rng)?,
            log_tau: store.add(format!("{name}.log_tau"), Tensor::scalar(config.init_tau.ln()))?,
            normalize: config.normalize,
        })
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).item().exp()
    }

    fn project(&self, g: &mut Graph, lin: &Linear, x: Var) -> Result<Var> {
        let y = lin.forward(g, x)?;
        if self.normalize {
            g.l2_normalize_rows(y)
        } else {
            Ok(y)
        }
    }

    pub fn project_video(&self, g: &mut Graph, v_cls: Var) -> Result<Var> {
        self.project(g, &self.video, v_cls)
    }

    pub fn project_text(&self, g: &mut Graph, t_cls: Var) -> Result<Var> {
        self.project(g, &self.text, t_cls)
    }

    /// `S[i][j] = s(v_i, t_j)` for row-stacked `[B, d]` video and text embeddings.
    pub fn similarity_matrix(&self, g: &mut Graph, v_cls: Var, t_cls: Var) -> Result<Var> {
        let v = self.project_video(g, v_cls)?;
        let t = self.project_text(g, t_cls)?;
        g.matmul_bt(v, t)
    }

    /// `1/τ` as a `[1, 1]` node.
    pub fn inv_tau(&self, g: &mut Graph) -> Var {
        let lt = g.param(self.log_tau);
        let neg = g.scale(lt, -1.0);
        g.exp(neg)
    }
}

/// `s(v, t)` for single embeddings.
pub fn similarity(v_cls: &[f64], t_cls: &[f64], head: &ProjectionHead, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store);
    let v = g.constant(Tensor::matrix(1, v_cls.len(), v_cls.to_vec())?);
    let t = g.constant(Tensor::matrix(1, t_cls.len(), t_cls.to_vec())?);
    let s = head.similarity_matrix(&mut g, v, t)?;
    Ok(g.value(s).item())
}
