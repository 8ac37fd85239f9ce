//! Parameterised layers built on [`Graph`] and the AdamW optimiser.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Mask, Segment, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// LeCun-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f32,
    ) -> Self {
        let std = gain / (d_in as f32).sqrt();
        let w = store.add(format!("{name}.weight"), group, normal_init(rng, d_in, d_out, std));
        let b = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::filled(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        out_gain: f32,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), group, d_in, d_hidden, true, 1.0),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), group, d_hidden, d_out, true, out_gain),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention projections; queries and keys/values may come from
/// different token sets.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        d_model: usize,
        d_kv_in: usize,
        heads: usize,
        out_gain: f32,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), group, d_model, d_model, true, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), group, d_kv_in, d_model, true, 1.0),
            v: Linear::new(store, rng, &format!("{name}.v"), group, d_kv_in, d_model, true, 1.0),
            o: Linear::new(store, rng, &format!("{name}.o"), group, d_model, d_model, true, out_gain),
            heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        segments: Vec<Segment>,
        mask: Mask,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, keys)?;
        let v = self.v.forward(g, store, keys)?;
        let spec = Arc::new(AttentionSpec {
            heads: self.heads,
            segments,
            mask,
        });
        let a = g.attention(q, k, v, spec)?;
        self.o.forward(g, store, a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        residual_gain: f32,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), group, d, d, heads, residual_gain)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), group, d, d * mlp_ratio, d, residual_gain),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: Vec<Segment>,
        mask: Mask,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, segments, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay and a constant learning rate.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: i32,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update over the supplied gradients. Fails before touching anything
    /// if any gradient targets a frozen parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Tensor)]) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(id, _)| store.is_frozen(*id)) {
            return Err(Error::Frozen(store.name(*id).to_string()));
        }
        for (_, g) in grads {
            if !g.is_finite() {
                return Err(Error::numeric("optimizer", "non-finite gradient"));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            let (m, v) = (&*m, &*v);
            store.update(*id, |p| {
                for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pi);
                }
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Group::Connector, Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..400 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x).unwrap();
            let s = g.sum(sq);
            let grads = g.backward(s).unwrap();
            let owned: Vec<(ParamId, Tensor)> = grads.params().into_iter().map(|(i, t)| (i, t.clone())).collect();
            let refs: Vec<(ParamId, &Tensor)> = owned.iter().map(|(i, t)| (*i, t)).collect();
            opt.step(&mut store, &refs).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.05), "{:?}", store.get(id));
    }

    #[test]
    fn optimizer_rejects_frozen_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Group::Backbone, Tensor::zeros(1, 1));
        store.set_frozen(Group::Backbone, true);
        let g = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut store, &[(id, &g)]), Err(Error::Frozen(_))));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn block_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blk = Block::new(&mut store, &mut rng, "b", Group::Backbone, 16, 4, 2, 1.0).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(normal_init(&mut rng, 10, 16, 1.0));
        let y = blk
            .forward(&mut g, &store, x, vec![Segment::square(0, 4), Segment::square(4, 6)], Mask::None)
            .unwrap();
        assert_eq!(g.value(y).shape(), (10, 16));
    }
}
