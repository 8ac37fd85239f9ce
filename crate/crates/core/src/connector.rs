//! Query-based connector and pair-sequence assembly.
//!
//! `N` learned queries cross-attend to an image's prompt-free token set
//! (CLS plus patches) through a short stack of cross-attention and
//! feed-forward blocks, and the result is projected to the sequence-model
//! width. Labelled pairs become blocks `[I_i; I_j; L_ij]` of length `2N + 1`;
//! a context is `K` such blocks followed by `M` prompt slots, so
//! `L = 2NK + K + M`. No separators are inserted between blocks.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, Segment, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::params::{normal_init, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorConfig {
    pub n_queries: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub d_llm: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            n_queries: 32,
            n_blocks: 2,
            n_heads: 4,
            mlp_ratio: 2,
            d_llm: 128,
        }
    }
}

/// Compressed image, `[N × d_llm]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens {
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
struct CrossBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: Mlp,
}

#[derive(Clone, Debug)]
pub struct Connector {
    pub config: ConnectorConfig,
    pub d_vision: usize,
    queries: ParamId,
    blocks: Vec<CrossBlock>,
    ln_out: LayerNorm,
    proj: Linear,
    /// `[2 × d_llm]`: row 0 negative, row 1 positive.
    pub label_embedding: ParamId,
}

impl Connector {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: ConnectorConfig, d_vision: usize) -> Result<Self> {
        if config.n_queries == 0 || config.n_blocks == 0 {
            return Err(Error::Config("connector needs at least one query and one block".into()));
        }
        let g = Group::Connector;
        let queries = store.add("connector.queries", g, normal_init(rng, config.n_queries, d_vision, 1.0));
        let gain = 1.0 / (2.0 * config.n_blocks as f32).sqrt();
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let name = format!("connector.block{i}");
                Ok(CrossBlock {
                    ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), g, d_vision),
                    ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), g, d_vision),
                    attn: Attention::new(store, rng, &format!("{name}.attn"), g, d_vision, d_vision, config.n_heads, gain)?,
                    ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), g, d_vision),
                    ff: Mlp::new(
                        store,
                        rng,
                        &format!("{name}.ff"),
                        g,
                        d_vision,
                        d_vision * config.mlp_ratio,
                        d_vision,
                        gain,
                    ),
                })
            })
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(store, "connector.ln_out", g, d_vision);
        let proj = Linear::new(store, rng, "connector.proj", g, d_vision, config.d_llm, true, 1.0);
        let label_embedding = store.add(
            "label_embedding",
            Group::LabelEmbedding,
            normal_init(rng, 2, config.d_llm, 1.0),
        );
        Ok(Self {
            config,
            d_vision,
            queries,
            blocks,
            ln_out,
            proj,
            label_embedding,
        })
    }

    /// Compresses `B` stacked token sets `[B·T × d_vision]` into `[B·N × d_llm]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, tokens_per_image: usize) -> Result<Var> {
        let tv = g.value(tokens);
        if tv.cols() != self.d_vision {
            return Err(Error::shape(format!(
                "connector expects width {}, got {}",
                self.d_vision,
                tv.cols()
            )));
        }
        if tokens_per_image == 0 || tv.rows() % tokens_per_image != 0 {
            return Err(Error::shape("token rows are not a whole number of images"));
        }
        let b = tv.rows() / tokens_per_image;
        let n = self.config.n_queries;
        let q = g.param(store, self.queries);
        let mut x = g.concat_rows(&vec![q; b])?;
        let segs: Vec<Segment> = (0..b)
            .map(|i| Segment {
                q_start: i * n,
                q_len: n,
                k_start: i * tokens_per_image,
                k_len: tokens_per_image,
            })
            .collect();
        for blk in &self.blocks {
            let hq = blk.ln_q.forward(g, store, x)?;
            let hk = blk.ln_kv.forward(g, store, tokens)?;
            let a = blk.attn.forward(g, store, hq, hk, segs.clone(), Mask::None)?;
            x = g.add(x, a)?;
            let h = blk.ln_ff.forward(g, store, x)?;
            let f = blk.ff.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        let h = self.ln_out.forward(g, store, x)?;
        self.proj.forward(g, store, h)
    }

    /// `compress` for one image's `[(HW+1) × d_vision]` prompt-free tokens.
    pub fn compress(&self, store: &ParamStore, tokens: &Tensor) -> Result<LatentTokens> {
        let mut g = Graph::inference();
        let t = g.constant(tokens.clone());
        let out = self.forward(&mut g, store, t, tokens.rows())?;
        Ok(LatentTokens {
            tokens: g.value(out).clone(),
        })
    }

    pub fn label_table(&self, store: &ParamStore) -> Tensor {
        store.get(self.label_embedding).clone()
    }

    /// Graph version of [`build_context`] taking stacked latents
    /// `[a_0; b_0; a_1; b_1; …]` of shape `[2K·N × d_llm]` and the prompt slot rows.
    pub fn context_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: Var,
        labels: &[bool],
        prompt_rows: Option<Var>,
    ) -> Result<(Var, SequenceLayout)> {
        let n = self.config.n_queries;
        let k = labels.len();
        if k == 0 {
            return Err(Error::Context("support set is empty".into()));
        }
        if g.value(latents).rows() != 2 * k * n {
            return Err(Error::shape("latent rows do not match 2·K·N"));
        }
        let m = prompt_rows.map_or(0, |p| g.value(p).rows());
        let table = g.param(store, self.label_embedding);
        let pool = g.concat_rows(&[latents, table])?;
        let label_base = 2 * k * n;
        let mut idx = Vec::with_capacity(k * (2 * n + 1));
        for (p, &y) in labels.iter().enumerate() {
            idx.extend(2 * p * n..2 * (p + 1) * n);
            idx.push(label_base + y as usize);
        }
        let blocks = g.gather_rows(pool, idx)?;
        let seq = match prompt_rows {
            Some(p) => g.concat_rows(&[blocks, p])?,
            None => blocks,
        };
        Ok((seq, SequenceLayout { n, k, m }))
    }
}

/// Shape of a context: `K` pair blocks of `2N + 1` rows, then `M` prompt rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

impl SequenceLayout {
    pub fn block_len(&self) -> usize {
        2 * self.n + 1
    }

    pub fn len(&self) -> usize {
        2 * self.n * self.k + self.k + self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of pair `p`'s label token.
    pub fn label_slot(&self, p: usize) -> usize {
        p * self.block_len() + 2 * self.n
    }

    /// Row whose output predicts pair `p`'s label.
    pub fn prediction_position(&self, p: usize) -> usize {
        self.label_slot(p) - 1
    }

    pub fn prompt_start(&self) -> usize {
        self.k * self.block_len()
    }

    pub fn prompt_positions(&self) -> Vec<usize> {
        (self.prompt_start()..self.len()).collect()
    }
}

/// Tokens of a pair block or a full context with its label bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSequence {
    pub tokens: Tensor,
    pub label_positions: Vec<usize>,
    pub labels: Vec<bool>,
    pub layout: SequenceLayout,
}

impl PairSequence {
    /// Per-row supervision target: `Some(label)` at the row preceding each
    /// label slot, `None` elsewhere.
    pub fn supervision(&self) -> Vec<Option<bool>> {
        let mut s = vec![None; self.tokens.rows()];
        for (&pos, &y) in self.label_positions.iter().zip(&self.labels) {
            s[pos - 1] = Some(y);
        }
        s
    }

    /// Rows of block `p` split into `(I_i, I_j, label row)`.
    pub fn block(&self, p: usize) -> (Tensor, Tensor, Tensor) {
        let n = self.layout.n;
        let start = p * self.layout.block_len();
        (
            self.tokens.slice_rows(start, n),
            self.tokens.slice_rows(start + n, n),
            self.tokens.slice_rows(start + 2 * n, 1),
        )
    }

    /// Writes the documented little-endian dump: header `[N, K, M, d_llm]` as
    /// `u32`, tokens as row-major `f32`, `K` label positions as `u32`, `K` labels as `u8`.
    pub fn write_debug_dump(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut bytes = Vec::new();
        for v in [self.layout.n, self.layout.k, self.layout.m, self.tokens.cols()] {
            bytes.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.tokens.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &p in &self.label_positions {
            bytes.extend_from_slice(&(p as u32).to_le_bytes());
        }
        bytes.extend(self.labels.iter().map(|&y| y as u8));
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_debug_dump(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut at = 0;
        let mut u32_at = |bytes: &[u8]| -> Result<usize> {
            let b = bytes
                .get(at..at + 4)
                .ok_or_else(|| Error::Integrity(format!("{} is truncated", path.display())))?;
            at += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let (n, k, m, d) = (u32_at(&bytes)?, u32_at(&bytes)?, u32_at(&bytes)?, u32_at(&bytes)?);
        let layout = SequenceLayout { n, k, m };
        let rows = layout.len();
        let expected = 16 + rows * d * 4 + k * 4 + k;
        if bytes.len() != expected {
            return Err(Error::Integrity(format!(
                "{} holds {} bytes, layout needs {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[16..16 + rows * d * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let pos_off = 16 + rows * d * 4;
        let label_positions = bytes[pos_off..pos_off + 4 * k]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let labels = bytes[pos_off + 4 * k..].iter().map(|&b| b != 0).collect();
        Ok(Self {
            tokens: Tensor::from_vec(rows, d, data)?,
            label_positions,
            labels,
            layout,
        })
    }
}

/// `[I_i; I_j; L_ij]`.
pub fn build_pair(li: &LatentTokens, lj: &LatentTokens, label: bool, label_table: &Tensor) -> Result<PairSequence> {
    build_context(&[(li, lj, label)], 0, label_table)
}

/// Concatenated pair blocks followed by `m` zero placeholder rows for the
/// learnable prompts.
pub fn build_context(
    pairs: &[(&LatentTokens, &LatentTokens, bool)],
    m: usize,
    label_table: &Tensor,
) -> Result<PairSequence> {
    let Some(first) = pairs.first() else {
        return Err(Error::Context("support set is empty".into()));
    };
    let (n, d) = first.0.tokens.shape();
    if label_table.shape() != (2, d) {
        return Err(Error::shape("label table must be [2 × d_llm]"));
    }
    let layout = SequenceLayout { n, k: pairs.len(), m };
    let mut data = Vec::with_capacity(layout.len() * d);
    let mut label_positions = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for (p, (a, b, y)) in pairs.iter().enumerate() {
        if a.tokens.shape() != (n, d) || b.tokens.shape() != (n, d) {
            return Err(Error::shape(format!("pair {p} latents are not [{n} × {d}]")));
        }
        data.extend_from_slice(a.tokens.data());
        data.extend_from_slice(b.tokens.data());
        data.extend_from_slice(label_table.row(*y as usize));
        label_positions.push(layout.label_slot(p));
        labels.push(*y);
    }
    data.resize(layout.len() * d, 0.0);
    Ok(PairSequence {
        tokens: Tensor::from_vec(layout.len(), d, data)?,
        label_positions,
        labels,
        layout,
    })
}
