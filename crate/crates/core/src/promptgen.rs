//! Support-conditioned prompt generation.
//!
//! A frozen causal transformer reads `K` labelled pair blocks followed by `M`
//! learnable prompt rows. A two-class head reads the row just before each
//! label slot and is trained with a masked cross-entropy; a two-layer visual
//! head maps the final hidden states at the prompt rows to `P_task`.
//! Generated prompts can be cached per `(category, support checksum)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mask, Segment, Var};
use crate::backbone::{PromptSource, TokenSource, VisualPrompt};
use crate::connector::{Connector, ConnectorConfig, PairSequence, SequenceLayout};
use crate::error::{Error, Result};
use crate::losses::{label_cross_entropy, label_head_loss};
use crate::nn::{Block, LayerNorm, Linear, Mlp};
use crate::ot::Mat;
use crate::params::{normal_init, Group, ParamId, ParamStore};
use crate::synthdata::SupportSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub positions: PositionScheme,
}

impl Default for SequenceModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            positions: PositionScheme::Recency,
        }
    }
}

/// How the sequence model sees token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    /// Sinusoidal embeddings added to the input.
    Sinusoidal,
    /// No embeddings; attention scores decay linearly with distance (ALiBi).
    Recency,
}

/// Decoder-only transformer, frozen at initialisation.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    pub config: SequenceModelConfig,
    pub d_llm: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl SequenceModel {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: SequenceModelConfig, d_llm: usize) -> Result<Self> {
        if config.n_layers == 0 {
            return Err(Error::Config("sequence model needs at least one layer".into()));
        }
        let g = Group::SequenceModel;
        let gain = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(store, rng, &format!("seqmodel.block{l}"), g, d_llm, config.n_heads, config.mlp_ratio, gain))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "seqmodel.ln_f", g, d_llm);
        store.set_frozen(g, true);
        Ok(Self {
            config,
            d_llm,
            blocks,
            ln_f,
        })
    }

    fn positions(&self, len: usize) -> Tensor {
        let d = self.d_llm;
        let mut t = Tensor::zeros(len, d);
        for p in 0..len {
            for i in 0..d / 2 {
                let w = (p as f64) / 10_000f64.powf(2.0 * i as f64 / d as f64);
                t.set(p, 2 * i, w.sin() as f32);
                t.set(p, 2 * i + 1, w.cos() as f32);
            }
        }
        t
    }

    /// Causal pass over `[L × d_llm]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (len, d) = g.value(x).shape();
        if d != self.d_llm {
            return Err(Error::shape(format!("sequence width {d} differs from d_llm {}", self.d_llm)));
        }
        let (mut h, mask) = match self.config.positions {
            PositionScheme::Sinusoidal => {
                let pos = g.constant(self.positions(len));
                (g.add(x, pos)?, Mask::Causal)
            }
            PositionScheme::Recency => (x, Mask::CausalRecency),
        };
        for blk in &self.blocks {
            h = blk.forward(g, store, h, vec![Segment::square(0, len)], mask)?;
        }
        self.ln_f.forward(g, store, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptGenConfig {
    /// Number of prompt tokens `M`.
    pub m: usize,
    pub visual_hidden: usize,
    pub connector: ConnectorConfig,
    pub seqmodel: SequenceModelConfig,
}

impl Default for PromptGenConfig {
    fn default() -> Self {
        Self {
            m: 16,
            visual_hidden: 256,
            connector: ConnectorConfig::default(),
            seqmodel: SequenceModelConfig::default(),
        }
    }
}

/// Connector, frozen sequence model, learnable prompts and both heads.
#[derive(Clone, Debug)]
pub struct PromptGenerator {
    pub config: PromptGenConfig,
    pub d_vision: usize,
    pub connector: Connector,
    pub seqmodel: SequenceModel,
    /// `P_learn`, `[M × d_llm]`.
    pub prompts: ParamId,
    pub visual_head: Mlp,
    pub label_head: Linear,
}

/// Graph handles of one context pass.
#[derive(Clone, Copy, Debug)]
pub struct ContextForward {
    pub hidden: Var,
    pub layout: SequenceLayout,
    /// `[K × 2]` label logits.
    pub icl_logits: Var,
    /// `[M × d_vision]`, or `None` when `M = 0`.
    pub prompt: Option<Var>,
}

impl PromptGenerator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: PromptGenConfig, d_vision: usize) -> Result<Self> {
        let d_llm = config.connector.d_llm;
        let connector = Connector::new(store, rng, config.connector.clone(), d_vision)?;
        let seqmodel = SequenceModel::new(store, rng, config.seqmodel.clone(), d_llm)?;
        let prompts = store.add("prompt_tokens", Group::PromptTokens, normal_init(rng, config.m, d_llm, 1.0));
        let visual_head = Mlp::new(store, rng, "visual_head", Group::VisualHead, d_llm, config.visual_hidden, d_vision, 1.0);
        let label_head = Linear::new(store, rng, "label_head", Group::LabelHead, d_llm, 2, true, 1.0);
        Ok(Self {
            config,
            d_vision,
            connector,
            seqmodel,
            prompts,
            visual_head,
            label_head,
        })
    }

    /// Stacked prompt-free tokens `[a_0; b_0; a_1; b_1; …]` of every support pair.
    pub fn support_tokens(&self, support: &SupportSet, source: &dyn TokenSource, order: &[usize]) -> Result<(Tensor, usize, Vec<bool>)> {
        let mut parts = Vec::with_capacity(2 * order.len());
        let mut labels = Vec::with_capacity(order.len());
        for &i in order {
            let p = support
                .pairs
                .get(i)
                .ok_or_else(|| Error::Context(format!("pair index {i} out of range")))?;
            parts.push(source.tokens(p.a)?);
            parts.push(source.tokens(p.b)?);
            labels.push(p.label);
        }
        let Some(first) = parts.first() else {
            return Err(Error::Context("support set is empty".into()));
        };
        let per_image = first.rows();
        let refs: Vec<&Tensor> = parts.iter().map(|t| t.as_ref()).collect();
        Ok((Tensor::concat_rows(&refs)?, per_image, labels))
    }

    /// Full context pass: compress, assemble, run the sequence model, read both heads.
    pub fn forward_support(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        tokens_per_image: usize,
        labels: &[bool],
    ) -> Result<ContextForward> {
        let latents = self.connector.forward(g, store, tokens, tokens_per_image)?;
        let prompt_rows = (self.config.m > 0).then(|| g.param(store, self.prompts));
        let (seq, layout) = self.connector.context_graph(g, store, latents, labels, prompt_rows)?;
        let hidden = self.seqmodel.forward(g, store, seq)?;
        self.heads(g, store, hidden, layout)
    }

    fn heads(&self, g: &mut Graph, store: &ParamStore, hidden: Var, layout: SequenceLayout) -> Result<ContextForward> {
        let pred_rows: Vec<usize> = (0..layout.k).map(|p| layout.prediction_position(p)).collect();
        let h = g.gather_rows(hidden, pred_rows)?;
        let icl_logits = self.label_head.forward(g, store, h)?;
        let prompt = if layout.m > 0 {
            let hp = g.gather_rows(hidden, layout.prompt_positions())?;
            Some(self.visual_head.forward(g, store, hp)?)
        } else {
            None
        };
        Ok(ContextForward {
            hidden,
            layout,
            icl_logits,
            prompt,
        })
    }

    /// Masked label loss as a graph node, plus its value.
    pub fn icl_loss_graph(&self, g: &mut Graph, cf: &ContextForward, labels: &[bool]) -> Result<(Var, f64)> {
        let logits = Mat::from_tensor(g.value(cf.icl_logits));
        let ce = label_cross_entropy(&logits, labels)?;
        let v = g.scalar_op(&[cf.icl_logits], ce.value as f32, vec![Some(ce.grads[0].to_tensor())])?;
        Ok((v, ce.value))
    }

    /// Copies the current `P_learn` into the prompt slots of `seq`.
    pub fn fill_prompt_slots(&self, store: &ParamStore, seq: &mut PairSequence) -> Result<()> {
        let m = seq.layout.m;
        if m != self.config.m && m != 0 {
            return Err(Error::shape(format!("sequence has {m} prompt slots, generator has {}", self.config.m)));
        }
        let p = store.get(self.prompts);
        let start = seq.layout.prompt_start();
        for r in 0..m {
            seq.tokens.row_mut(start + r).copy_from_slice(p.row(r));
        }
        Ok(())
    }

    /// Final hidden states `[L × d_llm]` of an assembled sequence.
    pub fn forward_context(&self, store: &ParamStore, seq: &PairSequence) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(seq.tokens.clone());
        let h = self.seqmodel.forward(&mut g, store, x)?;
        Ok(g.value(h).clone())
    }

    /// `Σ_k CE(head(h[slot_k − 1]), y_k)`; rows without a supervised target are ignored.
    pub fn icl_loss(&self, store: &ParamStore, seq: &PairSequence, hidden: &Tensor) -> Result<f64> {
        if seq.label_positions.is_empty() {
            return Err(Error::Protocol("sequence has no label positions".into()));
        }
        let (rows, labels): (Vec<usize>, Vec<bool>) = seq
            .supervision()
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|y| (i, y)))
            .unzip();
        let mut h = Mat::zeros(rows.len(), hidden.cols());
        for (k, &r) in rows.iter().enumerate() {
            for c in 0..hidden.cols() {
                h.set(k, c, hidden.get(r, c) as f64);
            }
        }
        let w = Mat::from_tensor(store.get(self.label_head.w));
        let b = match self.label_head.b {
            Some(b) => Mat::from_tensor(store.get(b)),
            None => Mat::zeros(1, 2),
        };
        Ok(label_head_loss(&h, &w, &b, &labels)?.value)
    }

    /// `P_task` for a support set, pairs in sampling order.
    pub fn generate_prompt(&self, store: &ParamStore, support: &SupportSet, source: &dyn TokenSource) -> Result<VisualPrompt> {
        if self.config.m == 0 {
            return Err(Error::Config("prompt generation needs M ≥ 1".into()));
        }
        let order: Vec<usize> = (0..support.pairs.len()).collect();
        let (tokens, per_image, labels) = self.support_tokens(support, source, &order)?;
        let mut g = Graph::inference();
        let t = g.constant(tokens);
        let cf = self.forward_support(&mut g, store, t, per_image, &labels)?;
        let p = g.value(cf.prompt.expect("M ≥ 1")).clone();
        if !p.is_finite() {
            return Err(Error::numeric("visual_head", "generated prompt is not finite"));
        }
        Ok(VisualPrompt {
            tokens: p,
            source: PromptSource {
                category_id: support.category_id,
                support_seed: support.seed,
                checksum: support_checksum(support),
            },
        })
    }

    /// Fingerprint over every parameter the generated prompt depends on.
    pub fn fingerprint(store: &ParamStore) -> String {
        let mut h = Sha256::new();
        for g in [
            Group::Connector,
            Group::LabelEmbedding,
            Group::SequenceModel,
            Group::PromptTokens,
            Group::VisualHead,
        ] {
            h.update(store.fingerprint(g).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// SHA-256 of the canonical JSON encoding of a support set.
pub fn support_checksum(support: &SupportSet) -> String {
    let bytes = serde_json::to_vec(support).expect("support set serialises");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheKeyFile {
    category_id: u32,
    checksum: String,
    m: usize,
    d_vision: usize,
    support_seed: u64,
    model_fingerprint: String,
    byte_order: String,
    support: SupportSet,
}

#[derive(Clone, Debug)]
struct CacheEntry {
    prompt: VisualPrompt,
    support: SupportSet,
}

/// Write-once prompt store keyed by `(category_id, support checksum)`.
#[derive(Debug)]
pub struct PromptCache {
    model_fingerprint: String,
    entries: Mutex<BTreeMap<(u32, String), Arc<CacheEntry>>>,
    generated: AtomicUsize,
}

const BYTE_ORDER: &str = "f32 little-endian row-major";

impl PromptCache {
    pub fn new(model_fingerprint: impl Into<String>) -> Self {
        Self {
            model_fingerprint: model_fingerprint.into(),
            entries: Mutex::new(BTreeMap::new()),
            generated: AtomicUsize::new(0),
        }
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    /// Context passes run by this cache so far.
    pub fn generated_count(&self) -> usize {
        self.generated.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, category_id: u32, checksum: &str) -> Option<VisualPrompt> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(category_id, checksum.to_string()))
            .map(|e| e.prompt.clone())
    }

    /// Stores an entry. Re-inserting an identical entry is a no-op; anything
    /// else under an existing key is an integrity error.
    pub fn insert(&self, support: &SupportSet, prompt: VisualPrompt) -> Result<()> {
        let key = (support.category_id, prompt.source.checksum.clone());
        let mut map = self.entries.lock().expect("cache lock");
        if let Some(old) = map.get(&key) {
            if old.support != *support || !old.prompt.tokens.bit_eq(&prompt.tokens) {
                return Err(Error::Integrity(format!(
                    "cache key (category {}, checksum {}) already holds a different entry",
                    key.0, key.1
                )));
            }
            return Ok(());
        }
        map.insert(key, Arc::new(CacheEntry { prompt, support: support.clone() }));
        Ok(())
    }

    pub fn get_or_generate(
        &self,
        generator: &PromptGenerator,
        store: &ParamStore,
        support: &SupportSet,
        source: &dyn TokenSource,
    ) -> Result<VisualPrompt> {
        let checksum = support_checksum(support);
        if let Some(e) = self
            .entries
            .lock()
            .expect("cache lock")
            .get(&(support.category_id, checksum.clone()))
            .cloned()
        {
            if e.support != *support {
                return Err(Error::Integrity(format!(
                    "checksum {checksum} maps to a different support set for category {}",
                    support.category_id
                )));
            }
            return Ok(e.prompt.clone());
        }
        let prompt = generator.generate_prompt(store, support, source)?;
        self.generated.fetch_add(1, Ordering::SeqCst);
        self.insert(support, prompt.clone())?;
        Ok(prompt)
    }

    /// Writes one `<category>_<checksum>.key.json` and `.bin` pair per entry.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let map = self.entries.lock().expect("cache lock");
        for ((cat, checksum), e) in map.iter() {
            let stem = format!("c{cat:04}_{checksum}");
            let key = CacheKeyFile {
                category_id: *cat,
                checksum: checksum.clone(),
                m: e.prompt.tokens.rows(),
                d_vision: e.prompt.tokens.cols(),
                support_seed: e.prompt.source.support_seed,
                model_fingerprint: self.model_fingerprint.clone(),
                byte_order: BYTE_ORDER.into(),
                support: e.support.clone(),
            };
            let kp = dir.join(format!("{stem}.key.json"));
            fs::write(&kp, serde_json::to_vec_pretty(&key)?).map_err(|err| Error::io(&kp, err))?;
            let bytes: Vec<u8> = e.prompt.tokens.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let bp = dir.join(format!("{stem}.bin"));
            fs::write(&bp, bytes).map_err(|err| Error::io(&bp, err))?;
        }
        Ok(())
    }

    /// Reads a persisted cache; entries written for other weights are rejected.
    pub fn load(dir: &Path, model_fingerprint: &str) -> Result<Self> {
        let cache = Self::new(model_fingerprint);
        let mut names: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".key.json"))
            .collect();
        names.sort();
        for kp in names {
            let key: CacheKeyFile =
                serde_json::from_slice(&fs::read(&kp).map_err(|e| Error::io(&kp, e))?)?;
            if key.model_fingerprint != model_fingerprint {
                return Err(Error::Integrity(format!(
                    "{} was generated by different weights",
                    kp.display()
                )));
            }
            if support_checksum(&key.support) != key.checksum {
                return Err(Error::Integrity(format!("{} checksum does not match its support set", kp.display())));
            }
            let bp = kp.with_file_name(kp.file_name().expect("file name").to_string_lossy().replace(".key.json", ".bin"));
            let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
            if bytes.len() != key.m * key.d_vision * 4 {
                return Err(Error::Integrity(format!("{} has the wrong size", bp.display())));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let prompt = VisualPrompt {
                tokens: Tensor::from_vec(key.m, key.d_vision, data)?,
                source: PromptSource {
                    category_id: key.category_id,
                    support_seed: key.support_seed,
                    checksum: key.checksum.clone(),
                },
            };
            cache.insert(&key.support, prompt)?;
        }
        Ok(cache)
    }

    /// Summary rows `(category, checksum, M, d_vision)` for inspection.
    pub fn summary(&self) -> Vec<(u32, String, usize, usize)> {
        self.entries
            .lock()
            .expect("cache lock")
            .iter()
            .map(|((c, k), e)| (*c, k.clone(), e.prompt.tokens.rows(), e.prompt.tokens.cols()))
            .collect()
    }
}

/// Removes every cache entry file in `dir`; returns how many entries were removed.
pub fn clear_cache_dir(dir: &Path) -> Result<usize> {
    if !dir.exists() {
        return Ok(0);
    }
    let mut removed = 0;
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.to_string_lossy();
        if name.ends_with(".key.json") || name.ends_with(".bin") {
            removed += name.ends_with(".key.json") as usize;
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(removed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn sequence_model_is_frozen_and_causal() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(1);
        let sm = SequenceModel::new(&mut store, &mut rng, SequenceModelConfig { n_layers: 2, ..Default::default() }, 16).unwrap();
        assert!(store.group_frozen(Group::SequenceModel));
        let x = normal_init(&mut rng, 10, 16, 1.0);
        let run = |x: &Tensor| {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let h = sm.forward(&mut g, &store, v).unwrap();
            g.value(h).clone()
        };
        let base = run(&x);
        let mut y = x.clone();
        y.row_mut(6).iter_mut().for_each(|v| *v += 0.5);
        let pert = run(&y);
        for r in 0..10 {
            if r < 6 {
                assert_eq!(base.row(r), pert.row(r));
            } else {
                assert_ne!(base.row(r), pert.row(r));
            }
        }
    }
}
