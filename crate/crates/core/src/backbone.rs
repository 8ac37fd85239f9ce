//! Vision transformer with a CLS token, learned positional embeddings and
//! per-layer visual prompt injection.
//!
//! In deep mode the same `M × d_vision` prompt is appended to the token set of
//! every layer: image tokens attend over `[image; prompt]`, prompt rows are
//! never updated, so their outputs are dropped before the next layer. No
//! positional embedding touches prompt rows. Shallow mode appends the prompt
//! once before the first layer and lets it propagate.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, Segment, Var};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Block, LayerNorm, Linear};
use crate::params::{normal_init, Group, ParamId, ParamStore};
use crate::seed;
use crate::synthdata::{Corpus, Image, RecordRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Deep,
    Shallow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub prompt_mode: PromptMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_vision: 128,
            n_layers: 6,
            n_heads: 4,
            mlp_ratio: 4,
            prompt_mode: PromptMode::Deep,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.d_vision % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_vision {} is not divisible by {} heads",
                self.d_vision, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Spatial tokens per image, `H × W`.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `H × W + 1`.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        Image::CHANNELS * self.patch_size * self.patch_size
    }
}

/// Where a prompt came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSource {
    pub category_id: u32,
    pub support_seed: u64,
    /// Hex SHA-256 binding the tokens to the support set that produced them.
    pub checksum: String,
}

/// Task prompt `P_task ∈ R^{M × d_vision}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub tokens: Tensor,
    pub source: PromptSource,
}

impl VisualPrompt {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// L2-normalised CLS output.
    pub cls_embedding: Vec<f32>,
    /// `[(H × W) × d_vision]`, final-norm outputs of the spatial tokens.
    pub patch_features: Tensor,
}

/// Graph handles of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// Final-norm outputs of CLS and patch tokens, `[B·(HW+1) × d]`.
    pub tokens: Var,
    /// Unit-norm CLS rows, `[B × d]`.
    pub cls: Var,
    /// Un-normalised CLS rows, `[B × d]`.
    pub cls_raw: Var,
    /// Patch rows, `[B·HW × d]`.
    pub patches: Var,
}

/// How image tokens see the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptVisibility {
    Attend,
    /// Attention from image tokens to prompt rows is masked out.
    Blocked,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_vision;
        let g = Group::Backbone;
        let patch_embed = Linear::new(store, rng, "backbone.patch_embed", g, config.patch_dim(), d, true, 1.0);
        let cls = store.add("backbone.cls", g, normal_init(rng, 1, d, 0.02));
        let pos = store.add("backbone.pos", g, normal_init(rng, config.n_tokens(), d, 0.02));
        let residual_gain = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let blocks = (0..config.n_layers)
            .map(|l| {
                Block::new(
                    store,
                    rng,
                    &format!("backbone.block{l}"),
                    g,
                    d,
                    config.n_heads,
                    config.mlp_ratio,
                    residual_gain,
                )
            })
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "backbone.ln_f", g, d);
        Ok(Self {
            config,
            patch_embed,
            cls,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Rows of flattened `(channel, dy, dx)` patches in raster order.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let c = &self.config;
        if image.height != c.image_size || image.width != c.image_size {
            return Err(Error::shape(format!(
                "image is {}x{}, backbone expects {}",
                image.height, image.width, c.image_size
            )));
        }
        let (p, grid) = (c.patch_size, c.grid());
        let mut out = Tensor::zeros(c.n_patches(), c.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                let row = out.row_mut(gy * grid + gx);
                let mut k = 0;
                for ch in 0..Image::CHANNELS {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = image.get(ch, gy * p + dy, gx * p + dx);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, images: &[&Image]) -> Result<Var> {
        let patches: Vec<Tensor> = images.iter().map(|im| self.patchify(im)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = patches.iter().collect();
        let x = g.constant(Tensor::concat_rows(&refs)?);
        let e = self.patch_embed.forward(g, store, x)?;
        let cls = g.param(store, self.cls);
        let pos = g.param(store, self.pos);
        let np = self.config.n_patches();
        let mut parts = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let pe = g.slice_rows(e, b * np, np)?;
            let tok = g.concat_rows(&[cls, pe])?;
            parts.push(g.add(tok, pos)?);
        }
        g.concat_rows(&parts)
    }

    /// Batched forward. `prompt` is an `[M × d_vision]` graph value or `None`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[&Image],
        prompt: Option<Var>,
        visibility: PromptVisibility,
    ) -> Result<BackboneOutput> {
        if images.is_empty() {
            return Err(Error::shape("empty image batch"));
        }
        let d = self.config.d_vision;
        let n = self.config.n_tokens();
        let b = images.len();
        let m = match prompt {
            Some(p) => {
                let pv = g.value(p);
                if pv.cols() != d {
                    return Err(Error::shape(format!(
                        "prompt width {} differs from d_vision {d}",
                        pv.cols()
                    )));
                }
                pv.rows()
            }
            None => 0,
        };
        let mut x = self.embed(g, store, images)?;
        let mask = match visibility {
            PromptVisibility::Attend => Mask::None,
            PromptVisibility::Blocked => Mask::QueryPrefix(n),
        };
        match (prompt, self.config.prompt_mode) {
            (Some(p), PromptMode::Deep) if m > 0 => {
                for blk in &self.blocks {
                    x = self.deep_block(g, store, blk, x, p, b, m, mask)?;
                }
            }
            (Some(p), PromptMode::Shallow) if m > 0 => {
                let mut parts = Vec::with_capacity(2 * b);
                for i in 0..b {
                    parts.push(g.slice_rows(x, i * n, n)?);
                    parts.push(p);
                }
                x = g.concat_rows(&parts)?;
                let segs: Vec<Segment> = (0..b).map(|i| Segment::square(i * (n + m), n + m)).collect();
                for blk in &self.blocks {
                    x = blk.forward(g, store, x, segs.clone(), mask)?;
                }
                let keep: Vec<usize> = (0..b).flat_map(|i| i * (n + m)..i * (n + m) + n).collect();
                x = g.gather_rows(x, keep)?;
            }
            _ => {
                let segs: Vec<Segment> = (0..b).map(|i| Segment::square(i * n, n)).collect();
                for blk in &self.blocks {
                    x = blk.forward(g, store, x, segs.clone(), Mask::None)?;
                }
            }
        }
        let tokens = self.ln_f.forward(g, store, x)?;
        let cls_idx: Vec<usize> = (0..b).map(|i| i * n).collect();
        let patch_idx: Vec<usize> = (0..b).flat_map(|i| i * n + 1..(i + 1) * n).collect();
        let cls_raw = g.gather_rows(tokens, cls_idx)?;
        let cls = g.row_normalize(cls_raw);
        let patches = g.gather_rows(tokens, patch_idx)?;
        Ok(BackboneOutput {
            tokens,
            cls,
            cls_raw,
            patches,
        })
    }

    /// One pre-norm block where image queries attend over `[image; prompt]`.
    #[allow(clippy::too_many_arguments)]
    fn deep_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        blk: &Block,
        x: Var,
        prompt: Var,
        b: usize,
        m: usize,
        mask: Mask,
    ) -> Result<Var> {
        let n = self.config.n_tokens();
        let h = blk.ln1.forward(g, store, x)?;
        let hp = blk.ln1.forward(g, store, prompt)?;
        let mut parts = Vec::with_capacity(2 * b);
        for i in 0..b {
            parts.push(g.slice_rows(h, i * n, n)?);
            parts.push(hp);
        }
        let keys = g.concat_rows(&parts)?;
        let segs: Vec<Segment> = (0..b)
            .map(|i| Segment {
                q_start: i * n,
                q_len: n,
                k_start: i * (n + m),
                k_len: n + m,
            })
            .collect();
        let a = blk.attn.forward(g, store, h, keys, segs, mask)?;
        let x = g.add(x, a)?;
        let h = blk.ln2.forward(g, store, x)?;
        let f = blk.mlp.forward(g, store, h)?;
        g.add(x, f)
    }

    /// Prompt-conditioned features of a batch, without gradients.
    pub fn encode_batch(
        &self,
        store: &ParamStore,
        images: &[&Image],
        prompt: Option<&VisualPrompt>,
    ) -> Result<Vec<FeatureBundle>> {
        let mut g = Graph::inference();
        let p = match prompt {
            Some(p) if !p.tokens.is_finite() => {
                return Err(Error::numeric("backbone", "prompt has non-finite entries"))
            }
            Some(p) if !p.is_empty() => Some(g.constant(p.tokens.clone())),
            _ => None,
        };
        let out = self.forward(&mut g, store, images, p, PromptVisibility::Attend)?;
        let cls = g.value(out.cls);
        let patches = g.value(out.patches);
        let np = self.config.n_patches();
        Ok((0..images.len())
            .map(|i| FeatureBundle {
                cls_embedding: cls.row(i).to_vec(),
                patch_features: patches.slice_rows(i * np, np),
            })
            .collect())
    }

    pub fn encode(&self, store: &ParamStore, image: &Image, prompt: Option<&VisualPrompt>) -> Result<FeatureBundle> {
        Ok(self.encode_batch(store, &[image], prompt)?.remove(0))
    }

    /// Final-norm `[(HW+1) × d]` token outputs without prompts, per image.
    pub fn token_features(&self, store: &ParamStore, images: &[&Image]) -> Result<Vec<Tensor>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, images, None, PromptVisibility::Attend)?;
        let t = g.value(out.tokens);
        let n = self.config.n_tokens();
        Ok((0..images.len()).map(|i| t.slice_rows(i * n, n)).collect())
    }
}

/// Supplies prompt-free `[(HW+1) × d_vision]` token features for corpus images.
pub trait TokenSource {
    fn tokens(&self, r: RecordRef) -> Result<Arc<Tensor>>;
}

/// Prompt-free token features of a frozen backbone, computed once per image.
#[derive(Clone, Debug, Default)]
pub struct TokenCache {
    map: HashMap<RecordRef, Arc<Tensor>>,
}

impl TokenCache {
    /// Encodes every listed record in batches of `batch`.
    pub fn build(backbone: &Backbone, store: &ParamStore, corpus: &Corpus, records: &[RecordRef], batch: usize) -> Result<Self> {
        let mut map = HashMap::with_capacity(records.len());
        for chunk in records.chunks(batch.max(1)) {
            let imgs: Vec<&Image> = chunk.iter().map(|r| corpus.image(*r)).collect::<Result<_>>()?;
            for (r, t) in chunk.iter().zip(backbone.token_features(store, &imgs)?) {
                map.insert(*r, Arc::new(t));
            }
        }
        Ok(Self { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl TokenSource for TokenCache {
    fn tokens(&self, r: RecordRef) -> Result<Arc<Tensor>> {
        self.map
            .get(&r)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("no cached tokens for {r:?}")))
    }
}

/// True iff both snapshots hold the same names with bit-identical values.
pub fn freeze_check(before: &BTreeMap<String, Tensor>, after: &BTreeMap<String, Tensor>) -> bool {
    before.len() == after.len()
        && before
            .iter()
            .zip(after)
            .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Views with this index are held out for the accuracy readout.
    pub holdout_view: u32,
    pub flip: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            holdout_view: 0,
            flip: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub heldout_accuracy: f64,
    pub chance: f64,
    pub n_heldout: usize,
    pub categories: Vec<u32>,
}

/// Linear category classifier used only during pretraining.
#[derive(Clone, Debug)]
pub struct PretrainHead {
    pub linear: Linear,
    pub categories: Vec<u32>,
}

/// Trains the backbone (and a throwaway classifier) to tell base categories
/// apart, then freezes it.
pub fn pretrain_backbone(
    store: &mut ParamStore,
    backbone: &Backbone,
    corpus: &Corpus,
    categories: &[u32],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if categories.is_empty() {
        return Err(Error::Protocol("pretraining needs at least one category".into()));
    }
    if let Some(c) = categories.iter().find(|c| !corpus.manifest.is_base(**c)) {
        return Err(Error::Protocol(format!(
            "category {c} is not a base category and cannot be used for pretraining"
        )));
    }
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::Config("pretraining needs positive steps and batch size".into()));
    }
    let mut rng = seed::rng_for(config.seed, "pretrain", 0);
    let head = PretrainHead {
        linear: Linear::new(
            store,
            &mut rng,
            "pretrain_head",
            Group::PretrainHead,
            backbone.config.d_vision,
            categories.len(),
            true,
            1.0,
        ),
        categories: categories.to_vec(),
    };
    let mut train: Vec<(RecordRef, usize)> = Vec::new();
    let mut held: Vec<(RecordRef, usize)> = Vec::new();
    for (label, &c) in categories.iter().enumerate() {
        for r in corpus.manifest.records_of(c)? {
            if r.view_index == config.holdout_view {
                held.push((r, label));
            } else {
                train.push((r, label));
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Protocol("no pretraining images left after the holdout".into()));
    }
    let opt_cfg = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg);
    let trainable: Vec<ParamId> = store
        .ids()
        .filter(|&id| matches!(store.group(id), Group::Backbone | Group::PretrainHead))
        .collect();
    let mut final_loss = 0.0;
    for _ in 0..config.steps {
        let batch: Vec<(Image, usize)> = (0..config.batch_size)
            .map(|_| {
                let (r, y) = train[rng.random_range(0..train.len())];
                let img = corpus.image(r)?;
                let img = if config.flip && rng.random::<bool>() {
                    img.flip_horizontal()
                } else {
                    img.clone()
                };
                Ok((img, y))
            })
            .collect::<Result<_>>()?;
        let imgs: Vec<&Image> = batch.iter().map(|(i, _)| i).collect();
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let mut g = Graph::new();
        let out = backbone.forward(&mut g, store, &imgs, None, PromptVisibility::Attend)?;
        let logits = head.linear.forward(&mut g, store, out.cls_raw)?;
        let (loss, dlogits) = softmax_xent_mean(g.value(logits), &labels);
        let l = g.scalar_op(&[logits], loss as f32, vec![Some(dlogits)])?;
        let grads = g.backward(l)?;
        let step: Vec<(ParamId, &Tensor)> = grads
            .params()
            .into_iter()
            .filter(|(id, _)| trainable.contains(id))
            .collect();
        opt.step(store, &step)?;
        final_loss = loss;
    }
    let mut correct = 0;
    for chunk in held.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|(r, _)| corpus.image(*r)).collect::<Result<_>>()?;
        let mut g = Graph::inference();
        let out = backbone.forward(&mut g, store, &imgs, None, PromptVisibility::Attend)?;
        let logits = head.linear.forward(&mut g, store, out.cls_raw)?;
        let lv = g.value(logits);
        for (i, (_, y)) in chunk.iter().enumerate() {
            let row = lv.row(i);
            let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += (pred == *y) as usize;
        }
    }
    store.set_frozen(Group::Backbone, true);
    store.set_frozen(Group::PretrainHead, true);
    Ok(PretrainReport {
        steps: config.steps,
        final_loss,
        heldout_accuracy: if held.is_empty() { 0.0 } else { correct as f64 / held.len() as f64 },
        chance: 1.0 / categories.len() as f64,
        n_heldout: held.len(),
        categories: categories.to_vec(),
    })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn softmax_xent_mean(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (b, c) = logits.shape();
    let mut grad = Tensor::zeros(b, c);
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[y] as f64;
        for j in 0..c {
            let p = (row[j] as f64 - lse).exp();
            grad.set(i, j, ((p - (j == y) as u8 as f64) / b as f64) as f32);
        }
    }
    (total / b as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, GenerationConfig};

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 32,
            patch_size: 8,
            d_vision: 32,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 2,
            prompt_mode: PromptMode::Deep,
        }
    }

    fn random_image(rng: &mut impl Rng, size: usize) -> Image {
        let mut im = Image::new(size, size);
        im.data.iter_mut().for_each(|v| *v = rng.random());
        im
    }

    fn prompt(rng: &mut impl Rng, m: usize, d: usize) -> VisualPrompt {
        VisualPrompt {
            tokens: normal_init(rng, m, d, 1.0),
            source: PromptSource {
                category_id: 0,
                support_seed: 0,
                checksum: String::new(),
            },
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig { patch_size: 7, ..small() }.validate().is_err());
        assert!(BackboneConfig { n_heads: 3, ..small() }.validate().is_err());
        let d = BackboneConfig::default();
        assert_eq!(d.n_patches(), 64);
        assert_eq!(d.n_tokens() + 16, 81);
    }

    #[test]
    fn shapes_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(1);
        let bb = Backbone::new(&mut store, &mut rng, small()).unwrap();
        let im = random_image(&mut rng, 32);
        let p = prompt(&mut rng, 5, 32);
        let a = bb.encode(&store, &im, Some(&p)).unwrap();
        let b = bb.encode(&store, &im, Some(&p)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patch_features.shape(), (16, 32));
        let n: f32 = a.cls_embedding.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let wrong = prompt(&mut rng, 5, 16);
        assert!(matches!(bb.encode(&store, &im, Some(&wrong)), Err(Error::Shape(_))));
        assert!(bb.encode(&store, &Image::new(16, 16), None).is_err());
    }

    #[test]
    fn batching_matches_single_images() {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(2);
        let bb = Backbone::new(&mut store, &mut rng, small()).unwrap();
        let ims: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 32)).collect();
        let p = prompt(&mut rng, 4, 32);
        let refs: Vec<&Image> = ims.iter().collect();
        let batch = bb.encode_batch(&store, &refs, Some(&p)).unwrap();
        for (im, got) in ims.iter().zip(&batch) {
            let one = bb.encode(&store, im, Some(&p)).unwrap();
            for (x, y) in one.cls_embedding.iter().zip(&got.cls_embedding) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn prompts_change_features_in_both_modes() {
        for mode in [PromptMode::Deep, PromptMode::Shallow] {
            let mut store = ParamStore::new();
            let mut rng = seed::rng(3);
            let bb = Backbone::new(&mut store, &mut rng, BackboneConfig { prompt_mode: mode, ..small() }).unwrap();
            let im = random_image(&mut rng, 32);
            let p = prompt(&mut rng, 3, 32);
            let with = bb.encode(&store, &im, Some(&p)).unwrap();
            let without = bb.encode(&store, &im, None).unwrap();
            assert_ne!(with.cls_embedding, without.cls_embedding);
        }
    }

    #[test]
    fn pretraining_refuses_novel_categories() {
        let corpus = generate_corpus(&GenerationConfig {
            n_categories: 3,
            n_base: Some(1),
            instances_per_category: 4,
            views_per_instance: 3,
            image_size: 32,
            seed: 1,
            ..GenerationConfig::default()
        })
        .unwrap();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut seed::rng(0), small()).unwrap();
        let novel = corpus.manifest.splits.novel[0];
        let err = pretrain_backbone(&mut store, &bb, &corpus, &[novel], &PretrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(!store.group_frozen(Group::Backbone));
    }

    #[test]
    fn freeze_check_sees_single_bit_changes() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut seed::rng(4), small()).unwrap();
        let before = store.snapshot(Group::Backbone);
        assert!(freeze_check(&before, &store.snapshot(Group::Backbone)));
        let id = bb.cls;
        store.update(id, |t| t.data_mut()[0] = f32::from_bits(t.data()[0].to_bits() ^ 1)).unwrap();
        assert!(!freeze_check(&before, &store.snapshot(Group::Backbone)));
    }
}
