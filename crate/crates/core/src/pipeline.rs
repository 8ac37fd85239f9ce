//! Training, evaluation, checkpointing and ablation drivers.
//!
//! A [`Model`] owns one parameter store holding a pretrained frozen backbone,
//! plus whatever the chosen [`Variant`] trains on top of it. Training steps
//! follow the episodic recipe: one base category per step, one support set
//! (and hence one prompt) shared by that step's triplets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::backbone::{
    pretrain_backbone, Backbone, BackboneConfig, PretrainConfig, PretrainReport, PromptSource, PromptVisibility,
    TokenCache, VisualPrompt,
};
use crate::connector::ConnectorConfig;
use crate::error::{Error, Result};
use crate::losses::{label_cross_entropy, patch_align_loss, total_loss, triplet_loss, AlignPair, LossLog, LossWeights, StepLog};
use crate::nn::{AdamW, AdamWConfig};
use crate::ot::{IpotParams, Mat};
use crate::params::{normal_init, Group, ParamId, ParamStore};
use crate::promptgen::{PromptCache, PromptGenConfig, PromptGenerator, SequenceModelConfig};
use crate::reid_eval::{evaluate_novel, CategoryEncoder, EvalConfig, RetrievalReport};
use crate::seed;
use crate::synthdata::{sample_support_set, sample_triplets, shuffled_indices, Corpus, GenerationConfig, Image, RecordRef, SupportSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
/// Environment variable overriding [`TrainConfig::seed`].
pub const SEED_ENV: &str = "VICP_SEED";

/// Which method is trained and evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pretrained backbone without prompts; nothing is trained.
    Frozen,
    /// One learnable prompt shared by all categories, trained with the triplet loss.
    StaticPrompt,
    /// Support-conditioned prompts, trained with the triplet and label losses.
    Icl,
    /// Support-conditioned prompts with the patch alignment loss added.
    Full,
}

impl Variant {
    pub const COMPONENT_ROWS: [Variant; 4] = [Variant::Frozen, Variant::StaticPrompt, Variant::Icl, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Frozen => "[i] frozen",
            Variant::StaticPrompt => "[ii] triplet",
            Variant::Icl => "[iv] +icl prompts",
            Variant::Full => "[vi] +patch align",
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Variant::Icl | Variant::Full)
    }
}

/// Width and depth of the trainable connector/head stack and the frozen sequence model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_llm: usize,
    pub connector_blocks: usize,
    pub connector_heads: usize,
    pub connector_mlp_ratio: usize,
    pub visual_hidden: usize,
    pub seqmodel: SequenceModelConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = ConnectorConfig::default();
        let p = PromptGenConfig::default();
        Self {
            d_llm: c.d_llm,
            connector_blocks: c.n_blocks,
            connector_heads: c.n_heads,
            connector_mlp_ratio: c.mlp_ratio,
            visual_hidden: p.visual_hidden,
            seqmodel: p.seqmodel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: Variant,
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` gives one pass over the base images.
    pub steps_per_epoch: Option<usize>,
    /// Triplets per step; `None` is `batch_size / 4`.
    pub triplets: Option<usize>,
    /// Support pairs per step.
    pub k: usize,
    /// Latent tokens per image.
    pub n: usize,
    /// Prompt tokens.
    pub m: usize,
    pub flip: bool,
    pub loss: LossWeights,
    pub ipot: IpotParams,
    pub data: GenerationConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// Worker threads for data generation and evaluation; `None` uses the rayon default.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            seed: 0,
            variant: Variant::Full,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            batch_size: 64,
            epochs: 10,
            steps_per_epoch: None,
            triplets: None,
            k: 64,
            n: 32,
            m: 16,
            flip: true,
            loss: LossWeights::default(),
            ipot: IpotParams::default(),
            data: GenerationConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            threads: None,
        }
    }
}

impl TrainConfig {
    /// Reduced sizes for the synthetic benchmark: 5 base and 10 novel
    /// categories of 64 upright instances whose three cues all carry identity,
    /// a narrower backbone and short episodic training.
    pub fn bench() -> Self {
        let mut c = Self::default();
        c.data.n_categories = 15;
        c.data.n_base = Some(5);
        c.data.instances_per_category = 64;
        c.data.max_rotation_deg = 0.0;
        c.data.distractor_cues = 0;
        c.backbone = BackboneConfig {
            d_vision: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 2,
            ..BackboneConfig::default()
        };
        c.pretrain.steps = 150;
        c.model = ModelConfig {
            d_llm: 64,
            connector_blocks: 1,
            connector_heads: 4,
            connector_mlp_ratio: 2,
            visual_hidden: 128,
            seqmodel: SequenceModelConfig {
                n_layers: 2,
                n_heads: 4,
                mlp_ratio: 2,
                ..SequenceModelConfig::default()
            },
        };
        c.lr = 1e-2;
        c.batch_size = 32;
        c.epochs = 4;
        c.steps_per_epoch = Some(100);
        c.k = 16;
        c.n = 4;
        c.m = 8;
        c.eval.k = 16;
        c
    }

    /// Tiny sizes that exercise every code path in seconds.
    pub fn smoke() -> Self {
        let mut c = Self::bench();
        c.data.n_categories = 3;
        c.data.n_base = Some(1);
        c.data.instances_per_category = 6;
        c.data.views_per_instance = 3;
        c.data.image_size = 16;
        c.backbone = BackboneConfig {
            image_size: 16,
            patch_size: 8,
            d_vision: 16,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            ..BackboneConfig::default()
        };
        c.pretrain.steps = 4;
        c.pretrain.batch_size = 8;
        c.model = ModelConfig {
            d_llm: 16,
            connector_blocks: 1,
            connector_heads: 2,
            connector_mlp_ratio: 2,
            visual_hidden: 16,
            seqmodel: SequenceModelConfig {
                n_layers: 1,
                n_heads: 2,
                mlp_ratio: 2,
                ..SequenceModelConfig::default()
            },
        };
        c.batch_size = 8;
        c.epochs = 1;
        c.steps_per_epoch = Some(2);
        c.k = 4;
        c.n = 2;
        c.m = 2;
        c.eval.k = 4;
        c.eval.verification_pairs = 40;
        c.eval.folds = 2;
        c
    }

    /// Sets the master seed and the corpus and pretraining seeds derived from it.
    pub fn with_seed(mut self, s: u64) -> Self {
        self.seed = s;
        self.data.seed = seed::derive(s, "data", 0);
        self.pretrain.seed = seed::derive(s, "pretrain", 0);
        self
    }

    /// Applies `VICP_SEED` when it is set.
    pub fn apply_env(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let s = v
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(self.with_seed(s))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn triplets_per_step(&self) -> usize {
        self.triplets.unwrap_or((self.batch_size / 4).max(1))
    }

    pub fn total_steps(&self, base_images: usize) -> usize {
        let per_epoch = self
            .steps_per_epoch
            .unwrap_or_else(|| base_images.div_ceil(3 * self.triplets_per_step()).max(1));
        self.epochs * per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == Some(0) || self.triplets == Some(0) {
            return bad("batch_size, epochs, steps_per_epoch and triplets must be positive");
        }
        if self.k == 0 || self.k > 4096 {
            return bad("K must be in 1..=4096");
        }
        if self.n == 0 || self.n > self.backbone.n_tokens() {
            return bad("N must be in 1..=number of backbone tokens");
        }
        if self.m == 0 || self.m > 256 {
            return bad("M must be in 1..=256");
        }
        if self.eval.k == 0 || self.eval.folds < 2 {
            return bad("eval needs K ≥ 1 and at least 2 folds");
        }
        self.loss.validate()?;
        self.data.validate()?;
        self.backbone.validate()?;
        if self.data.image_size != self.backbone.image_size {
            return bad("data.image_size must equal backbone.image_size");
        }
        if self.model.d_llm % self.model.connector_heads != 0 || self.model.d_llm % self.model.seqmodel.n_heads != 0 {
            return bad("d_llm must be divisible by the connector and sequence-model head counts");
        }
        if self.backbone.d_vision % self.model.connector_heads != 0 {
            return bad("d_vision must be divisible by connector_heads");
        }
        Ok(())
    }

    pub fn promptgen(&self) -> PromptGenConfig {
        PromptGenConfig {
            m: self.m,
            visual_hidden: self.model.visual_hidden,
            connector: ConnectorConfig {
                n_queries: self.n,
                n_blocks: self.model.connector_blocks,
                n_heads: self.model.connector_heads,
                mlp_ratio: self.model.connector_mlp_ratio,
                d_llm: self.model.d_llm,
            },
            seqmodel: self.model.seqmodel.clone(),
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// SHA-256 of the canonical JSON form, with defaulted fields resolved.
    pub fn fingerprint(&self) -> String {
        let mut resolved = self.clone();
        resolved.triplets = Some(self.triplets_per_step());
        let json = serde_json::to_vec(&resolved).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }
}

/// Which parameter groups a variant may change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub frozen: Vec<Group>,
    pub trainable: Vec<Group>,
}

impl ParameterPartition {
    pub fn for_variant(v: Variant) -> Self {
        let trainable = match v {
            Variant::Frozen => vec![],
            Variant::StaticPrompt => vec![Group::StaticPrompt],
            Variant::Icl | Variant::Full => vec![
                Group::Connector,
                Group::LabelEmbedding,
                Group::PromptTokens,
                Group::LabelHead,
                Group::VisualHead,
            ],
        };
        let frozen = Group::ALL.iter().copied().filter(|g| !trainable.contains(g)).collect();
        Self { frozen, trainable }
    }

    pub fn is_trainable(&self, g: Group) -> bool {
        self.trainable.contains(&g)
    }

    /// Every parameter in the store falls in exactly one set.
    pub fn covers(&self, store: &ParamStore) -> bool {
        store
            .ids()
            .all(|id| self.frozen.contains(&store.group(id)) != self.trainable.contains(&store.group(id)))
    }
}

/// A frozen backbone together with the pretraining readout.
#[derive(Clone, Debug)]
pub struct PretrainedBackbone {
    pub store: ParamStore,
    pub backbone: Backbone,
    /// `None` when the backbone was restored from a checkpoint.
    pub report: Option<PretrainReport>,
}

impl PretrainedBackbone {
    /// Extracts the backbone parameters of a loaded model.
    pub fn from_model(model: &Model) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng_for(model.config.seed, "init_backbone", 0);
        let backbone = Backbone::new(&mut store, &mut rng, model.config.backbone.clone())?;
        for id in store.ids_in(Group::Backbone) {
            let src = model
                .store
                .find(store.name(id))
                .ok_or_else(|| Error::Integrity(format!("model has no backbone tensor {}", store.name(id))))?;
            store.load_value(id, model.store.get(src).clone())?;
        }
        store.set_frozen(Group::Backbone, true);
        store.set_frozen(Group::PretrainHead, true);
        Ok(Self {
            store,
            backbone,
            report: None,
        })
    }
}

/// Builds and pretrains the backbone on the base categories of `corpus`.
pub fn pretrain(config: &TrainConfig, corpus: &Corpus) -> Result<PretrainedBackbone> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = seed::rng_for(config.seed, "init_backbone", 0);
    let backbone = Backbone::new(&mut store, &mut rng, config.backbone.clone())?;
    let report = pretrain_backbone(&mut store, &backbone, corpus, &corpus.manifest.splits.base, &config.pretrain)?;
    Ok(PretrainedBackbone {
        store,
        backbone,
        report: Some(report),
    })
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub generator: Option<PromptGenerator>,
    pub static_prompt: Option<ParamId>,
}

impl Model {
    /// Adds the variant's components on top of a pretrained backbone.
    pub fn new(config: TrainConfig, pretrained: &PretrainedBackbone) -> Result<Self> {
        config.validate()?;
        if pretrained.backbone.config != config.backbone {
            return Err(Error::Config("pretrained backbone does not match the configured backbone".into()));
        }
        let mut store = pretrained.store.clone();
        let (generator, static_prompt) = Self::components(&config, &mut store)?;
        Ok(Self {
            config,
            store,
            backbone: pretrained.backbone.clone(),
            generator,
            static_prompt,
        })
    }

    fn components(config: &TrainConfig, store: &mut ParamStore) -> Result<(Option<PromptGenerator>, Option<ParamId>)> {
        let d = config.backbone.d_vision;
        let generator = if config.variant.uses_generator() {
            let mut rng = seed::rng_for(config.seed, "init_promptgen", 0);
            Some(PromptGenerator::new(store, &mut rng, config.promptgen(), d)?)
        } else {
            None
        };
        let static_prompt = if config.variant == Variant::StaticPrompt {
            let mut rng = seed::rng_for(config.seed, "init_static_prompt", 0);
            Some(store.add("static_prompt", Group::StaticPrompt, normal_init(&mut rng, config.m, d, 1.0)))
        } else {
            None
        };
        Ok((generator, static_prompt))
    }

    pub fn partition(&self) -> ParameterPartition {
        ParameterPartition::for_variant(self.config.variant)
    }

    /// Snapshots of every group, for before/after comparisons.
    pub fn snapshot(&self) -> BTreeMap<Group, BTreeMap<String, Tensor>> {
        Group::ALL.iter().map(|&g| (g, self.store.snapshot(g))).collect()
    }

    pub fn fingerprints(&self) -> BTreeMap<Group, String> {
        Group::ALL.iter().map(|&g| (g, self.store.fingerprint(g))).collect()
    }

    fn static_tokens(&self) -> Option<Tensor> {
        self.static_prompt.map(|id| self.store.get(id).clone())
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub log: Vec<StepLog>,
    pub checkpoint: Option<PathBuf>,
}

/// Where a run writes logs and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunDir {
    pub dir: Option<PathBuf>,
}

impl RunDir {
    pub fn none() -> Self {
        Self { dir: None }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }
}

/// Trains the trainable partition of `model` on the base categories of `corpus`.
/// A checkpoint is written to `<dir>/checkpoint` after every epoch; a
/// non-finite loss aborts the run and leaves the previous checkpoint in place.
pub fn train(model: &mut Model, corpus: &Corpus, run: &RunDir) -> Result<TrainOutcome> {
    let config = model.config.clone();
    config.validate()?;
    let seqmodel_ok = model.generator.is_none() || model.store.group_frozen(Group::SequenceModel);
    if !model.store.group_frozen(Group::Backbone) || !seqmodel_ok {
        return Err(Error::Protocol("training requires a frozen backbone and sequence model".into()));
    }
    let manifest = &corpus.manifest;
    let base = manifest.splits.base.clone();
    if base.is_empty() {
        return Err(Error::Protocol("manifest has no base categories".into()));
    }
    let base_records: Vec<RecordRef> = base
        .iter()
        .map(|&c| manifest.records_of(c))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let total_steps = config.total_steps(base_records.len());
    let mut log = match &run.dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            LossLog::to_file(&d.join("train_log.jsonl"))?
        }
        None => LossLog::in_memory(),
    };
    if config.variant == Variant::Frozen {
        let checkpoint = match &run.dir {
            Some(d) => Some(save_checkpoint(model, &d.join("checkpoint"), None)?),
            None => None,
        };
        return Ok(TrainOutcome {
            steps: 0,
            log: vec![],
            checkpoint,
        });
    }
    let tokens = if config.variant.uses_generator() {
        Some(TokenCache::build(&model.backbone, &model.store, corpus, &base_records, 64)?)
    } else {
        None
    };
    let partition = model.partition();
    let steps_per_epoch = total_steps / config.epochs;
    let mut opt = AdamW::new(config.optimizer());
    let mut checkpoint = None;
    for step in 0..total_steps {
        let mut rng = seed::rng_for(config.seed, "train_step", step as u64);
        let category = base[rng.random_range(0..base.len())];
        let entry = match train_step(model, corpus, tokens.as_ref(), category, step, &mut rng) {
            Err(Error::Numeric { component, reason }) => {
                log.flush()?;
                return Err(Error::Numeric {
                    component,
                    reason: format!("{reason} at step {step}"),
                });
            }
            r => r?,
        };
        if let Some((id, _)) = entry.grads.iter().find(|(id, _)| !partition.is_trainable(model.store.group(*id))) {
            return Err(Error::Frozen(model.store.name(*id).to_string()));
        }
        let updates: Vec<(ParamId, &Tensor)> = entry.grads.iter().map(|(id, t)| (*id, t)).collect();
        opt.step(&mut model.store, &updates)?;
        log.push(entry.log)?;
        if (step + 1) % steps_per_epoch == 0 {
            log.flush()?;
            if let Some(d) = &run.dir {
                checkpoint = Some(save_checkpoint(model, &d.join("checkpoint"), None)?);
            }
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        steps: total_steps,
        log: log.entries,
        checkpoint,
    })
}

struct StepResult {
    log: StepLog,
    grads: Vec<(ParamId, Tensor)>,
}

fn rows_of(m: &Mat, idx: impl Iterator<Item = usize>) -> Mat {
    let idx: Vec<usize> = idx.collect();
    let mut out = Mat::zeros(idx.len(), m.cols);
    for (r, &i) in idx.iter().enumerate() {
        out.data[r * m.cols..(r + 1) * m.cols].copy_from_slice(m.row(i));
    }
    out
}

fn scatter_rows(dst: &mut Mat, src: &Mat, idx: impl Iterator<Item = usize>, scale: f64) {
    for (r, i) in idx.enumerate() {
        for c in 0..src.cols {
            dst.data[i * dst.cols + c] += scale * src.get(r, c);
        }
    }
}

fn train_step(
    model: &Model,
    corpus: &Corpus,
    tokens: Option<&TokenCache>,
    category: u32,
    step: usize,
    rng: &mut impl Rng,
) -> Result<StepResult> {
    let config = &model.config;
    let manifest = &corpus.manifest;
    if !manifest.is_base(category) {
        return Err(Error::Protocol(format!("category {category} is not a base category")));
    }
    let store = &model.store;
    let step_seed = seed::derive(config.seed, "episode", step as u64);
    let b = config.triplets_per_step();
    let triplets = sample_triplets(manifest, category, b, step_seed)?;
    let mut g = Graph::new();
    let mut icl = None;
    let prompt = match (config.variant, &model.generator, model.static_prompt) {
        (Variant::StaticPrompt, _, Some(sp)) => g.param(store, sp),
        (Variant::Icl | Variant::Full, Some(gen), _) => {
            let support = sample_support_set(manifest, category, config.k, step_seed)?;
            let mut order_rng = seed::rng_for(step_seed, "pair_order", 0);
            let order = shuffled_indices(support.pairs.len(), &mut order_rng);
            let source = tokens.ok_or_else(|| Error::Protocol("support tokens were not prepared".into()))?;
            let (t, per_image, labels) = gen.support_tokens(&support, source, &order)?;
            let t = g.constant(t);
            let cf = gen.forward_support(&mut g, store, t, per_image, &labels)?;
            icl = Some((cf.icl_logits, labels));
            cf.prompt.ok_or_else(|| Error::Config("prompt generation needs M ≥ 1".into()))?
        }
        _ => return Err(Error::Protocol(format!("variant {:?} has no trainable prompt", config.variant))),
    };
    let mut images: Vec<Image> = Vec::with_capacity(3 * b);
    for t in &triplets {
        for r in [t.anchor, t.positive, t.negative] {
            let img = corpus.image(r)?;
            images.push(if config.flip && rng.random::<bool>() {
                img.flip_horizontal()
            } else {
                img.clone()
            });
        }
    }
    let refs: Vec<&Image> = images.iter().collect();
    let out = model.backbone.forward(&mut g, store, &refs, Some(prompt), PromptVisibility::Attend)?;
    let cls = Mat::from_tensor(g.value(out.cls));
    let (a, p, n) = (
        rows_of(&cls, (0..b).map(|i| 3 * i)),
        rows_of(&cls, (0..b).map(|i| 3 * i + 1)),
        rows_of(&cls, (0..b).map(|i| 3 * i + 2)),
    );
    let id = triplet_loss(&a, &p, &n, config.loss.margin_alpha)?;
    let inv_b = 1.0 / b as f64;
    let l_id = id.value * inv_b;
    let mut dcls = Mat::zeros(cls.rows, cls.cols);
    for (j, gm) in id.grads.iter().enumerate() {
        scatter_rows(&mut dcls, gm, (0..b).map(|i| 3 * i + j), inv_b);
    }
    let mut parents = vec![out.cls];
    let mut grads = vec![Some(dcls.to_tensor())];

    let mut l_icl = 0.0;
    if let Some((logits, labels)) = &icl {
        let ce = label_cross_entropy(&Mat::from_tensor(g.value(*logits)), labels)?;
        let scale = 1.0 / labels.len() as f64;
        l_icl = ce.value * scale;
        let w = config.loss.lambda_icl * scale;
        parents.push(*logits);
        grads.push(Some(ce.grads[0].to_tensor().map(|v| v * w as f32)));
    }

    let mut l_align = 0.0;
    if config.variant == Variant::Full && config.loss.lambda_align > 0.0 {
        let patches = Mat::from_tensor(g.value(out.patches));
        let np = model.backbone.config.n_patches();
        let img = |i: usize| rows_of(&patches, i * np..(i + 1) * np);
        let feats: Vec<Mat> = (0..3 * b).map(img).collect();
        let mut pairs = Vec::with_capacity(2 * b);
        for i in 0..b {
            pairs.push(AlignPair {
                fi: &feats[3 * i],
                fj: &feats[3 * i + 1],
                positive: true,
            });
            pairs.push(AlignPair {
                fi: &feats[3 * i],
                fj: &feats[3 * i + 2],
                positive: false,
            });
        }
        let al = patch_align_loss(&pairs, &config.loss, &config.ipot)?;
        let scale = 1.0 / pairs.len() as f64;
        l_align = al.value * scale;
        let w = config.loss.lambda_align * scale;
        let mut dp = Mat::zeros(patches.rows, patches.cols);
        for (k, (gi, gj)) in al.grads.iter().enumerate() {
            let (i, j) = (3 * (k / 2), 3 * (k / 2) + 1 + k % 2);
            scatter_rows(&mut dp, gi, i * np..(i + 1) * np, w);
            scatter_rows(&mut dp, gj, j * np..(j + 1) * np, w);
        }
        parents.push(out.patches);
        grads.push(Some(dp.to_tensor()));
    }

    let l_total = total_loss(l_id, l_icl, l_align, &config.loss)?;
    let node = g.scalar_op(&parents, l_total as f32, grads)?;
    let grads = g.backward(node)?.params().into_iter().map(|(id, t)| (id, t.clone())).collect();
    Ok(StepResult {
        log: StepLog {
            step,
            category_id: category,
            l_id,
            l_icl,
            l_align,
            l_total,
        },
        grads,
    })
}

/// Embeds novel-category images with the model's prompting scheme.
pub struct ModelEncoder<'a> {
    pub model: &'a Model,
    pub corpus: &'a Corpus,
    pub cache: &'a PromptCache,
    pub tokens: &'a TokenCache,
}

impl ModelEncoder<'_> {
    fn prompt_for(&self, support: &SupportSet) -> Result<Option<VisualPrompt>> {
        let m = self.model;
        match m.config.variant {
            Variant::Frozen => Ok(None),
            Variant::StaticPrompt => Ok(m.static_tokens().map(|tokens| VisualPrompt {
                tokens,
                source: PromptSource {
                    category_id: support.category_id,
                    support_seed: support.seed,
                    checksum: String::new(),
                },
            })),
            Variant::Icl | Variant::Full => {
                let gen = m.generator.as_ref().ok_or_else(|| Error::Protocol("model has no prompt generator".into()))?;
                Ok(Some(self.cache.get_or_generate(gen, &m.store, support, self.tokens)?))
            }
        }
    }
}

impl CategoryEncoder for ModelEncoder<'_> {
    fn embed(&self, support: &SupportSet, records: &[RecordRef]) -> Result<Vec<Vec<f32>>> {
        let prompt = self.prompt_for(support)?;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let imgs: Vec<&Image> = chunk.iter().map(|r| self.corpus.image(*r)).collect::<Result<_>>()?;
            for f in self.model.backbone.encode_batch(&self.model.store, &imgs, prompt.as_ref())? {
                out.push(f.cls_embedding);
            }
        }
        Ok(out)
    }
}

/// Prompt-free tokens of every support-pool image of the novel categories.
pub fn novel_support_tokens(model: &Model, corpus: &Corpus) -> Result<TokenCache> {
    if !model.config.variant.uses_generator() {
        return Ok(TokenCache::default());
    }
    let m = &corpus.manifest;
    let mut records = Vec::new();
    for &c in &m.splits.novel {
        let test: std::collections::BTreeSet<RecordRef> = m.test_records(c)?.into_iter().collect();
        records.extend(m.records_of(c)?.into_iter().filter(|r| !test.contains(r)));
    }
    TokenCache::build(&model.backbone, &model.store, corpus, &records, 64)
}

/// A fresh cache keyed to the model's prompt-generating weights.
pub fn new_prompt_cache(model: &Model) -> PromptCache {
    PromptCache::new(PromptGenerator::fingerprint(&model.store))
}

/// Evaluates the model on every novel category, reusing `cache` for prompts.
pub fn evaluate_with_cache(model: &Model, corpus: &Corpus, eval: &EvalConfig, cache: &PromptCache) -> Result<RetrievalReport> {
    let tokens = novel_support_tokens(model, corpus)?;
    let enc = ModelEncoder {
        model,
        corpus,
        cache,
        tokens: &tokens,
    };
    evaluate_novel(&enc, &corpus.manifest, eval, model.config.variant.label(), &model.config.fingerprint())
}

/// Fills `cache` with the prompt of every novel category's evaluation support
/// set; returns how many prompts were newly generated.
pub fn generate_novel_prompts(model: &Model, corpus: &Corpus, eval: &EvalConfig, cache: &PromptCache) -> Result<usize> {
    let gen = model
        .generator
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("variant {} has no prompt generator", model.config.variant.label())))?;
    let tokens = novel_support_tokens(model, corpus)?;
    let before = cache.generated_count();
    for &c in &corpus.manifest.splits.novel {
        let support = sample_support_set(&corpus.manifest, c, eval.k, eval.support_seed)?;
        cache.get_or_generate(gen, &model.store, &support, &tokens)?;
    }
    Ok(cache.generated_count() - before)
}

pub fn evaluate(model: &Model, corpus: &Corpus, eval: &EvalConfig) -> Result<RetrievalReport> {
    evaluate_with_cache(model, corpus, eval, &new_prompt_cache(model))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
    /// Offset in f32 elements into `tensors.bin`.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ComponentManifest {
    schema_version: u32,
    frozen: bool,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    variant: Variant,
    frozen_groups: Vec<Group>,
    group_fingerprints: BTreeMap<Group, String>,
}

/// Directory and contained groups of each checkpoint component.
const COMPONENTS: [(&str, &[Group]); 4] = [
    ("backbone", &[Group::Backbone]),
    ("seqmodel", &[Group::SequenceModel]),
    ("connector", &[Group::Connector, Group::LabelEmbedding]),
    (
        "heads",
        &[Group::PromptTokens, Group::LabelHead, Group::VisualHead, Group::StaticPrompt],
    ),
];

fn write_component(store: &ParamStore, groups: &[Group], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut h = Sha256::new();
    for &grp in groups {
        h.update(store.fingerprint(grp).as_bytes());
        for id in store.ids_in(grp) {
            let t = store.get(id);
            tensors.push(TensorEntry {
                name: store.name(id).to_string(),
                group: grp,
                rows: t.rows(),
                cols: t.cols(),
                offset: bytes.len() / 4,
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let frozen = groups.iter().all(|&g| store.group_frozen(g));
    let man = ComponentManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        frozen,
        fingerprint: hex::encode(h.finalize()),
        tensors,
    };
    let bin = dir.join("tensors.bin");
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let mp = dir.join("manifest.json");
    fs::write(&mp, serde_json::to_vec_pretty(&man)?).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

fn read_component(store: &mut ParamStore, dir: &Path) -> Result<()> {
    let mp = dir.join("manifest.json");
    let man: ComponentManifest = serde_json::from_slice(&fs::read(&mp).map_err(|e| Error::io(&mp, e))?)?;
    if man.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "{} has schema version {}, expected {CHECKPOINT_SCHEMA_VERSION}",
            mp.display(),
            man.schema_version
        )));
    }
    let bin = dir.join("tensors.bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    for t in &man.tensors {
        let id = store
            .find(&t.name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint tensor {} has no matching parameter", t.name)))?;
        if store.group(id) != t.group {
            return Err(Error::Integrity(format!("tensor {} changed group", t.name)));
        }
        let (start, len) = (t.offset * 4, t.rows * t.cols * 4);
        let raw = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::Integrity(format!("{} is truncated", bin.display())))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.load_value(id, Tensor::from_vec(t.rows, t.cols, data)?)?;
    }
    Ok(())
}

/// Writes `{backbone, seqmodel, connector, heads, prompts_cache, config_snapshot}`
/// under `dir`, replacing any previous checkpoint only once the new one is complete.
pub fn save_checkpoint(model: &Model, dir: &Path, cache: Option<&PromptCache>) -> Result<PathBuf> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    for (name, groups) in COMPONENTS {
        write_component(&model.store, groups, &tmp.join(name))?;
    }
    let pc = tmp.join("prompts_cache");
    match cache {
        Some(c) => c.persist(&pc)?,
        None => fs::create_dir_all(&pc).map_err(|e| Error::io(&pc, e))?,
    }
    let mut snapshot = model.config.clone();
    snapshot.triplets = Some(snapshot.triplets_per_step());
    let sp = tmp.join("config_snapshot.json");
    fs::write(&sp, serde_json::to_vec_pretty(&snapshot)?).map_err(|e| Error::io(&sp, e))?;
    let man = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        variant: model.config.variant,
        frozen_groups: Group::ALL.iter().copied().filter(|&g| model.store.group_frozen(g) && !model.store.ids_in(g).is_empty()).collect(),
        group_fingerprints: model.fingerprints(),
    };
    let mp = tmp.join("checkpoint.json");
    fs::write(&mp, serde_json::to_vec_pretty(&man)?).map_err(|e| Error::io(&mp, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Rebuilds a model from a checkpoint directory and verifies every group fingerprint.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let sp = dir.join("config_snapshot.json");
    let config: TrainConfig = serde_json::from_slice(&fs::read(&sp).map_err(|e| Error::io(&sp, e))?)?;
    config.validate()?;
    let mp = dir.join("checkpoint.json");
    let man: CheckpointManifest = serde_json::from_slice(&fs::read(&mp).map_err(|e| Error::io(&mp, e))?)?;
    if man.variant != config.variant {
        return Err(Error::Integrity("checkpoint variant differs from its config snapshot".into()));
    }
    let mut store = ParamStore::new();
    let mut rng = seed::rng_for(config.seed, "init_backbone", 0);
    let backbone = Backbone::new(&mut store, &mut rng, config.backbone.clone())?;
    let (generator, static_prompt) = Model::components(&config, &mut store)?;
    for (name, _) in COMPONENTS {
        read_component(&mut store, &dir.join(name))?;
    }
    for g in Group::ALL {
        store.set_frozen(g, man.frozen_groups.contains(&g));
    }
    for g in Group::ALL {
        if g == Group::PretrainHead {
            continue;
        }
        let expected = man.group_fingerprints.get(&g);
        if expected != Some(&store.fingerprint(g)) {
            return Err(Error::Integrity(format!("group {} does not match its recorded fingerprint", g.name())));
        }
    }
    Ok(Model {
        config,
        store,
        backbone,
        generator,
        static_prompt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Components,
    K,
    N,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "components" | "component" => Ok(Self::Components),
            "k" => Ok(Self::K),
            "n" => Ok(Self::N),
            other => Err(Error::Usage(format!("unknown ablation axis {other:?}; expected components, K or N"))),
        }
    }
}

impl AblationAxis {
    pub const K_VALUES: [usize; 3] = [32, 64, 128];
    pub const N_VALUES: [usize; 3] = [16, 32, 64];

    /// `(label, config)` for each cell; all cells share the base config otherwise.
    pub fn cells(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            AblationAxis::Components => Variant::COMPONENT_ROWS
                .iter()
                .map(|&v| {
                    let mut c = base.clone();
                    c.variant = v;
                    (v.label().to_string(), c)
                })
                .collect(),
            AblationAxis::K => Self::K_VALUES
                .iter()
                .map(|&k| {
                    let mut c = base.clone();
                    c.k = k;
                    c.eval.k = k;
                    (format!("K={k}"), c)
                })
                .collect(),
            AblationAxis::N => Self::N_VALUES
                .iter()
                .map(|&n| {
                    let mut c = base.clone();
                    c.n = n;
                    (format!("N={n}"), c)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub corpus_fingerprint: String,
    pub report: RetrievalReport,
}

/// Trains and evaluates one cell per axis value from a shared pretrained backbone.
pub fn run_ablation(base: &TrainConfig, corpus: &Corpus, pretrained: &PretrainedBackbone, axis: AblationAxis) -> Result<Vec<AblationCell>> {
    let fp = corpus.manifest.fingerprint();
    axis.cells(base)
        .into_iter()
        .map(|(label, cfg)| {
            let eval = cfg.eval.clone();
            let mut model = Model::new(cfg, pretrained)?;
            train(&mut model, corpus, &RunDir::none())?;
            let report = evaluate(&model, corpus, &eval)?;
            Ok(AblationCell {
                label,
                corpus_fingerprint: fp.clone(),
                report,
            })
        })
        .collect()
}

pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut s = String::new();
    let w = cells.iter().map(|c| c.label.len()).max().unwrap_or(4).max(4);
    let _ = writeln!(s, "{:<w$} {:>7} {:>7} {:>7} {:>7} {:>7}", "cell", "mAP", "Rank-1", "Rank-5", "AUC", "ACC");
    for c in cells {
        let m = &c.report.mean;
        let _ = writeln!(
            s,
            "{:<w$} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            c.label,
            100.0 * m.map,
            100.0 * m.rank1,
            100.0 * m.rank5,
            100.0 * m.auc,
            100.0 * m.acc
        );
    }
    s
}
