use vicp::params::Group;
use vicp::pipeline::*;
use vicp::promptgen::PromptCache;
use vicp::promptgen::PromptGenerator;
use vicp::synthdata::generate_corpus;

fn setup(variant: Variant) -> (TrainConfig, vicp::synthdata::Corpus, PretrainedBackbone) {
    let mut cfg = TrainConfig::smoke().with_seed(3);
    cfg.variant = variant;
    let corpus = generate_corpus(&cfg.data).unwrap();
    let pre = pretrain(&cfg, &corpus).unwrap();
    (cfg, corpus, pre)
}

#[test]
fn smoke_and_bench_profiles_validate_and_round_trip_through_toml() {
    for cfg in [TrainConfig::smoke(), TrainConfig::bench(), TrainConfig::default()] {
        cfg.validate().unwrap();
        let back: TrainConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }
}

#[test]
fn shipped_config_files_match_the_profiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, profile) in [("default", TrainConfig::default()), ("bench", TrainConfig::bench()), ("smoke", TrainConfig::smoke())] {
        let loaded = TrainConfig::from_file(&dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(loaded, profile, "configs/{name}.toml is stale");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = format!("{}\nnot_a_field = 3\n", TrainConfig::smoke().to_toml());
    assert!(toml::from_str::<TrainConfig>(&text).is_err());
}

#[test]
fn with_seed_derives_data_and_pretrain_seeds() {
    let a = TrainConfig::smoke().with_seed(1);
    let b = TrainConfig::smoke().with_seed(2);
    assert_ne!(a.data.seed, b.data.seed);
    assert_ne!(a.pretrain.seed, b.pretrain.seed);
    assert_eq!(a, TrainConfig::smoke().with_seed(1));
}

#[test]
fn partition_covers_every_group_of_each_variant() {
    for v in [Variant::Frozen, Variant::StaticPrompt, Variant::Icl, Variant::Full] {
        let (cfg, _, pre) = setup(v);
        let m = Model::new(cfg, &pre).unwrap();
        let p = m.partition();
        assert!(p.covers(&m.store), "{v:?}");
        assert!(!p.is_trainable(Group::Backbone));
        assert!(!p.is_trainable(Group::SequenceModel));
    }
}

#[test]
fn training_changes_only_the_trainable_partition() {
    for v in [Variant::StaticPrompt, Variant::Icl, Variant::Full] {
        let (cfg, corpus, pre) = setup(v);
        let mut m = Model::new(cfg, &pre).unwrap();
        let before = m.fingerprints();
        let out = train(&mut m, &corpus, &RunDir::none()).unwrap();
        assert_eq!(out.steps, 2);
        let after = m.fingerprints();
        let p = m.partition();
        for g in Group::ALL {
            if p.is_trainable(g) {
                assert_ne!(before[&g], after[&g], "{v:?}: {} did not move", g.name());
            } else {
                assert_eq!(before[&g], after[&g], "{v:?}: {} moved", g.name());
            }
        }
    }
}

#[test]
fn frozen_variant_trains_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, corpus, pre) = setup(Variant::Frozen);
    let mut m = Model::new(cfg, &pre).unwrap();
    let before = m.fingerprints();
    let out = train(&mut m, &corpus, &RunDir::at(dir.path())).unwrap();
    assert_eq!(out.steps, 0);
    assert!(out.checkpoint.unwrap().join("checkpoint.json").exists());
    assert_eq!(before, m.fingerprints());
}

#[test]
fn unfrozen_backbone_is_refused() {
    let (cfg, corpus, pre) = setup(Variant::StaticPrompt);
    let mut m = Model::new(cfg, &pre).unwrap();
    m.store.set_frozen(Group::Backbone, false);
    let err = train(&mut m, &corpus, &RunDir::none()).unwrap_err();
    assert_eq!(err.kind(), "protocol");
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (cfg, corpus, pre) = setup(Variant::Full);
        let mut m = Model::new(cfg.clone(), &pre).unwrap();
        let out = train(&mut m, &corpus, &RunDir::none()).unwrap();
        let report = evaluate(&m, &corpus, &cfg.eval).unwrap();
        (out.log, m.fingerprints(), report)
    };
    let (la, fa, ra) = run();
    let (lb, fb, rb) = run();
    assert_eq!(la, lb);
    assert_eq!(fa, fb);
    assert_eq!(ra, rb);
}

#[test]
fn train_log_and_checkpoint_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, corpus, pre) = setup(Variant::Full);
    let mut m = Model::new(cfg, &pre).unwrap();
    let out = train(&mut m, &corpus, &RunDir::at(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), out.steps);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["l_total"].as_f64().unwrap().is_finite());
    }
    let ck = out.checkpoint.unwrap();
    for sub in ["backbone", "seqmodel", "connector", "heads", "prompts_cache"] {
        assert!(ck.join(sub).is_dir(), "{sub}");
    }
    assert!(ck.join("config_snapshot.json").exists());
}

#[test]
fn checkpoint_round_trip_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    for v in [Variant::Frozen, Variant::StaticPrompt, Variant::Full] {
        let (cfg, corpus, pre) = setup(v);
        let mut m = Model::new(cfg.clone(), &pre).unwrap();
        train(&mut m, &corpus, &RunDir::none()).unwrap();
        let path = dir.path().join(format!("{v:?}"));
        save_checkpoint(&m, &path, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let saved = |m: &Model| {
            let mut f = m.fingerprints();
            f.remove(&Group::PretrainHead);
            f
        };
        assert_eq!(saved(&loaded), saved(&m));
        assert_eq!(loaded.partition(), m.partition());
        assert_eq!(evaluate(&loaded, &corpus, &cfg.eval).unwrap(), evaluate(&m, &corpus, &cfg.eval).unwrap());
    }
}

#[test]
fn tampered_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _, pre) = setup(Variant::Full);
    let m = Model::new(cfg, &pre).unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&m, &path, None).unwrap();
    let bin = path.join("heads").join("tensors.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[0] ^= 0x40;
    std::fs::write(&bin, bytes).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().kind(), "integrity");
}

#[test]
fn persisted_prompt_cache_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, corpus, pre) = setup(Variant::Full);
    let mut m = Model::new(cfg.clone(), &pre).unwrap();
    train(&mut m, &corpus, &RunDir::none()).unwrap();
    let cache = new_prompt_cache(&m);
    let generated = generate_novel_prompts(&m, &corpus, &cfg.eval, &cache).unwrap();
    assert_eq!(generated, corpus.manifest.splits.novel.len());
    assert_eq!(generate_novel_prompts(&m, &corpus, &cfg.eval, &cache).unwrap(), 0);
    let fresh = evaluate(&m, &corpus, &cfg.eval).unwrap();
    let cached = evaluate_with_cache(&m, &corpus, &cfg.eval, &cache).unwrap();
    assert_eq!(cache.generated_count(), generated);
    cache.persist(dir.path()).unwrap();
    let reloaded = PromptCache::load(dir.path(), &PromptGenerator::fingerprint(&m.store)).unwrap();
    let from_disk = evaluate_with_cache(&m, &corpus, &cfg.eval, &reloaded).unwrap();
    assert_eq!(reloaded.generated_count(), 0);
    assert_eq!(fresh, cached);
    assert_eq!(fresh, from_disk);
}

#[test]
fn pretrained_backbone_survives_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _, pre) = setup(Variant::Frozen);
    let m = Model::new(cfg.clone(), &pre).unwrap();
    save_checkpoint(&m, dir.path(), None).unwrap();
    let restored = PretrainedBackbone::from_model(&load_checkpoint(dir.path()).unwrap()).unwrap();
    assert!(restored.report.is_none());
    assert_eq!(restored.store.fingerprint(Group::Backbone), pre.store.fingerprint(Group::Backbone));
    let mut full = cfg;
    full.variant = Variant::Full;
    let a = Model::new(full.clone(), &pre).unwrap();
    let b = Model::new(full, &restored).unwrap();
    assert_eq!(a.store.fingerprint(Group::Connector), b.store.fingerprint(Group::Connector));
}

#[test]
fn ablation_cells_differ_only_along_their_axis() {
    let base = TrainConfig::smoke();
    let comp = AblationAxis::Components.cells(&base);
    assert_eq!(comp.len(), 4);
    let k = AblationAxis::K.cells(&base);
    assert_eq!(k.iter().map(|(_, c)| c.k).collect::<Vec<_>>(), AblationAxis::K_VALUES);
    for (_, c) in &k {
        let mut same = c.clone();
        same.k = base.k;
        same.eval.k = base.eval.k;
        assert_eq!(same, base);
    }
    assert_eq!("n".parse::<AblationAxis>().unwrap(), AblationAxis::N);
    assert_eq!("depth".parse::<AblationAxis>().unwrap_err().kind(), "usage");
}

#[test]
fn component_ablation_runs_on_a_shared_corpus() {
    let (cfg, corpus, pre) = setup(Variant::Full);
    let cells = run_ablation(&cfg, &corpus, &pre, AblationAxis::Components).unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| c.corpus_fingerprint == corpus.manifest.fingerprint()));
    let table = ablation_table(&cells);
    assert_eq!(table.lines().count(), 5);
}
