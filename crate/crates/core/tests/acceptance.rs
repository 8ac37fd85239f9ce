//! Acceptance report: one PASS/FAIL line per criterion and a summary line.
//!
//! Runs without the libtest harness so the lines are always printed. Set
//! `VICP_ACCEPTANCE_STRICT=1` to turn any failing criterion into a non-zero
//! exit status. The
//! end-to-end benchmark dominates the runtime (several minutes per seed on one
//! core); the other criteria finish in seconds.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use vicp::backbone::TokenCache;
use vicp::connector::{build_context, LatentTokens};
use vicp::losses::{label_cross_entropy, label_head_loss, patch_align_loss, triplet_loss, AlignMode, AlignPair, LossWeights};
use vicp::ot::{cost_matrix, ipot, ot_bruteforce, ot_distance, sinkhorn_cost, IpotParams, Mat};
use vicp::params::{Group, ParamStore};
use vicp::pipeline::*;
use vicp::promptgen::{PromptCache, PromptGenerator};
use vicp::reid_eval::{auc, map_oracle, mean_average_precision, RetrievalReport};
use vicp::seed;
use vicp::synthdata::{generate_corpus, sample_support_set, Corpus, Image};
use vicp::tensor::Tensor;

const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

fn unit_rows(mut m: Mat) -> Mat {
    for r in 0..m.rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..m.cols {
            m.data[r * m.cols + c] /= n;
        }
    }
    m
}

/// `max |analytic − numeric| / max |numeric|` with central differences.
fn relative_error(analytic: &Mat, x: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..x.data.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data[i] += h;
        minus.data[i] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        worst = worst.max((analytic.data[i] - numeric).abs());
        scale = scale.max(numeric.abs());
    }
    worst / scale.max(1e-12)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Mean-cost gap between the best and second-best assignment of a square cost.
fn assignment_gap(c: &Mat) -> f64 {
    let mut costs: Vec<f64> = permutations(c.rows)
        .iter()
        .map(|p| p.iter().enumerate().map(|(u, &v)| c.get(u, v)).sum::<f64>() / c.rows as f64)
        .collect();
    costs.sort_by(f64::total_cmp);
    costs[1] - costs[0]
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = seed::rng(101);
    let (mut ipot_err, mut sink_err): (f64, f64) = (0.0, 0.0);
    let mut count = 0;
    for n in 2..=5 {
        for _ in 0..50 {
            let fi = gaussian(&mut rng, n, 8);
            let fj = gaussian(&mut rng, n, 8);
            let exact = ot_bruteforce(&fi, &fj).unwrap();
            let d = ot_distance(&fi, &fj, &IpotParams::tight()).unwrap().distance;
            let s = sinkhorn_cost(&fi, &fj, 0.01, 5000).unwrap();
            ipot_err = ipot_err.max((d - exact).abs());
            sink_err = sink_err.max((s - exact).abs());
            count += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        ipot_err <= 1e-3 && sink_err <= 5e-3 && secs < 30.0,
        format!("{count} instances, max |ipot - exact| = {ipot_err:.2e}, max |sinkhorn - exact| = {sink_err:.2e}, {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = seed::rng(202);
    let mut marg: f64 = 0.0;
    let mut self_dist: f64 = 0.0;
    for trial in 0..200 {
        let n = rng.random_range(2..=16);
        let m = rng.random_range(2..=16);
        let params = if trial % 2 == 0 { IpotParams::default() } else { IpotParams::tight() };
        let c = cost_matrix(&gaussian(&mut rng, n, 8), &gaussian(&mut rng, m, 8)).unwrap();
        marg = marg.max(ipot(&c, &params).unwrap().marginal_error());
        let f = gaussian(&mut rng, n, 8);
        let r = ot_distance(&f, &f, &params).unwrap();
        marg = marg.max(r.plan.marginal_error());
        let tight = ot_distance(&f, &f, &IpotParams::tight()).unwrap();
        self_dist = self_dist.max(tight.distance);
    }
    outcome(
        marg <= 1e-4 && self_dist <= 1e-6,
        format!("200 default and tight plans, max marginal error {marg:.2e}; max D(F, F) at tight settings {self_dist:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let (mut trip, mut icl, mut align): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let seeds = 20;
    for s in 0..seeds {
        let mut rng = seed::rng_for(303, "gradcheck", s);
        // triplet: resample until no hinge lies within 1e-3 of its kink
        let (a, p, n) = loop {
            let a = unit_rows(gaussian(&mut rng, 4, 6));
            let p = unit_rows(gaussian(&mut rng, 4, 6));
            let n = unit_rows(gaussian(&mut rng, 4, 6));
            let kink = (0..4).any(|i| {
                let dp: f64 = a.row(i).iter().zip(p.row(i)).map(|(x, y)| x * y).sum();
                let dn: f64 = a.row(i).iter().zip(n.row(i)).map(|(x, y)| x * y).sum();
                (0.3 - dp + dn).abs() < 1e-3
            });
            if !kink {
                break (a, p, n);
            }
        };
        let g = triplet_loss(&a, &p, &n, 0.3).unwrap();
        trip = trip.max(relative_error(&g.grads[0], &a, 1e-6, |x| triplet_loss(x, &p, &n, 0.3).unwrap().value));
        trip = trip.max(relative_error(&g.grads[1], &p, 1e-6, |x| triplet_loss(&a, x, &n, 0.3).unwrap().value));
        trip = trip.max(relative_error(&g.grads[2], &n, 1e-6, |x| triplet_loss(&a, &p, x, 0.3).unwrap().value));

        let h = gaussian(&mut rng, 6, 5);
        let w = gaussian(&mut rng, 5, 2);
        let b = gaussian(&mut rng, 1, 2);
        let labels: Vec<bool> = (0..6).map(|_| rng.random()).collect();
        let g = label_head_loss(&h, &w, &b, &labels).unwrap();
        icl = icl.max(relative_error(&g.grads[0], &h, 1e-6, |x| label_head_loss(x, &w, &b, &labels).unwrap().value));
        icl = icl.max(relative_error(&g.grads[1], &w, 1e-6, |x| label_head_loss(&h, x, &b, &labels).unwrap().value));
        icl = icl.max(relative_error(&g.grads[2], &b, 1e-6, |x| label_head_loss(&h, &w, x, &labels).unwrap().value));

        let weights = LossWeights {
            align_mode: AlignMode::Literal,
            ..LossWeights::default()
        };
        let tight = IpotParams::tight();
        // OT is non-differentiable where two assignments tie; resample near ties
        let (fi, fj) = loop {
            let fi = gaussian(&mut rng, 4, 6);
            let fj = gaussian(&mut rng, 4, 6);
            if assignment_gap(&cost_matrix(&fi, &fj).unwrap()) > 1e-3 {
                break (fi, fj);
            }
        };
        let positive = s % 2 == 0;
        let loss = |x: &Mat, y: &Mat| {
            patch_align_loss(&[AlignPair { fi: x, fj: y, positive }], &weights, &tight).unwrap().value
        };
        let out = patch_align_loss(&[AlignPair { fi: &fi, fj: &fj, positive }], &weights, &tight).unwrap();
        let (gi, gj) = &out.grads[0];
        align = align.max(relative_error(gi, &fi, 1e-5, |x| loss(x, &fj)));
        align = align.max(relative_error(gj, &fj, 1e-5, |y| loss(&fi, y)));
    }
    outcome(
        trip <= 1e-4 && icl <= 1e-4 && align <= 1e-3,
        format!("{seeds} seeds, relative error triplet {trip:.1e}, icl {icl:.1e}, align {align:.1e}"),
    )
}

fn smoke_generator() -> (ParamStore, PromptGenerator) {
    let cfg = TrainConfig::smoke();
    let mut store = ParamStore::new();
    let mut rng = seed::rng(404);
    let gen = PromptGenerator::new(&mut store, &mut rng, cfg.promptgen(), cfg.backbone.d_vision).unwrap();
    (store, gen)
}

fn criterion_4() -> Outcome {
    let (store, gen) = smoke_generator();
    let mut rng = seed::rng(405);
    let d = gen.config.connector.d_llm;
    let n = gen.config.connector.n_queries;
    let k = 6;
    let latents: Vec<LatentTokens> = (0..2 * k)
        .map(|_| LatentTokens {
            tokens: Tensor::from_vec(n, d, (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap(),
        })
        .collect();
    let labels: Vec<bool> = (0..k).map(|i| i % 2 == 0).collect();
    let pairs: Vec<_> = (0..k).map(|p| (&latents[2 * p], &latents[2 * p + 1], labels[p])).collect();
    let table = Tensor::from_vec(2, d, (0..2 * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap();
    let mut seq = build_context(&pairs, gen.config.m, &table).unwrap();
    gen.fill_prompt_slots(&store, &mut seq).unwrap();
    let hidden = gen.forward_context(&store, &seq).unwrap();
    let base = gen.icl_loss(&store, &seq, &hidden).unwrap();

    // unsupervised next-token targets: every hidden row that feeds no label prediction
    let supervised = seq.supervision();
    let mut mutated_hidden = hidden.clone();
    for (r, s) in supervised.iter().enumerate() {
        if s.is_none() {
            mutated_hidden.row_mut(r).iter_mut().for_each(|v| *v = rng.sample::<f32, _>(StandardNormal) * 10.0);
        }
    }
    let hidden_ok = gen.icl_loss(&store, &seq, &mutated_hidden).unwrap().to_bits() == base.to_bits();

    // rows after the last prediction position (the final label row and the prompt slots)
    let mut late = seq.clone();
    let last_pred = seq.label_positions.last().unwrap() - 1;
    for r in last_pred + 1..seq.tokens.rows() {
        late.tokens.row_mut(r).iter_mut().for_each(|v| *v += 3.0);
    }
    let late_hidden = gen.forward_context(&store, &late).unwrap();
    let late_ok = gen.icl_loss(&store, &late, &late_hidden).unwrap().to_bits() == base.to_bits();

    let mut uniform_err: f64 = 0.0;
    for k in [1usize, 16, 64] {
        let ce = label_cross_entropy(&Mat::zeros(k, 2), &vec![true; k]).unwrap();
        uniform_err = uniform_err.max((ce.value - k as f64 * std::f64::consts::LN_2).abs());
        let zero_w = Mat::zeros(d, 2);
        let zero_b = Mat::zeros(1, 2);
        let labels: Vec<bool> = (0..k).map(|i| i % 3 == 0).collect();
        let v = label_head_loss(&gaussian(&mut rng, k, d), &zero_w, &zero_b, &labels).unwrap().value;
        uniform_err = uniform_err.max((v - k as f64 * std::f64::consts::LN_2).abs());
    }
    outcome(
        hidden_ok && late_ok && uniform_err <= 1e-6,
        format!("unsupervised rows bit-equal {hidden_ok}, non-predictive inputs bit-equal {late_ok}, |uniform - K ln 2| = {uniform_err:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = seed::rng(606);
    let d = 3;
    let table = Tensor::zeros(2, d);
    let mut bad = Vec::new();
    for _ in 0..50 {
        let n = rng.random_range(1..=40);
        let k = rng.random_range(1..=70);
        let m = rng.random_range(0..=20);
        let lat = LatentTokens {
            tokens: Tensor::zeros(n, d),
        };
        let pairs: Vec<_> = (0..k).map(|p| (&lat, &lat, p % 2 == 0)).collect();
        let seq = build_context(&pairs, m, &table).unwrap();
        let expect = 2 * n * k + k + m;
        if seq.tokens.rows() != expect || seq.layout.len() != expect || seq.label_positions.len() != k {
            bad.push((n, k, m));
        }
    }
    outcome(bad.is_empty(), format!("50 configurations, mismatches {bad:?}"))
}

fn criterion_8() -> Outcome {
    let mut rng = seed::rng(808);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let q = rng.random_range(1..=10);
        let g = rng.random_range(1..=10);
        // coarse score grid so ties are common
        let scores: Vec<Vec<f64>> = (0..q).map(|_| (0..g).map(|_| rng.random_range(0..5) as f64 / 4.0).collect()).collect();
        let relevance: Vec<Vec<bool>> = (0..q)
            .map(|_| {
                let mut r: Vec<bool> = (0..g).map(|_| rng.random_bool(0.4)).collect();
                let j = rng.random_range(0..g);
                r[j] = true;
                r
            })
            .collect();
        let fast = mean_average_precision(&scores, &relevance).unwrap();
        let slow = map_oracle(&scores, &relevance).unwrap();
        if fast.to_bits() != slow.to_bits() {
            mismatches += 1;
        }
    }
    let n = 10_000;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let separated: Vec<f64> = labels.iter().map(|&l| if l { 1.0 + rng.random::<f64>() } else { -rng.random::<f64>() }).collect();
    let random: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let auc_sep = auc(&separated, &labels).unwrap();
    let auc_rand = auc(&random, &labels).unwrap();
    outcome(
        mismatches == 0 && auc_sep == 1.0 && (auc_rand - 0.5).abs() <= 0.02,
        format!("1000 matrices, {mismatches} mismatches; AUC separated {auc_sep:.4}, label-independent {auc_rand:.4}"),
    )
}

struct BenchRun {
    seed: u64,
    map: BTreeMap<&'static str, f64>,
    secs: f64,
}

/// Model, corpus and per-group parameter snapshots from the seed-0 full run.
struct Retained {
    model: Model,
    corpus: Corpus,
    before: BTreeMap<Group, BTreeMap<String, Tensor>>,
}

fn bench_seed(s: u64, retain: bool) -> (BenchRun, Option<Retained>) {
    let t = Instant::now();
    let cfg = TrainConfig::bench().with_seed(s);
    let corpus = generate_corpus(&cfg.data).unwrap();
    let pre = pretrain(&cfg, &corpus).unwrap();
    let mut map = BTreeMap::new();
    let mut kept = None;
    for v in Variant::COMPONENT_ROWS {
        let mut c = cfg.clone();
        c.variant = v;
        let mut model = Model::new(c.clone(), &pre).unwrap();
        let before = model.snapshot();
        train(&mut model, &corpus, &RunDir::none()).unwrap();
        let report = evaluate(&model, &corpus, &c.eval).unwrap();
        println!("    seed {s} {:<20} mAP {:5.2}  Rank-1 {:5.2}  AUC {:5.2}", v.label(), 100.0 * report.mean.map, 100.0 * report.mean.rank1, 100.0 * report.mean.auc);
        map.insert(v.label(), 100.0 * report.mean.map);
        if retain && v == Variant::Full {
            kept = Some(Retained {
                model,
                corpus: corpus.clone(),
                before,
            });
        }
    }
    (
        BenchRun {
            seed: s,
            map,
            secs: t.elapsed().as_secs_f64(),
        },
        kept,
    )
}

fn criterion_5(r: &Retained) -> Outcome {
    let after = r.model.snapshot();
    let partition = r.model.partition();
    let mut unexpected = Vec::new();
    let mut changed = 0;
    for (g, params) in &r.before {
        for (name, t) in params {
            let moved = after[g][name] != *t;
            if moved != partition.is_trainable(*g) {
                unexpected.push(format!("{name} ({}) moved={moved}", g.name()));
            }
            changed += moved as usize;
        }
    }
    let frozen_hashes = r.model.store.group_frozen(Group::Backbone) && r.model.store.group_frozen(Group::SequenceModel);
    outcome(
        unexpected.is_empty() && frozen_hashes,
        format!("{changed} trainable tensors changed, backbone and sequence model unchanged; violations {unexpected:?}"),
    )
}

fn criterion_7(r: &Retained) -> Outcome {
    let m = &r.model;
    let corpus = &r.corpus;
    let eval = &m.config.eval;
    let gen = m.generator.as_ref().unwrap();
    let cache = new_prompt_cache(m);
    let tokens: TokenCache = novel_support_tokens(m, corpus).unwrap();
    let mut equal = true;
    for &c in &corpus.manifest.splits.novel {
        let support = sample_support_set(&corpus.manifest, c, eval.k, eval.support_seed).unwrap();
        cache.get_or_generate(gen, &m.store, &support, &tokens).unwrap();
        let cached = cache.get_or_generate(gen, &m.store, &support, &tokens).unwrap();
        let fresh = gen.generate_prompt(&m.store, &support, &tokens).unwrap();
        let test = corpus.manifest.test_records(c).unwrap();
        let imgs: Vec<&Image> = test.iter().map(|r| corpus.image(*r).unwrap()).collect();
        let a = m.backbone.encode_batch(&m.store, &imgs, Some(&cached)).unwrap();
        let b = m.backbone.encode_batch(&m.store, &imgs, Some(&fresh)).unwrap();
        equal &= a.iter().zip(&b).all(|(x, y)| x.cls_embedding == y.cls_embedding && x.patch_features == y.patch_features);
    }
    let generations = cache.generated_count();
    let dir = tempfile::tempdir().unwrap();
    cache.persist(dir.path()).unwrap();
    let reloaded = PromptCache::load(dir.path(), &PromptGenerator::fingerprint(&m.store)).unwrap();
    let fresh: RetrievalReport = evaluate(m, corpus, eval).unwrap();
    let from_disk = evaluate_with_cache(m, corpus, eval, &reloaded).unwrap();
    let same_report = fresh == from_disk && reloaded.generated_count() == 0;
    outcome(
        equal && same_report && generations == corpus.manifest.splits.novel.len(),
        format!(
            "{} novel categories, cached == fresh encodings {equal}, reloaded cache report identical {same_report}",
            corpus.manifest.splits.novel.len()
        ),
    )
}

fn criterion_9(runs: &[BenchRun]) -> Outcome {
    let mean = |label: &str| runs.iter().map(|r| r.map[label]).sum::<f64>() / runs.len() as f64;
    let frozen = mean(Variant::Frozen.label());
    let triplet = mean(Variant::StaticPrompt.label());
    let icl = mean(Variant::Icl.label());
    let full = mean(Variant::Full.label());
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    outcome(
        frozen + 10.0 <= triplet && full >= triplet + 2.0 && secs <= BENCH_BUDGET_SECS,
        format!(
            "seeds {seeds:?}, mean mAP [i] {frozen:.2}, [ii] {triplet:.2}, [iv] {icl:.2}, [vi] {full:.2}; \
             [ii]-[i] = {:+.2} (need >= 10), [vi]-[ii] = {:+.2} (need >= 2), {secs:.0}s (budget {BENCH_BUDGET_SECS:.0}s)",
            triplet - frozen,
            full - triplet
        ),
    )
}

fn criterion_10() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let mut cfg = TrainConfig::bench().with_seed(10);
            cfg.pretrain.steps = 20;
            cfg.epochs = 2;
            cfg.steps_per_epoch = Some(5);
            let corpus = generate_corpus(&cfg.data).unwrap();
            let pre = pretrain(&cfg, &corpus).unwrap();
            let mut model = Model::new(cfg.clone(), &pre).unwrap();
            train(&mut model, &corpus, &RunDir::none()).unwrap();
            evaluate(&model, &corpus, &cfg.eval).unwrap()
        })
    };
    let a = run();
    let b = run();
    let bits = a.to_json() == b.to_json();
    outcome(a == b && bits, format!("two single-threaded train + eval runs, reports bit-identical {}", a == b && bits))
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "OT oracle equivalence", criterion_1());
    report(2, "OT feasibility", criterion_2());
    report(3, "gradient checks", criterion_3());
    report(4, "label-loss masking", criterion_4());
    report(6, "sequence length law", criterion_6());
    report(8, "metric oracle", criterion_8());
    report(10, "determinism", criterion_10());

    let mut runs = Vec::new();
    let mut retained = None;
    for s in BENCH_SEEDS {
        let (run, kept) = bench_seed(s, s == BENCH_SEEDS[0]);
        runs.push(run);
        retained = retained.or(kept);
    }
    let retained = retained.expect("seed-0 full run is retained");
    report(5, "frozen partition", criterion_5(&retained));
    report(7, "prompt-cache equivalence", criterion_7(&retained));
    report(9, "end-to-end benchmark", criterion_9(&runs));

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        if std::env::var_os("VICP_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
