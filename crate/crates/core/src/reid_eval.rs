//! Retrieval protocols and metrics.
//!
//! Identification uses every test image of a category as a query against all
//! other test images of that category (mAP, Rank-1, Rank-5). Verification
//! scores balanced same/different pairs by cosine similarity and reports AUC
//! and a 10-fold cross-validated threshold accuracy. Reports aggregate by
//! unweighted category means and also pool all queries.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthdata::{sample_support_set, RecordRef, SplitManifest, SupportSet};

const UNIT_TOL: f32 = 1e-3;

/// Unit-norm embeddings of one category's images.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub category_id: u32,
    pub refs: Vec<RecordRef>,
    pub embeddings: Vec<Vec<f32>>,
}

impl EmbeddingSet {
    pub fn new(category_id: u32, refs: Vec<RecordRef>, embeddings: Vec<Vec<f32>>) -> Result<Self> {
        if refs.len() != embeddings.len() {
            return Err(Error::shape("one embedding per record is required"));
        }
        for (r, e) in refs.iter().zip(&embeddings) {
            if r.category_id != category_id {
                return Err(Error::Protocol(format!(
                    "record {r:?} does not belong to category {category_id}"
                )));
            }
            let n = e.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Normalization(format!("embedding of {r:?} has norm {n}")));
            }
        }
        Ok(Self {
            category_id,
            refs,
            embeddings,
        })
    }

    fn score(&self, a: usize, b: usize) -> f64 {
        self.embeddings[a]
            .iter()
            .zip(&self.embeddings[b])
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum()
    }
}

/// Gallery indices sorted by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Average precision and top-k hit flags for one query.
fn query_metrics(scores: &[f64], relevant: &[bool]) -> Option<(f64, bool, bool)> {
    let n_rel = relevant.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return None;
    }
    let order = ranking(scores);
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    let mut first_hit = usize::MAX;
    for (pos, &g) in order.iter().enumerate() {
        if relevant[g] {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
            first_hit = first_hit.min(pos);
        }
    }
    Some((sum / n_rel as f64, first_hit < 1, first_hit < 5))
}

/// mAP over the rows of a score matrix; every row needs a relevant item.
pub fn mean_average_precision(scores: &[Vec<f64>], relevance: &[Vec<bool>]) -> Result<f64> {
    check_matrix(scores, relevance)?;
    let mut sum = 0.0;
    for (q, (s, r)) in scores.iter().zip(relevance).enumerate() {
        let (ap, _, _) = query_metrics(s, r).ok_or_else(|| Error::Protocol(format!("query {q} has no relevant gallery item")))?;
        sum += ap;
    }
    Ok(sum / scores.len() as f64)
}

fn check_matrix(scores: &[Vec<f64>], relevance: &[Vec<bool>]) -> Result<()> {
    if scores.is_empty() || scores.len() != relevance.len() {
        return Err(Error::shape("score and relevance matrices must have the same non-zero row count"));
    }
    let g = scores[0].len();
    if g == 0 || scores.iter().any(|r| r.len() != g) || relevance.iter().any(|r| r.len() != g) {
        return Err(Error::shape("score and relevance rows must share a non-zero width"));
    }
    Ok(())
}

/// Literal AP: for each rank `k` find the item at that rank by counting the
/// items ahead of it, and if relevant add `(relevant items at ranks ≤ k) / k`.
/// Quadratic in the gallery size; meant as an independent check.
pub fn map_oracle(scores: &[Vec<f64>], relevance: &[Vec<bool>]) -> Result<f64> {
    check_matrix(scores, relevance)?;
    let g = scores[0].len();
    let mut total = 0.0;
    for (q, (s, rel)) in scores.iter().zip(relevance).enumerate() {
        let rank_of = |i: usize| {
            1 + (0..g)
                .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
                .count()
        };
        let ranks: Vec<usize> = (0..g).map(rank_of).collect();
        let n_rel = rel.iter().filter(|&&r| r).count();
        if n_rel == 0 {
            return Err(Error::Protocol(format!("query {q} has no relevant gallery item")));
        }
        let mut ap = 0.0;
        for k in 1..=g {
            let item = (0..g).find(|&i| ranks[i] == k).expect("ranks are a permutation");
            if rel[item] {
                let hits = (0..g).filter(|&i| rel[i] && ranks[i] <= k).count();
                ap += hits as f64 / k as f64;
            }
        }
        total += ap / n_rel as f64;
    }
    Ok(total / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub n_queries: usize,
}

/// Per-query `(AP, rank-1 hit, rank-5 hit)` for every image of the set.
fn per_query(set: &EmbeddingSet) -> Result<Vec<(f64, bool, bool)>> {
    let n = set.refs.len();
    let mut out = Vec::with_capacity(n);
    for q in 0..n {
        let gallery: Vec<usize> = (0..n).filter(|&g| g != q).collect();
        let scores: Vec<f64> = gallery.iter().map(|&g| set.score(q, g)).collect();
        let rel: Vec<bool> = gallery
            .iter()
            .map(|&g| set.refs[g].instance_id == set.refs[q].instance_id)
            .collect();
        let m = query_metrics(&scores, &rel).ok_or_else(|| {
            Error::Protocol(format!(
                "instance {} of category {} has no other image in the gallery",
                set.refs[q].instance_id, set.category_id
            ))
        })?;
        out.push(m);
    }
    Ok(out)
}

pub fn identification_eval(set: &EmbeddingSet) -> Result<IdentificationMetrics> {
    let q = per_query(set)?;
    if q.is_empty() {
        return Err(Error::Protocol(format!("category {} has no queries", set.category_id)));
    }
    let n = q.len() as f64;
    Ok(IdentificationMetrics {
        map: q.iter().map(|x| x.0).sum::<f64>() / n,
        rank1: q.iter().filter(|x| x.1).count() as f64 / n,
        rank5: q.iter().filter(|x| x.2).count() as f64 / n,
        n_queries: q.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub auc: f64,
    pub acc: f64,
    pub n_pairs: usize,
}

/// Mann-Whitney AUC: probability a positive outscores a negative, ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Protocol("AUC needs both positive and negative pairs".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Threshold maximising accuracy on `(scores, labels)`; predicts positive when `score > t`.
fn best_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut candidates = vec![s[0] - 1.0];
    candidates.extend(s.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(s[s.len() - 1] + 1.0);
    let mut best = (usize::MAX, candidates[0]);
    let mut best_correct = 0;
    for (ci, &t) in candidates.iter().enumerate() {
        let correct = scores.iter().zip(labels).filter(|(x, y)| (**x > t) == **y).count();
        if correct > best_correct || best.0 == usize::MAX {
            best_correct = correct;
            best = (ci, t);
        }
    }
    best.1
}

/// AUC over all pairs and accuracy over `folds`-fold cross-validated thresholds.
pub fn verification_from_scores(scores: &[f64], labels: &[bool], folds: usize, seed_value: u64) -> Result<VerificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::shape("one label per score is required"));
    }
    if folds < 2 || scores.len() < folds {
        return Err(Error::Protocol(format!(
            "{} pairs cannot be split into {folds} folds",
            scores.len()
        )));
    }
    let a = auc(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.shuffle(&mut seed::rng_for(seed_value, "verification_folds", 0));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; scores.len()];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };
    let mut acc_sum = 0.0;
    for k in 0..folds {
        let (train_s, train_l): (Vec<f64>, Vec<bool>) = (0..scores.len())
            .filter(|&i| fold_of[i] != k)
            .map(|i| (scores[i], labels[i]))
            .unzip();
        let t = best_threshold(&train_s, &train_l);
        let test: Vec<usize> = (0..scores.len()).filter(|&i| fold_of[i] == k).collect();
        let correct = test.iter().filter(|&&i| (scores[i] > t) == labels[i]).count();
        acc_sum += correct as f64 / test.len() as f64;
    }
    Ok(VerificationMetrics {
        auc: a,
        acc: acc_sum / folds as f64,
        n_pairs: scores.len(),
    })
}

/// Samples up to `max_pairs` balanced pairs and scores them.
pub fn verification_eval(set: &EmbeddingSet, max_pairs: usize, folds: usize, seed_value: u64) -> Result<VerificationMetrics> {
    let n = set.refs.len();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if set.refs[a].instance_id == set.refs[b].instance_id {
                pos.push((a, b));
            } else {
                neg.push((a, b));
            }
        }
    }
    let mut rng = seed::rng_for(seed_value, "verification_pairs", set.category_id as u64);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let per_side = (max_pairs / 2).min(pos.len()).min(neg.len());
    let mut scores = Vec::with_capacity(2 * per_side);
    let mut labels = Vec::with_capacity(2 * per_side);
    for &(a, b) in pos[..per_side].iter().chain(&neg[..per_side]) {
        scores.push(set.score(a, b));
        labels.push(set.refs[a].instance_id == set.refs[b].instance_id);
    }
    verification_from_scores(&scores, &labels, folds, seed_value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Support pairs per novel category.
    pub k: usize,
    pub support_seed: u64,
    pub verification_pairs: usize,
    pub folds: usize,
    pub verification_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 64,
            support_seed: 0,
            verification_pairs: 10_000,
            folds: 10,
            verification_seed: 0,
        }
    }
}

/// Embeds a category's images, possibly conditioned on its support set.
pub trait CategoryEncoder: Sync {
    fn embed(&self, support: &SupportSet, records: &[RecordRef]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category_id: u32,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub n_queries: usize,
    pub auc: f64,
    pub acc: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub auc: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub method: String,
    pub eval: EvalConfig,
    pub config_fingerprint: String,
    pub per_category: Vec<CategoryMetrics>,
    /// Unweighted means over categories.
    pub mean: Aggregate,
    /// Identification metrics averaged over all queries of all categories.
    pub pooled: Pooled,
}

impl RetrievalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Aligned text table with one row per category and a mean row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}", "category", "mAP", "Rank-1", "Rank-5", "AUC", "ACC");
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        for c in &self.per_category {
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}",
                c.category_id,
                pct(c.map),
                pct(c.rank1),
                pct(c.rank5),
                pct(c.auc),
                pct(c.acc)
            );
        }
        let m = &self.mean;
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "mean",
            pct(m.map),
            pct(m.rank1),
            pct(m.rank5),
            pct(m.auc),
            pct(m.acc)
        );
        s
    }
}

/// Evaluation of one novel category with its own support set.
pub fn evaluate_category(
    encoder: &dyn CategoryEncoder,
    manifest: &SplitManifest,
    category_id: u32,
    eval: &EvalConfig,
) -> Result<(CategoryMetrics, Vec<(f64, bool, bool)>)> {
    let support = sample_support_set(manifest, category_id, eval.k, eval.support_seed)?;
    let test = manifest.test_records(category_id)?;
    let used = support.records();
    if let Some(r) = test.iter().find(|r| used.contains(r)) {
        return Err(Error::Protocol(format!("support image {r:?} is also a test image")));
    }
    let emb = encoder.embed(&support, &test)?;
    let set = EmbeddingSet::new(category_id, test, emb)?;
    let q = per_query(&set)?;
    let id = identification_eval(&set)?;
    let ver = verification_eval(&set, eval.verification_pairs, eval.folds, eval.verification_seed)?;
    Ok((
        CategoryMetrics {
            category_id,
            map: id.map,
            rank1: id.rank1,
            rank5: id.rank5,
            n_queries: id.n_queries,
            auc: ver.auc,
            acc: ver.acc,
            n_pairs: ver.n_pairs,
        },
        q,
    ))
}

/// Evaluates every novel category of the manifest.
pub fn evaluate_novel(
    encoder: &dyn CategoryEncoder,
    manifest: &SplitManifest,
    eval: &EvalConfig,
    method: &str,
    config_fingerprint: &str,
) -> Result<RetrievalReport> {
    let cats = manifest.splits.novel.clone();
    if cats.is_empty() {
        return Err(Error::Protocol("manifest has no novel categories".into()));
    }
    let results: Vec<(CategoryMetrics, Vec<(f64, bool, bool)>)> = cats
        .par_iter()
        .map(|&c| evaluate_category(encoder, manifest, c, eval))
        .collect::<Result<_>>()?;
    Ok(assemble(results, eval, method, config_fingerprint))
}

fn assemble(
    results: Vec<(CategoryMetrics, Vec<(f64, bool, bool)>)>,
    eval: &EvalConfig,
    method: &str,
    config_fingerprint: &str,
) -> RetrievalReport {
    let n = results.len() as f64;
    let mean_of = |f: &dyn Fn(&CategoryMetrics) -> f64| results.iter().map(|(c, _)| f(c)).sum::<f64>() / n;
    let mean = Aggregate {
        map: mean_of(&|c| c.map),
        rank1: mean_of(&|c| c.rank1),
        rank5: mean_of(&|c| c.rank5),
        auc: mean_of(&|c| c.auc),
        acc: mean_of(&|c| c.acc),
    };
    let all: Vec<&(f64, bool, bool)> = results.iter().flat_map(|(_, q)| q).collect();
    let nq = all.len() as f64;
    let pooled = Pooled {
        map: all.iter().map(|q| q.0).sum::<f64>() / nq,
        rank1: all.iter().filter(|q| q.1).count() as f64 / nq,
        rank5: all.iter().filter(|q| q.2).count() as f64 / nq,
        n_queries: all.len(),
    };
    RetrievalReport {
        method: method.to_string(),
        eval: eval.clone(),
        config_fingerprint: config_fingerprint.to_string(),
        per_category: results.into_iter().map(|(c, _)| c).collect(),
        mean,
        pooled,
    }
}

/// Reports for `r` repetitions and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub reports: Vec<RetrievalReport>,
    pub mean: Aggregate,
}

/// Runs `run(seed)` for `r` derived seeds (one base/novel split each) and averages.
pub fn repeat_splits(base_seed: u64, r: usize, mut run: impl FnMut(u64) -> Result<RetrievalReport>) -> Result<RepeatSummary> {
    if r == 0 {
        return Err(Error::Config("repeat count must be positive".into()));
    }
    let seeds: Vec<u64> = (0..r as u64).map(|i| seed::derive(base_seed, "repeat", i)).collect();
    let reports: Vec<RetrievalReport> = seeds.iter().map(|&s| run(s)).collect::<Result<_>>()?;
    let n = r as f64;
    let avg = |f: &dyn Fn(&Aggregate) -> f64| reports.iter().map(|x| f(&x.mean)).sum::<f64>() / n;
    let mean = Aggregate {
        map: avg(&|a| a.map),
        rank1: avg(&|a| a.rank1),
        rank5: avg(&|a| a.rank5),
        auc: avg(&|a| a.auc),
        acc: avg(&|a| a.acc),
    };
    Ok(RepeatSummary { seeds, reports, mean })
}
