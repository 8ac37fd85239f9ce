//! Training objectives: margin triplet loss on CLS embeddings, OT patch
//! alignment, the masked two-class label loss, and their weighted sum.
//!
//! The kernels take `f64` matrices and return the value plus analytic
//! gradients, so the same code is checked against finite differences and
//! plugged into the training graph.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{ot_distance, ot_envelope_gradient, IpotParams, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Pull positives together, push negatives out to `align_margin`.
    Hinged,
    /// `D_OT` for positives minus `D_OT` for negatives; unbounded below.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub margin_alpha: f64,
    pub lambda_icl: f64,
    pub lambda_align: f64,
    pub align_margin: f64,
    pub align_mode: AlignMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            margin_alpha: 0.1,
            lambda_icl: 1.0,
            lambda_align: 0.1,
            align_margin: 0.5,
            align_mode: AlignMode::Hinged,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_alpha > 0.0) {
            return Err(Error::Config("margin_alpha must be positive".into()));
        }
        if !(self.lambda_icl >= 0.0) || !(self.lambda_align >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.align_margin >= 0.0) {
            return Err(Error::Config("align_margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// A scalar loss and its gradients with respect to each input matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Graded<const N: usize> {
    pub value: f64,
    pub grads: [Mat; N],
}

const NORM_TOL: f64 = 1e-4;

fn check_unit_rows(m: &Mat, which: &str) -> Result<()> {
    for r in 0..m.rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Normalization(format!(
                "{which} row {r} has norm {n:.6}"
            )));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_i max(0, α − ⟨a_i, p_i⟩ + ⟨a_i, n_i⟩)` over unit-norm rows.
pub fn triplet_loss(anchor: &Mat, positive: &Mat, negative: &Mat, alpha: f64) -> Result<Graded<3>> {
    if !(alpha > 0.0) {
        return Err(Error::Config("triplet margin must be positive".into()));
    }
    if anchor.rows == 0 {
        return Err(Error::Protocol("empty triplet batch".into()));
    }
    if positive.rows != anchor.rows
        || negative.rows != anchor.rows
        || positive.cols != anchor.cols
        || negative.cols != anchor.cols
    {
        return Err(Error::shape("triplet members differ in shape"));
    }
    check_unit_rows(anchor, "anchor")?;
    check_unit_rows(positive, "positive")?;
    check_unit_rows(negative, "negative")?;
    let d = anchor.cols;
    let mut ga = Mat::zeros(anchor.rows, d);
    let mut gp = Mat::zeros(anchor.rows, d);
    let mut gn = Mat::zeros(anchor.rows, d);
    let mut total = 0.0;
    for i in 0..anchor.rows {
        let (a, p, n) = (anchor.row(i), positive.row(i), negative.row(i));
        let term = alpha - dot(a, p) + dot(a, n);
        if term > 0.0 {
            total += term;
            for k in 0..d {
                ga.data[i * d + k] = n[k] - p[k];
                gp.data[i * d + k] = -a[k];
                gn.data[i * d + k] = a[k];
            }
        }
    }
    Ok(Graded {
        value: total,
        grads: [ga, gp, gn],
    })
}

/// One image pair feeding the alignment loss.
#[derive(Clone, Debug)]
pub struct AlignPair<'a> {
    pub fi: &'a Mat,
    pub fj: &'a Mat,
    pub positive: bool,
}

/// Alignment loss value, per-pair distances and gradients `(dF_i, dF_j)` per pair.
#[derive(Clone, Debug)]
pub struct AlignOutput {
    pub value: f64,
    pub distances: Vec<f64>,
    pub grads: Vec<(Mat, Mat)>,
    pub all_converged: bool,
}

pub fn patch_align_loss(pairs: &[AlignPair<'_>], weights: &LossWeights, ipot: &IpotParams) -> Result<AlignOutput> {
    if pairs.is_empty() {
        return Err(Error::Protocol("alignment loss needs at least one pair".into()));
    }
    let mut value = 0.0;
    let mut distances = Vec::with_capacity(pairs.len());
    let mut grads = Vec::with_capacity(pairs.len());
    let mut all_converged = true;
    for p in pairs {
        let r = ot_distance(p.fi, p.fj, ipot)?;
        all_converged &= r.converged;
        let d = r.distance;
        let coef = match (weights.align_mode, p.positive) {
            (_, true) => 1.0,
            (AlignMode::Literal, false) => -1.0,
            (AlignMode::Hinged, false) if d < weights.align_margin => -1.0,
            (AlignMode::Hinged, false) => 0.0,
        };
        value += match (weights.align_mode, p.positive) {
            (_, true) => d,
            (AlignMode::Literal, false) => -d,
            (AlignMode::Hinged, false) => (weights.align_margin - d).max(0.0),
        };
        let (mut gi, mut gj) = if coef == 0.0 {
            (Mat::zeros(p.fi.rows, p.fi.cols), Mat::zeros(p.fj.rows, p.fj.cols))
        } else {
            ot_envelope_gradient(p.fi, p.fj, &r.plan.t)
        };
        gi.data.iter_mut().for_each(|v| *v *= coef);
        gj.data.iter_mut().for_each(|v| *v *= coef);
        distances.push(d);
        grads.push((gi, gj));
    }
    Ok(AlignOutput {
        value,
        distances,
        grads,
        all_converged,
    })
}

/// Summed two-class cross-entropy over rows of `logits [K × 2]`; `labels[k]`
/// is the positive class flag. Gradient is with respect to the logits.
pub fn label_cross_entropy(logits: &Mat, labels: &[bool]) -> Result<Graded<1>> {
    if logits.cols != 2 {
        return Err(Error::shape(format!("label logits need 2 columns, got {}", logits.cols)));
    }
    if labels.is_empty() {
        return Err(Error::Protocol("no label positions to supervise".into()));
    }
    if labels.len() != logits.rows {
        return Err(Error::shape("one logit row per label is required"));
    }
    let mut g = Mat::zeros(logits.rows, 2);
    let mut total = 0.0;
    for (k, &y) in labels.iter().enumerate() {
        let (z0, z1) = (logits.get(k, 0), logits.get(k, 1));
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let t = y as usize;
        total += lse - if y { z1 } else { z0 };
        for c in 0..2 {
            let p = (logits.get(k, c) - lse).exp();
            g.set(k, c, p - if c == t { 1.0 } else { 0.0 });
        }
    }
    Ok(Graded { value: total, grads: [g] })
}

/// Label loss through the linear head: `CE(H·W + b, y)` with gradients for `(H, W, b)`.
pub fn label_head_loss(hidden: &Mat, w: &Mat, b: &Mat, labels: &[bool]) -> Result<Graded<3>> {
    if w.rows != hidden.cols || w.cols != 2 || b.rows != 1 || b.cols != 2 {
        return Err(Error::shape("label head expects W [d × 2] and b [1 × 2]"));
    }
    let mut logits = Mat::zeros(hidden.rows, 2);
    for k in 0..hidden.rows {
        for c in 0..2 {
            let z: f64 = (0..hidden.cols).map(|i| hidden.get(k, i) * w.get(i, c)).sum();
            logits.set(k, c, z + b.get(0, c));
        }
    }
    let ce = label_cross_entropy(&logits, labels)?;
    let gz = &ce.grads[0];
    let mut gh = Mat::zeros(hidden.rows, hidden.cols);
    let mut gw = Mat::zeros(w.rows, 2);
    let mut gb = Mat::zeros(1, 2);
    for k in 0..hidden.rows {
        for c in 0..2 {
            let z = gz.get(k, c);
            gb.data[c] += z;
            for i in 0..hidden.cols {
                gh.data[k * hidden.cols + i] += z * w.get(i, c);
                gw.data[i * 2 + c] += z * hidden.get(k, i);
            }
        }
    }
    Ok(Graded {
        value: ce.value,
        grads: [gh, gw, gb],
    })
}

/// `L_ID + λ_ICL·L_ICL + λ_align·L_align`.
pub fn total_loss(l_id: f64, l_icl: f64, l_align: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_id", l_id), ("l_icl", l_icl), ("l_align", l_align)] {
        if !v.is_finite() {
            return Err(Error::numeric(name, format!("loss component is {v}")));
        }
    }
    Ok(l_id + weights.lambda_icl * l_icl + weights.lambda_align * l_align)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub category_id: u32,
    pub l_id: f64,
    pub l_icl: f64,
    pub l_align: f64,
    pub l_total: f64,
}

/// Append-only JSON-lines sink for [`StepLog`] records.
pub struct LossLog {
    out: Option<std::io::BufWriter<std::fs::File>>,
    pub entries: Vec<StepLog>,
}

impl LossLog {
    pub fn in_memory() -> Self {
        Self {
            out: None,
            entries: Vec::new(),
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(std::io::BufWriter::new(f)),
            entries: Vec::new(),
        })
    }

    pub fn push(&mut self, entry: StepLog) -> Result<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(&entry)?;
            writeln!(out, "{line}").map_err(|e| Error::io(Path::new("training log"), e))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io(Path::new("training log"), e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    /// Builds unit vectors with prescribed similarities to `a = e0`.
    fn with_sim(s: f64, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; 3];
        v[0] = s;
        v[axis] = (1.0 - s * s).sqrt();
        v
    }

    #[test]
    fn hinge_inactive_and_active_cases() {
        let a = Mat::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let p = Mat::from_rows(&[with_sim(0.9, 1)]).unwrap();
        let n = Mat::from_rows(&[with_sim(0.3, 2)]).unwrap();
        assert_eq!(triplet_loss(&a, &p, &n, 0.1).unwrap().value, 0.0);
        let p = Mat::from_rows(&[with_sim(0.5, 1)]).unwrap();
        let n = Mat::from_rows(&[with_sim(0.6, 2)]).unwrap();
        assert!((triplet_loss(&a, &p, &n, 0.1).unwrap().value - 0.2).abs() < 1e-12);
        assert_eq!(LossWeights::default().margin_alpha, 0.1);
    }

    #[test]
    fn triplet_rejects_unnormalised_rows() {
        let a = Mat::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let p = Mat::from_rows(&[unit(&[1.0, 1.0])]).unwrap();
        assert!(matches!(
            triplet_loss(&a, &p, &p, 0.1),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn cross_entropy_extremes() {
        let labels = vec![true, false, true, true];
        let uniform = Mat::zeros(4, 2);
        let ce = label_cross_entropy(&uniform, &labels).unwrap().value;
        assert!((ce - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let mut saturated = Mat::zeros(4, 2);
        for (k, &y) in labels.iter().enumerate() {
            saturated.set(k, y as usize, 40.0);
            saturated.set(k, 1 - y as usize, -40.0);
        }
        assert!(label_cross_entropy(&saturated, &labels).unwrap().value < 1e-6);
        assert!(matches!(
            label_cross_entropy(&Mat::zeros(0, 2), &[]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, &w).unwrap() - 3.3).abs() < 1e-12);
        let zero = LossWeights {
            lambda_icl: 0.0,
            lambda_align: 0.0,
            ..w
        };
        assert_eq!(total_loss(1.5, 2.0, 3.0, &zero).unwrap(), 1.5);
        match total_loss(1.0, f64::NAN, 0.0, &w) {
            Err(Error::Numeric { component, .. }) => assert_eq!(component, "l_icl"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn align_modes() {
        let f = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = Mat::from_rows(&[vec![-1.0, 0.2], vec![0.3, -1.0]]).unwrap();
        let ip = IpotParams::default();
        let pos = [AlignPair { fi: &f, fj: &f, positive: true }];
        assert!(patch_align_loss(&pos, &LossWeights::default(), &ip).unwrap().value.abs() < 1e-6);
        let neg = [AlignPair { fi: &f, fj: &g, positive: false }];
        let lit = LossWeights {
            align_mode: AlignMode::Literal,
            ..LossWeights::default()
        };
        let out = patch_align_loss(&neg, &lit, &ip).unwrap();
        assert!(out.value < 0.0);
        assert!((out.value + out.distances[0]).abs() < 1e-12);
        // distance here exceeds the margin, so the hinge is inactive
        let hinged = patch_align_loss(&neg, &LossWeights::default(), &ip).unwrap();
        assert!(hinged.distances[0] >= 0.5);
        assert_eq!(hinged.value, 0.0);
        assert!(hinged.grads[0].0.data.iter().all(|&v| v == 0.0));
        assert!(patch_align_loss(&[], &LossWeights::default(), &ip).is_err());
    }
}
