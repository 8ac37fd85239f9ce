//! Optimal transport between two patch-feature sets.
//!
//! The cost between rows is `1 − cos`, marginals are uniform, and the main
//! solver is the inexact proximal point method (IPOT): each outer step solves
//! the proximal problem `min ⟨T, C⟩ + β·KL(T ‖ T_prev)` with a few Sinkhorn
//! scalings against the kernel `exp(−C/β) ⊙ T_prev`. A log-domain Sinkhorn
//! solver and an exhaustive permutation search serve as independent checks.
//!
//! Everything here works in `f64`; training code converts at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect())
            .expect("matching buffer")
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        s
    }

    /// `⟨self, other⟩_F`.
    pub fn frobenius(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

fn check_features(f: &Mat, which: &str) -> Result<()> {
    if f.rows == 0 || f.cols == 0 {
        return Err(Error::shape(format!("{which} feature set is empty")));
    }
    if f.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("ot", format!("{which} features are not finite")));
    }
    Ok(())
}

fn row_norms(f: &Mat) -> Vec<f64> {
    (0..f.rows)
        .map(|r| f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn normalized(f: &Mat) -> Mat {
    let norms = row_norms(f);
    let mut out = f.clone();
    for (r, n) in norms.into_iter().enumerate() {
        if n > 0.0 {
            out.data[r * f.cols..(r + 1) * f.cols]
                .iter_mut()
                .for_each(|v| *v /= n);
        }
    }
    out
}

/// `C[u][v] = 1 − cos(F_i[u], F_j[v])`, clamped to `[0, 2]`.
pub fn cost_matrix(fi: &Mat, fj: &Mat) -> Result<Mat> {
    check_features(fi, "first")?;
    check_features(fj, "second")?;
    if fi.cols != fj.cols {
        return Err(Error::shape(format!(
            "feature widths differ: {} vs {}",
            fi.cols, fj.cols
        )));
    }
    let (a, b) = (normalized(fi), normalized(fj));
    let mut c = Mat::zeros(fi.rows, fj.rows);
    for u in 0..a.rows {
        let au = a.row(u);
        for v in 0..b.rows {
            let dot: f64 = au.iter().zip(b.row(v)).map(|(x, y)| x * y).sum();
            c.set(u, v, (1.0 - dot).clamp(0.0, 2.0));
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpotParams {
    pub beta: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub marginal_tol: f64,
}

impl Default for IpotParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            outer_iters: 50,
            inner_iters: 1,
            marginal_tol: 1e-4,
        }
    }
}

impl IpotParams {
    /// Small proximal step and many iterations; reaches the exact optimum to
    /// about 1e-4 on small problems.
    pub fn tight() -> Self {
        Self {
            beta: 0.1,
            outer_iters: 1000,
            inner_iters: 3,
            marginal_tol: 1e-6,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.outer_iters == 0 || self.inner_iters == 0 || !(self.marginal_tol > 0.0) {
            return Err(Error::Config(format!("invalid IPOT parameters {self:?}")));
        }
        Ok(())
    }
}

/// A coupling together with the marginals it was solved for.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub t: Mat,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl TransportPlan {
    /// `max(‖rowsum − a‖∞, ‖colsum − b‖∞)`.
    pub fn marginal_error(&self) -> f64 {
        let r = self
            .t
            .row_sums()
            .iter()
            .zip(&self.a)
            .map(|(s, a)| (s - a).abs())
            .fold(0.0, f64::max);
        let c = self
            .t
            .col_sums()
            .iter()
            .zip(&self.b)
            .map(|(s, b)| (s - b).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtResult {
    pub distance: f64,
    pub plan: TransportPlan,
    pub cost: Mat,
    /// Whether the iterates met `marginal_tol` before the final rounding.
    pub converged: bool,
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// IPOT on a precomputed cost with uniform marginals.
///
/// The returned plan is rounded onto the transport polytope, so its marginals
/// hold to rounding error even when the iterations stop early.
pub fn ipot(cost: &Mat, params: &IpotParams) -> Result<TransportPlan> {
    let mut plan = ipot_iterates(cost, params)?;
    round_to_marginals(&mut plan.t, &plan.a, &plan.b);
    Ok(plan)
}

fn ipot_iterates(cost: &Mat, params: &IpotParams) -> Result<TransportPlan> {
    params.validate()?;
    let (n, m) = (cost.rows, cost.cols);
    let (mu, nu) = (uniform(n), uniform(m));
    let g: Vec<f64> = cost.data.iter().map(|c| (-c / params.beta).exp()).collect();
    let mut t = Mat {
        rows: n,
        cols: m,
        data: vec![1.0; n * m],
    };
    let mut q = vec![0.0; n * m];
    let mut sigma = vec![1.0 / m as f64; m];
    let mut a = vec![0.0; n];
    for _ in 0..params.outer_iters {
        for (qi, (gi, ti)) in q.iter_mut().zip(g.iter().zip(&t.data)) {
            *qi = gi * ti;
        }
        for _ in 0..params.inner_iters {
            for u in 0..n {
                let s: f64 = q[u * m..(u + 1) * m].iter().zip(&sigma).map(|(x, y)| x * y).sum();
                a[u] = mu[u] / s;
            }
            for v in 0..m {
                let mut s = 0.0;
                for u in 0..n {
                    s += q[u * m + v] * a[u];
                }
                sigma[v] = nu[v] / s;
            }
        }
        for u in 0..n {
            for v in 0..m {
                t.data[u * m + v] = a[u] * q[u * m + v] * sigma[v];
            }
        }
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("ot", "IPOT produced a non-finite plan"));
    }
    Ok(TransportPlan { t, a: mu, b: nu })
}

/// `D_OT = ⟨T, C⟩` with `T` from IPOT.
pub fn ot_distance(fi: &Mat, fj: &Mat, params: &IpotParams) -> Result<OtResult> {
    let cost = cost_matrix(fi, fj)?;
    let mut plan = ipot_iterates(&cost, params)?;
    let converged = plan.marginal_error() <= params.marginal_tol;
    round_to_marginals(&mut plan.t, &plan.a, &plan.b);
    Ok(OtResult {
        distance: plan.t.frobenius(&cost),
        plan,
        cost,
        converged,
    })
}

/// Gradient of `⟨T, C(F_i, F_j)⟩` with `T` held fixed.
pub fn ot_envelope_gradient(fi: &Mat, fj: &Mat, plan: &Mat) -> (Mat, Mat) {
    let (xn, yn) = (row_norms(fi), row_norms(fj));
    let (xh, yh) = (normalized(fi), normalized(fj));
    let d = fi.cols;
    let mut gx = Mat::zeros(fi.rows, d);
    let mut gy = Mat::zeros(fj.rows, d);
    for u in 0..fi.rows {
        for v in 0..fj.rows {
            let w = plan.get(u, v);
            if w == 0.0 {
                continue;
            }
            let (xu, yv) = (xh.row(u), yh.row(v));
            let cos: f64 = xu.iter().zip(yv).map(|(a, b)| a * b).sum();
            // d(1 − cos)/dx = −(ŷ − cos·x̂)/|x|
            if xn[u] > 0.0 {
                for k in 0..d {
                    gx.data[u * d + k] -= w * (yv[k] - cos * xu[k]) / xn[u];
                }
            }
            if yn[v] > 0.0 {
                for k in 0..d {
                    gy.data[v * d + k] -= w * (xu[k] - cos * yv[k]) / yn[v];
                }
            }
        }
    }
    (gx, gy)
}

/// Exact OT cost for equal-sized sets with uniform marginals, by enumerating
/// permutation plans. Only for `n ≤ 6`.
pub fn ot_bruteforce(fi: &Mat, fj: &Mat) -> Result<f64> {
    if fi.rows != fj.rows || fi.rows > 6 {
        return Err(Error::OracleScope(format!(
            "permutation search needs n = m ≤ 6, got {}x{}",
            fi.rows, fj.rows
        )));
    }
    let c = cost_matrix(fi, fj)?;
    Ok(assignment_bruteforce(&c))
}

/// `min_π (1/n) Σ_u C[u, π(u)]` over all permutations of a square cost.
pub fn assignment_bruteforce(c: &Mat) -> f64 {
    fn rec(c: &Mat, u: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if u == c.rows {
            *best = best.min(acc);
            return;
        }
        for v in 0..c.cols {
            if !used[v] {
                used[v] = true;
                rec(c, u + 1, used, acc + c.get(u, v), best);
                used[v] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
    best / c.rows as f64
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic OT by log-domain Sinkhorn, followed by a feasibility rounding.
///
/// For small `epsilon` the plan is close to a permutation and Sinkhorn's
/// marginal error decays only like `1/iters`. The final plan is therefore
/// projected onto the transport polytope with the rounding step of Altschuler,
/// Weed and Rigollet, which moves it by at most the remaining marginal error
/// and keeps every entry positive.
pub fn sinkhorn_reference(c: &Mat, a: &[f64], b: &[f64], epsilon: f64, iters: usize) -> Result<TransportPlan> {
    if !(epsilon > 0.0) {
        return Err(Error::Config("sinkhorn epsilon must be positive".into()));
    }
    if a.len() != c.rows || b.len() != c.cols {
        return Err(Error::shape("marginal lengths do not match the cost"));
    }
    let (n, m) = (c.rows, c.cols);
    let (la, lb): (Vec<f64>, Vec<f64>) = (a.iter().map(|x| x.ln()).collect(), b.iter().map(|x| x.ln()).collect());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..iters {
        for u in 0..n {
            let lse = logsumexp((0..m).map(|v| (g[v] - c.get(u, v)) / epsilon));
            f[u] = epsilon * (la[u] - lse);
        }
        for v in 0..m {
            let lse = logsumexp((0..n).map(|u| (f[u] - c.get(u, v)) / epsilon));
            g[v] = epsilon * (lb[v] - lse);
        }
    }
    let mut t = Mat::zeros(n, m);
    for u in 0..n {
        for v in 0..m {
            t.set(u, v, ((f[u] + g[v] - c.get(u, v)) / epsilon).exp());
        }
    }
    round_to_marginals(&mut t, a, b);
    Ok(TransportPlan {
        t,
        a: a.to_vec(),
        b: b.to_vec(),
    })
}

/// Scales overfull rows and columns down, then spreads the missing mass as a
/// rank-one correction so both marginals hold exactly.
fn round_to_marginals(t: &mut Mat, a: &[f64], b: &[f64]) {
    let rows = t.row_sums();
    for (u, (&s, &target)) in rows.iter().zip(a).enumerate() {
        if s > target {
            let k = target / s;
            t.data[u * t.cols..(u + 1) * t.cols].iter_mut().for_each(|x| *x *= k);
        }
    }
    let cols = t.col_sums();
    for (v, (&s, &target)) in cols.iter().zip(b).enumerate() {
        if s > target {
            let k = target / s;
            for u in 0..t.rows {
                t.data[u * t.cols + v] *= k;
            }
        }
    }
    let er: Vec<f64> = t.row_sums().iter().zip(a).map(|(s, x)| x - s).collect();
    let ec: Vec<f64> = t.col_sums().iter().zip(b).map(|(s, x)| x - s).collect();
    let mass: f64 = er.iter().sum();
    if mass > 0.0 {
        for u in 0..t.rows {
            for v in 0..t.cols {
                t.data[u * t.cols + v] += er[u] * ec[v] / mass;
            }
        }
    }
}

/// Cost of the entropic plan, `⟨T_ε, C⟩`.
pub fn sinkhorn_cost(fi: &Mat, fj: &Mat, epsilon: f64, iters: usize) -> Result<f64> {
    let c = cost_matrix(fi, fj)?;
    let plan = sinkhorn_reference(&c, &uniform(c.rows), &uniform(c.cols), epsilon, iters)?;
    Ok(plan.t.frobenius(&c))
}
