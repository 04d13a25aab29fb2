//! The bound `ψ(p; c) = c0 + c1·√(Σ_{fresh} p_m²) + c2·√(Σ_m p_m²/n_m)` over
//! client importance vectors, its minimization over the simplex, the heuristic
//! estimate of `c2/c1`, and the catalogue of importance strategies.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dist, norm, Example, Model};
use crate::par::Exec;
use crate::rng::{self, Purpose};
use crate::trainer::minibatch_gradient;
use crate::weighting::{fmt17, ImportanceVector};

/// Coefficients of ψ. Clients `0..m_hist` are historical, the rest fresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Relative dataset sizes `n_m = N_m / N`.
    pub n: ImportanceVector,
    pub m_hist: usize,
}

impl BoundCoefficients {
    pub fn new(c0: f64, c1: f64, c2: f64, n: ImportanceVector, m_hist: usize) -> Result<Self> {
        let c = BoundCoefficients { c0, c1, c2, n, m_hist };
        c.validate()?;
        Ok(c)
    }

    /// The canonical form `(c0, c1, c2) = (0, 1, ratio)`.
    pub fn from_ratio(ratio: f64, n: ImportanceVector, m_hist: usize) -> Result<Self> {
        Self::new(0.0, 1.0, ratio, n, m_hist)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c0", self.c0), ("c1", self.c1), ("c2", self.c2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.n.iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidInput("every client needs a positive relative size n_m".into()));
        }
        if self.m_hist > self.n.len() {
            return Err(Error::InvalidInput(format!(
                "{} historical clients out of {}",
                self.m_hist,
                self.n.len()
            )));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.n.len()
    }

    /// `N_hist / N`.
    pub fn historical_share(&self) -> f64 {
        self.n[..self.m_hist].iter().sum()
    }
}

fn check_len(p: &[f64], c: &BoundCoefficients) -> Result<()> {
    if p.len() != c.n.len() {
        return Err(Error::DimensionMismatch {
            expected: c.n.len(),
            got: p.len(),
        });
    }
    Ok(())
}

/// `(Σ_{fresh} p_m², Σ_m p_m²/n_m)`.
fn radicands(p: &[f64], c: &BoundCoefficients) -> Result<(f64, f64)> {
    let fresh = p[c.m_hist..].iter().map(|x| x * x).sum();
    let mut spread = 0.0;
    for (m, (x, n)) in p.iter().zip(c.n.iter()).enumerate() {
        if *x != 0.0 {
            if *n <= 0.0 {
                return Err(Error::InvalidInput(format!("client {m} has importance {x} but n_m = 0")));
            }
            spread += x * x / n;
        }
    }
    Ok((fresh, spread))
}

pub fn psi(p: &[f64], c: &BoundCoefficients) -> Result<f64> {
    check_len(p, c)?;
    let (fresh, spread) = radicands(p, c)?;
    Ok(c.c0 + c.c1 * fresh.sqrt() + c.c2 * spread.sqrt())
}

/// A subgradient of ψ at `p`; a term whose radicand is 0 contributes 0.
pub fn psi_subgradient(p: &[f64], c: &BoundCoefficients) -> Result<Vec<f64>> {
    check_len(p, c)?;
    let (fresh, spread) = radicands(p, c)?;
    let a = if fresh > 0.0 { c.c1 / fresh.sqrt() } else { 0.0 };
    let b = if spread > 0.0 { c.c2 / spread.sqrt() } else { 0.0 };
    Ok(p.iter()
        .zip(c.n.iter())
        .enumerate()
        .map(|(m, (x, n))| {
            let first = if m >= c.m_hist { a * x } else { 0.0 };
            first + b * x / n
        })
        .collect())
}

/// Euclidean projection onto the simplex by sorting and thresholding.
pub fn project_simplex(v: &[f64]) -> Result<ImportanceVector> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("simplex projection input"));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (k, x) in sorted.iter().enumerate() {
        cumulative += x;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if x - candidate > 0.0 {
            threshold = candidate;
        } else {
            break;
        }
    }
    let mut p: Vec<f64> = v.iter().map(|x| (x - threshold).max(0.0)).collect();
    // Remove the rounding drift so the result passes the simplex check.
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 0.0 {
        for x in &mut p {
            *x /= total;
        }
    }
    ImportanceVector::new(p)
}

/// Importance spread over a group of clients proportionally to `n`.
fn group_allocation(n: &[f64], range: std::ops::Range<usize>, mass: f64) -> Vec<f64> {
    let total: f64 = n[range.clone()].iter().sum();
    n.iter()
        .enumerate()
        .map(|(m, x)| if range.contains(&m) && mass > 0.0 { mass * x / total } else { 0.0 })
        .collect()
}

/// `h` spread ∝ n over historical clients and `1 − h` over fresh ones.
pub fn fixed_p_hist(n: &ImportanceVector, m_hist: usize, h: f64) -> Result<ImportanceVector> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::InvalidInput(format!("p_hist = {h} outside [0, 1]")));
    }
    if h > 0.0 && m_hist == 0 {
        return Err(Error::InvalidInput("positive historical mass without historical clients".into()));
    }
    if h < 1.0 && m_hist == n.len() {
        return Err(Error::InvalidInput("positive fresh mass without fresh clients".into()));
    }
    let hist = group_allocation(n, 0..m_hist, h);
    let fresh = group_allocation(n, m_hist..n.len(), 1.0 - h);
    ImportanceVector::from_masses(&hist.iter().zip(&fresh).map(|(a, b)| a + b).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fresh,
    Historical,
    Uniform,
    Ours,
    FixedPHist(f64),
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Fresh => "fresh".into(),
            Strategy::Historical => "historical".into(),
            Strategy::Uniform => "uniform".into(),
            Strategy::Ours => "ours".into(),
            Strategy::FixedPHist(h) => format!("p_hist_{h}"),
        }
    }
}

/// The p_hist grid used for the "optimal" baseline.
pub const P_HIST_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

/// Client importance prescribed by a strategy. `Ours` needs the estimated
/// coefficients.
pub fn strategy_importance(
    s: Strategy,
    n: &ImportanceVector,
    m_hist: usize,
    c_opt: Option<&BoundCoefficients>,
) -> Result<ImportanceVector> {
    match s {
        Strategy::Uniform => Ok(n.clone()),
        Strategy::Historical => fixed_p_hist(n, m_hist, 1.0),
        Strategy::Fresh => fixed_p_hist(n, m_hist, 0.0),
        Strategy::FixedPHist(h) => fixed_p_hist(n, m_hist, h),
        Strategy::Ours => {
            let c = c_opt.ok_or_else(|| Error::InvalidInput("the ours strategy needs bound coefficients".into()))?;
            if c.n != *n || c.m_hist != m_hist {
                return Err(Error::InvalidInput("bound coefficients describe a different federation".into()));
            }
            Ok(minimize_psi(c, 1e-10, 100_000)?.p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiOptimum {
    pub p: ImportanceVector,
    pub psi: f64,
    pub iterations: usize,
}

impl PsiOptimum {
    pub fn p_hist(&self, m_hist: usize) -> f64 {
        self.p[..m_hist].iter().sum()
    }
}

/// Simplex points used to certify a minimizer: the uniform, historical and
/// fresh allocations plus 10³ Dirichlet(1) draws.
fn certificate_points(c: &BoundCoefficients) -> Vec<Vec<f64>> {
    let m = c.num_clients();
    let mut points = vec![c.n.to_vec()];
    if c.m_hist > 0 {
        points.push(fixed_p_hist(&c.n, c.m_hist, 1.0).expect("historical clients exist").into());
    }
    if c.m_hist < m {
        points.push(fixed_p_hist(&c.n, c.m_hist, 0.0).expect("fresh clients exist").into());
    }
    let mut r = rng::stream(0x5eed, Purpose::Validation, m as u64, c.m_hist as u64);
    for _ in 0..1000 {
        let e: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut r)).collect();
        let s: f64 = e.iter().sum();
        points.push(e.iter().map(|x| x / s).collect());
    }
    points
}

/// Minimizes ψ over the simplex (c0 is ignored).
///
/// Projected gradient steps with backtracking along the projection arc;
/// when no backtracked step decreases ψ (at a kink) a diminishing
/// `η0/√k` subgradient step is taken instead, with `η0 = 1/(c1 + c2)`. The
/// best iterate is kept and stops once it improves by less than `tol` over
/// 100 iterations. The result is certified against the uniform, historical
/// and fresh allocations and 10³ random simplex points.
pub fn minimize_psi(c: &BoundCoefficients, tol: f64, max_iters: usize) -> Result<PsiOptimum> {
    c.validate()?;
    let m = c.num_clients();
    if c.c2 == 0.0 && c.c1 > 0.0 && c.m_hist > 0 {
        let p = fixed_p_hist(&c.n, c.m_hist, 1.0)?;
        let value = psi(&p, c)?;
        return Ok(PsiOptimum { p, psi: value, iterations: 0 });
    }
    if c.c1 == 0.0 || c.m_hist == m {
        // Only the spread term is left: argmin Σ p²/n on the simplex is n.
        let p = c.n.clone();
        let value = psi(&p, c)?;
        return Ok(PsiOptimum { p, psi: value, iterations: 0 });
    }

    let mut starts = vec![c.n.to_vec()];
    if c.m_hist > 0 {
        starts.push(fixed_p_hist(&c.n, c.m_hist, 1.0)?.into());
    }
    starts.push(fixed_p_hist(&c.n, c.m_hist, 0.0)?.into());
    let mut best = starts
        .into_iter()
        .map(|p| Ok((psi(&p, c)?, p)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one start");
    let eta0 = 1.0 / (c.c1 + c.c2);
    let mut p = best.1.clone();
    let mut value = best.0;
    let mut step = eta0;
    let mut last_check = best.0;
    let mut iterations = 0;
    for k in 1..=max_iters {
        iterations = k;
        let g = psi_subgradient(&p, c)?;
        let mut accepted = false;
        let mut s = (step * 2.0).min(1e6 * eta0);
        while s > 1e-14 * eta0 {
            let trial: Vec<f64> = p.iter().zip(&g).map(|(x, gx)| x - s * gx).collect();
            let q: Vec<f64> = project_simplex(&trial)?.into();
            let vq = psi(&q, c)?;
            let moved = dist(&q, &p);
            if vq <= value - moved * moved / (2.0 * s) && moved > 0.0 {
                p = q;
                value = vq;
                step = s;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            let gn = norm(&g).max(f64::MIN_POSITIVE);
            let trial: Vec<f64> = p
                .iter()
                .zip(&g)
                .map(|(x, gx)| x - eta0 / (k as f64).sqrt() * gx / gn)
                .collect();
            p = project_simplex(&trial)?.into();
            value = psi(&p, c)?;
            step = eta0;
        }
        if value < best.0 {
            best = (value, p.clone());
        }
        if k % 100 == 0 {
            if last_check - best.0 < tol {
                break;
            }
            last_check = best.0;
        }
    }

    let (best_value, best_point) = best;
    for point in certificate_points(c) {
        if best_value > psi(&point, c)? + tol {
            return Err(Error::NotConverged {
                iterations,
                best_value,
                best_point,
            });
        }
    }
    Ok(PsiOptimum {
        p: ImportanceVector::new(best_point)?,
        psi: best_value,
        iterations,
    })
}

/// Quantities entering the heuristic estimate of `c2/c1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedConstants {
    /// Loss bound `B̂`.
    pub b_hat: f64,
    /// Gradient bound `Ĝ`.
    pub g_hat: f64,
    /// Distance `D̂ = max_m ‖θ̂*_m − θ^(1)‖`.
    pub d_hat: f64,
    /// Parameter dimension `d`.
    pub d: usize,
    /// Total number of samples `N`.
    pub n: usize,
    pub m: usize,
    pub m_hist: usize,
}

/// `(B + √(d/N)) / (G·D·√(M − M_hist))`.
pub fn estimate_c_ratio(k: &EstimatedConstants) -> Result<f64> {
    if k.m <= k.m_hist {
        return Err(Error::InvalidInput("the ratio needs at least one fresh client".into()));
    }
    if !(k.g_hat > 0.0 && k.d_hat > 0.0) {
        return Err(Error::InvalidInput(format!(
            "gradient and distance estimates must be positive (G = {}, D = {})",
            k.g_hat, k.d_hat
        )));
    }
    if k.n == 0 {
        return Err(Error::InvalidInput("N must be positive".into()));
    }
    Ok((k.b_hat + (k.d as f64 / k.n as f64).sqrt()) / (k.g_hat * k.d_hat * ((k.m - k.m_hist) as f64).sqrt()))
}

/// Settings of the short local runs used to estimate the constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub steps: usize,
    pub eta: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: 10,
            eta: 0.1,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Runs `warmup.steps` projected SGD steps from `theta1` on each historical
/// client's data. `B̂` and `Ĝ` are the largest minibatch loss and gradient
/// norm seen, and `D̂` the farthest any client moved from `theta1`.
pub fn estimate_constants(
    model: &Model,
    historical: &[Vec<Example>],
    theta1: &[f64],
    warmup: &WarmupConfig,
    totals: (usize, usize),
    exec: Exec,
) -> Result<EstimatedConstants> {
    let (n_total, m_total) = totals;
    if historical.is_empty() {
        return Err(Error::InvalidInput("no historical clients to estimate constants from".into()));
    }
    if let Some(m) = historical.iter().position(|h| h.is_empty()) {
        return Err(Error::InvalidInput(format!("historical client {m} has no warmup data")));
    }
    if warmup.batch_size == 0 || !(warmup.eta > 0.0) {
        return Err(Error::InvalidInput("warmup needs a positive batch size and step".into()));
    }
    let theta1 = model.project(theta1)?.into_inner();
    let per_client = exec.map_range(historical.len(), |m| -> Result<(f64, f64, f64)> {
        let data = &historical[m];
        let mut r = rng::stream(warmup.seed, Purpose::Warmup, m as u64, 0);
        let mut theta = theta1.clone();
        let (mut b, mut g_max) = (0.0f64, 0.0f64);
        for _ in 0..warmup.steps {
            let size = warmup.batch_size.min(data.len());
            let picked: Vec<&Example> = rand::seq::index::sample(&mut r, data.len(), size)
                .into_iter()
                .map(|j| &data[j])
                .collect();
            let items: Vec<(&Example, f64)> = picked.iter().map(|z| (*z, 1.0)).collect();
            let loss: f64 = picked.iter().map(|z| model.loss.value(&theta, z)).sum::<Result<f64>>()? / size as f64;
            let g = minibatch_gradient(&model.loss, &theta, &items, size, &mut r)?;
            b = b.max(loss);
            g_max = g_max.max(norm(&g));
            let moved: Vec<f64> = theta.iter().zip(&g).map(|(x, gx)| x - warmup.eta * gx).collect();
            theta = model.project(&moved)?.into_inner();
        }
        Ok((b, g_max, dist(&theta, &theta1)))
    });
    let mut k = EstimatedConstants {
        b_hat: 0.0,
        g_hat: 0.0,
        d_hat: 0.0,
        d: model.dim(),
        n: n_total,
        m: m_total,
        m_hist: historical.len(),
    };
    for item in per_client {
        let (b, g, d) = item?;
        k.b_hat = k.b_hat.max(b);
        k.g_hat = k.g_hat.max(g);
        k.d_hat = k.d_hat.max(d);
    }
    Ok(k)
}

/// Relative sizes with an equal split inside each group.
pub fn split_sizes(m: usize, m_hist: usize, hist_share: f64) -> Result<ImportanceVector> {
    if m_hist == 0 || m_hist >= m {
        return Err(Error::InvalidInput("need both historical and fresh clients".into()));
    }
    if !(hist_share > 0.0 && hist_share < 1.0) {
        return Err(Error::InvalidInput(format!("historical share {hist_share} outside (0, 1)")));
    }
    let h = hist_share / m_hist as f64;
    let f = (1.0 - hist_share) / (m - m_hist) as f64;
    ImportanceVector::new((0..m).map(|i| if i < m_hist { h } else { f }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub c2_over_c1: f64,
    pub n_hist_over_n: f64,
    pub p_hist_star: f64,
    pub n_eff_term: f64,
    pub noise_term: f64,
    pub psi_star: f64,
    pub psi_hist: f64,
    pub psi_unif: f64,
}

/// One row per `(N_hist/N, c2/c1)` pair, ordered by share then ratio.
pub fn emit_bound_curves(ratios: &[f64], shares: &[f64], m: usize, m_hist: usize, exec: Exec) -> Result<Vec<CurveRow>> {
    if ratios.is_empty() || shares.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let jobs: Vec<(f64, f64)> = shares
        .iter()
        .flat_map(|&s| ratios.iter().map(move |&r| (s, r)))
        .collect();
    exec.map(&jobs, |&(share, ratio)| {
        let n = split_sizes(m, m_hist, share)?;
        let c = BoundCoefficients::from_ratio(ratio, n.clone(), m_hist)?;
        let opt = minimize_psi(&c, 1e-12, 200_000)?;
        let p = opt.p.as_slice();
        let hist = fixed_p_hist(&n, m_hist, 1.0)?;
        Ok(CurveRow {
            c2_over_c1: ratio,
            n_hist_over_n: share,
            p_hist_star: opt.p_hist(m_hist),
            n_eff_term: p.iter().zip(n.iter()).map(|(x, nm)| x * x / nm).sum(),
            noise_term: p[m_hist..].iter().map(|x| x * x).sum::<f64>().sqrt(),
            psi_star: opt.psi,
            psi_hist: psi(&hist, &c)?,
            psi_unif: psi(&n, &c)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_curves_csv<W: Write>(rows: &[CurveRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "c2_over_c1",
        "N_hist_over_N",
        "p_hist_star",
        "n_eff_term",
        "noise_term",
        "psi_star",
        "psi_hist",
        "psi_unif",
    ])?;
    for r in rows {
        out.write_record(
            [
                r.c2_over_c1,
                r.n_hist_over_n,
                r.p_hist_star,
                r.n_eff_term,
                r.noise_term,
                r.psi_star,
                r.psi_hist,
                r.psi_unif,
            ]
            .map(fmt17),
        )?;
    }
    out.flush()?;
    Ok(())
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

/// A uniformly random simplex point.
pub fn random_simplex_point<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Domain, LossSpec, SampleMeta};
    use proptest::prelude::{any, prop};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn iv(p: &[f64]) -> ImportanceVector {
        ImportanceVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn psi_examples() {
        let c = BoundCoefficients::new(0.0, 1.0, 1.0, iv(&[0.5, 0.5]), 1).unwrap();
        assert!((psi(&[0.5, 0.5], &c).unwrap() - 1.5).abs() < 1e-15);
        let c = BoundCoefficients::new(0.0, 3.0, 0.0, iv(&[0.25, 0.25, 0.5]), 2).unwrap();
        assert_eq!(psi(&[0.4, 0.6, 0.0], &c).unwrap(), 0.0);
        assert!(psi(&[1.0], &c).is_err());
        assert!(BoundCoefficients::new(0.0, 1.0, 1.0, iv(&[1.0, 0.0]), 1).is_err());
    }

    #[test]
    fn psi_reassociation() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let m = r.random_range(2..30);
            let n = iv(&random_simplex_point(m, &mut r));
            let c = BoundCoefficients::new(0.3, r.random(), r.random(), n.clone(), r.random_range(0..=m)).unwrap();
            let p = random_simplex_point(m, &mut r);
            let mut fresh = 0.0;
            let mut spread = 0.0;
            for i in (0..m).rev() {
                spread += p[i] / n[i] * p[i];
                if i >= c.m_hist {
                    fresh += p[i] * p[i];
                }
            }
            let other = c.c2 * spread.sqrt() + c.c1 * fresh.sqrt() + c.c0;
            assert!((psi(&p, &c).unwrap() - other).abs() < 1e-12);
        }
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let m = r.random_range(2..8);
            let n = iv(&random_simplex_point(m, &mut r));
            let m_hist = r.random_range(0..m);
            let c = BoundCoefficients::new(0.0, r.random_range(0.1..2.0), r.random_range(0.1..2.0), n, m_hist).unwrap();
            let p: Vec<f64> = random_simplex_point(m, &mut r).iter().map(|x| 0.05 + x).collect();
            let g = psi_subgradient(&p, &c).unwrap();
            for i in 0..m {
                let h = 1e-6 * p[i];
                let mut a = p.clone();
                let mut b = p.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (psi(&a, &c).unwrap() - psi(&b, &c).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn subgradient_corner_choices() {
        let c = BoundCoefficients::new(0.0, 1.0, 0.0, iv(&[0.5, 0.25, 0.25]), 1).unwrap();
        assert_eq!(psi_subgradient(&[1.0, 0.0, 0.0], &c).unwrap(), vec![0.0; 3]);
        let c = BoundCoefficients::new(5.0, 1.0, 2.0, iv(&[0.5, 0.25, 0.25]), 1).unwrap();
        let scaled = BoundCoefficients::new(5.0, 3.0, 6.0, c.n.clone(), 1).unwrap();
        let p = [0.2, 0.5, 0.3];
        let g = psi_subgradient(&p, &c).unwrap();
        let gs = psi_subgradient(&p, &scaled).unwrap();
        for i in 0..3 {
            assert!((gs[i] - 3.0 * g[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]).unwrap().as_slice(), &[0.2, 0.3, 0.5]);
        assert_eq!(project_simplex(&[0.6, 0.6]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(project_simplex(&[5.0, -1.0]).unwrap().as_slice(), &[1.0, 0.0]);
        assert!(project_simplex(&[f64::NAN]).is_err());
    }

    /// Exact projection by enumerating supports: on support S the KKT
    /// conditions give `p_S = v_S − (Σ v_S − 1)/|S|`.
    pub(crate) fn projection_by_enumeration(v: &[f64]) -> Vec<f64> {
        let m = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << m) {
            let members: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let shift = (members.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / members.len() as f64;
            let mut p = vec![0.0; m];
            if members.iter().any(|&i| v[i] - shift < 0.0) {
                continue;
            }
            for &i in &members {
                p[i] = v[i] - shift;
            }
            let d = dist(&p, v);
            if best.as_ref().is_none_or(|b| d < b.0) {
                best = Some((d, p));
            }
        }
        best.expect("the full support with a large shift is feasible").1
    }

    fn grid_best(v: &[f64], steps: usize) -> f64 {
        // Coarse grid over the simplex, used to sanity-check the enumeration.
        fn rec(v: &[f64], steps: usize, left: usize, prefix: &mut Vec<f64>, best: &mut f64) {
            if prefix.len() + 1 == v.len() {
                prefix.push(left as f64 / steps as f64);
                *best = best.min(dist(prefix, v));
                prefix.pop();
                return;
            }
            for k in 0..=left {
                prefix.push(k as f64 / steps as f64);
                rec(v, steps, left - k, prefix, best);
                prefix.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(v, steps, steps, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn projection_matches_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = r.random_range(1..=5);
            let v: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..2.0)).collect();
            let p = project_simplex(&v).unwrap();
            let oracle = projection_by_enumeration(&v);
            for i in 0..m {
                assert!((p[i] - oracle[i]).abs() < 1e-8);
            }
            assert!(dist(&oracle, &v) <= grid_best(&v, 20) + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn projection_kkt(v in prop::collection::vec(-3.0f64..3.0, 1..12)) {
            let p = project_simplex(&v).unwrap();
            let support: Vec<usize> = (0..v.len()).filter(|&i| p[i] > 0.0).collect();
            prop_assert!(!support.is_empty());
            let theta = v[support[0]] - p[support[0]];
            for i in 0..v.len() {
                if p[i] > 0.0 {
                    prop_assert!((v[i] - theta - p[i]).abs() < 1e-8);
                } else {
                    prop_assert!(v[i] - theta <= 1e-8);
                }
            }
        }

        #[test]
        fn psi_is_convex(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let m = r.random_range(2..20);
            let n = iv(&random_simplex_point(m, &mut r));
            let c = BoundCoefficients::new(r.random(), r.random(), r.random(), n, r.random_range(0..=m)).unwrap();
            let p = random_simplex_point(m, &mut r);
            let q = random_simplex_point(m, &mut r);
            let g: f64 = r.random();
            let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| g * a + (1.0 - g) * b).collect();
            let lhs = psi(&mix, &c).unwrap();
            let rhs = g * psi(&p, &c).unwrap() + (1.0 - g) * psi(&q, &c).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn corner_minimizers() {
        let n = iv(&[0.1, 0.3, 0.2, 0.4]);
        let c = BoundCoefficients::new(1.0, 1.0, 0.0, n.clone(), 2).unwrap();
        let opt = minimize_psi(&c, 1e-10, 10_000).unwrap();
        assert!((opt.p_hist(2) - 1.0).abs() < 1e-4);
        assert!((opt.p[0] - 0.25).abs() < 1e-12 && (opt.p[1] - 0.75).abs() < 1e-12);
        let c = BoundCoefficients::new(0.0, 0.0, 1.0, n.clone(), 2).unwrap();
        let opt = minimize_psi(&c, 1e-10, 10_000).unwrap();
        for i in 0..4 {
            assert!((opt.p[i] - n[i]).abs() < 1e-6);
        }
    }

    /// With a single fresh client and equal sizes within the historical group,
    /// the optimum solves `u/√(1+u²) = √(h0(1−h0))·c1/c2` with
    /// `p_hist = h0 + u·√(h0(1−h0))`, or `p_hist = 1` when the right side is ≥ 1.
    fn single_fresh_optimum(h0: f64, ratio: f64) -> f64 {
        let s = (h0 * (1.0 - h0)).sqrt();
        let rhs = s / ratio;
        if rhs >= 1.0 {
            return 1.0;
        }
        let u = rhs / (1.0 - rhs * rhs).sqrt();
        (h0 + u * s).min(1.0)
    }

    #[test]
    fn minimizer_matches_single_fresh_closed_form() {
        for &(h0, ratio) in &[(0.2, 0.092), (0.2, 1.0), (0.2, 3.0), (0.2, 10.0), (0.5, 0.7), (0.05, 0.5)] {
            let n = split_sizes(11, 10, h0).unwrap();
            let c = BoundCoefficients::from_ratio(ratio, n, 10).unwrap();
            let opt = minimize_psi(&c, 1e-12, 100_000).unwrap();
            let expected = single_fresh_optimum(h0, ratio);
            assert!((opt.p_hist(10) - expected).abs() < 1e-4, "h0 {h0} ratio {ratio}: {} vs {expected}", opt.p_hist(10));
        }
    }

    #[test]
    fn minimizer_dominates_random_points() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = r.random_range(2..12);
            let n = iv(&random_simplex_point(m, &mut r).iter().map(|x| (x + 0.01) / (1.0 + 0.01 * m as f64)).collect::<Vec<_>>());
            let c = BoundCoefficients::new(0.0, r.random_range(0.01..1.0), r.random_range(0.01..1.0), n, r.random_range(0..m)).unwrap();
            let opt = minimize_psi(&c, 1e-10, 100_000).unwrap();
            for _ in 0..200 {
                let p = random_simplex_point(m, &mut r);
                assert!(opt.psi <= psi(&p, &c).unwrap() + 1e-10);
            }
        }
    }

    #[test]
    fn ratio_examples() {
        let k = EstimatedConstants {
            b_hat: 1.0,
            g_hat: 1.0,
            d_hat: 1.0,
            d: 8,
            n: 2,
            m: 5,
            m_hist: 1,
        };
        assert!((estimate_c_ratio(&k).unwrap() - 1.5).abs() < 1e-15);
        let doubled = EstimatedConstants { g_hat: 2.0, ..k.clone() };
        assert!((estimate_c_ratio(&doubled).unwrap() - 0.75).abs() < 1e-15);
        assert!(estimate_c_ratio(&EstimatedConstants { m: 1, ..k.clone() }).is_err());
        assert!(estimate_c_ratio(&EstimatedConstants { d_hat: 0.0, ..k }).is_err());
    }

    fn example(features: Vec<f64>, label: f64, i: usize) -> Example {
        Example {
            meta: SampleMeta {
                client_id: 0,
                arrival_round: 1,
                global_index: i,
            },
            features,
            label,
        }
    }

    #[test]
    fn warmup_constants() {
        let domain = Domain::centered_ball(2, 50.0).unwrap();
        let model = Model::new(LossSpec::squared(&domain, 2.0, 5.0), domain);
        // ½((θ0 − 3)² + (θ1 + 1)²) averaged over two samples: minimizer (3, −1).
        let data = vec![example(vec![1.0, 0.0], 3.0, 1), example(vec![0.0, 1.0], -1.0, 2)];
        let none = WarmupConfig {
            steps: 0,
            ..WarmupConfig::default()
        };
        let k0 = estimate_constants(&model, std::slice::from_ref(&data), &[0.0, 0.0], &none, (2, 2), Exec::Sequential).unwrap();
        assert_eq!(k0.d_hat, 0.0);
        let long = WarmupConfig {
            steps: 2000,
            eta: 0.5,
            batch_size: 2,
            seed: 0,
        };
        let k = estimate_constants(&model, std::slice::from_ref(&data), &[0.0, 0.0], &long, (2, 2), Exec::Sequential).unwrap();
        assert!((k.d_hat - 10f64.sqrt()).abs() < 1e-9);
        let again = estimate_constants(&model, &[data], &[0.0, 0.0], &long, (2, 2), Exec::Parallel).unwrap();
        assert_eq!(k, again);
        assert!(estimate_constants(&model, &[], &[0.0, 0.0], &long, (2, 2), Exec::Sequential).is_err());
    }

    #[test]
    fn strategy_examples() {
        let n = iv(&[0.1, 0.3, 0.6]);
        let h = strategy_importance(Strategy::Historical, &n, 2, None).unwrap();
        assert!(dist(&h, &[0.25, 0.75, 0.0]) < 1e-15);
        assert_eq!(strategy_importance(Strategy::Uniform, &n, 2, None).unwrap(), n);
        let n = iv(&[0.2, 0.4, 0.4]);
        let f = strategy_importance(Strategy::FixedPHist(0.5), &n, 1, None).unwrap();
        assert!(dist(&f, &[0.5, 0.25, 0.25]) < 1e-15);
        let fresh = strategy_importance(Strategy::Fresh, &n, 1, None).unwrap();
        assert!(dist(&fresh, &[0.0, 0.5, 0.5]) < 1e-15);
        assert!(strategy_importance(Strategy::FixedPHist(0.5), &n, 0, None).is_err());
        assert!(strategy_importance(Strategy::Ours, &n, 1, None).is_err());
    }

    #[test]
    fn curve_rows_and_limits() {
        let ratios = log_grid(1e-3, 10.0, 5);
        assert!((ratios[0] - 1e-3).abs() < 1e-18 && (ratios[4] - 10.0).abs() < 1e-12);
        let rows = emit_bound_curves(&ratios, &[0.2, 0.5], 50, 25, Exec::default()).unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows {
            assert!(r.psi_hist >= r.psi_star - 1e-12 && r.psi_unif >= r.psi_star - 1e-12);
        }
        assert!((rows[0].p_hist_star - 1.0).abs() < 0.02);
        assert!((rows[4].p_hist_star - 0.2).abs() < 0.02);
        let mut buf = Vec::new();
        write_curves_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("c2_over_c1,N_hist_over_N,p_hist_star"));
    }
}
