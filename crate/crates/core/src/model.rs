//! Parameters, losses, and the convex parameter domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when deciding whether a point already lies in the
/// domain. Projected points are accepted by the same test, which makes
/// projection idempotent bit for bit.
const INSIDE_RTOL: f64 = 1e-12;

/// Points farther than this (relative to the domain scale) are rejected by the
/// checked loss entry points.
const MEMBERSHIP_RTOL: f64 = 1e-9;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A model parameter θ. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(Error::NonFinite("parameter vector"))
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0
    }
}

impl std::ops::Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Arrival metadata of a sample. Memory rules and weight schemes only ever
/// see this part of an [`Example`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleMeta {
    pub client_id: usize,
    pub arrival_round: usize,
    /// 1-based position of the sample in its client's stream.
    pub global_index: usize,
}

/// One labeled sample `z = (x, y)`.
///
/// Labels are 0/1 for the logistic loss, real for the squared loss, and 1 or 2
/// for [`LossKind::AdversarialTwoPoint`] (whose features are ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub meta: SampleMeta,
    pub features: Vec<f64>,
    pub label: f64,
}

/// The parameter set Θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Ball { center: Vec<f64>, radius: f64 },
    /// Axis-aligned box, used only by the two-point lower-bound instance.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl Domain {
    pub fn centered_ball(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidInput(format!("ball radius must be > 0, got {radius}")));
        }
        Ok(Domain::Ball {
            center: vec![0.0; dim],
            radius,
        })
    }

    pub fn cube(dim: usize, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidInput(format!("box half-width must be > 0, got {half_width}")));
        }
        Ok(Domain::Box {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.len(),
            Domain::Box { lower, .. } => lower.len(),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => 2.0 * radius,
            Domain::Box { lower, upper } => dist(lower, upper),
        }
    }

    /// Largest Euclidean norm of a point of the domain.
    pub fn max_norm(&self) -> f64 {
        match self {
            Domain::Ball { center, radius } => norm(center) + radius,
            Domain::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| l.abs().max(u.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    fn scale(&self) -> f64 {
        self.diameter().max(1.0)
    }

    /// Euclidean distance from `v` to the domain.
    pub fn distance(&self, v: &[f64]) -> f64 {
        match self {
            Domain::Ball { center, radius } => (dist(v, center) - radius).max(0.0),
            Domain::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| {
                    let d = if x < l { l - x } else if x > u { x - u } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        self.distance(v) <= MEMBERSHIP_RTOL * self.scale()
    }

    /// Euclidean projection onto the domain. Points already inside are
    /// returned unchanged.
    pub fn project(&self, v: &[f64]) -> Result<ParameterVector> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("projection input"));
        }
        let out = match self {
            Domain::Ball { center, radius } => {
                let r = dist(v, center);
                if r <= radius * (1.0 + INSIDE_RTOL) {
                    v.to_vec()
                } else {
                    let s = radius / r;
                    v.iter().zip(center).map(|(x, c)| c + s * (x - c)).collect()
                }
            }
            Domain::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| x.clamp(*l, *u))
                .collect(),
        };
        Ok(ParameterVector(out))
    }

    /// A point drawn uniformly from the domain.
    pub fn sample_uniform<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Domain::Ball { center, radius } => {
                let d = center.len();
                let dir: Vec<f64> = (0..d)
                    .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
                    .collect();
                let len = norm(&dir).max(f64::MIN_POSITIVE);
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                center.iter().zip(&dir).map(|(c, x)| c + r * x / len).collect()
            }
            Domain::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| rng.random_range(*l..=*u))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy of `sigmoid(<x, θ>)` against a 0/1 label.
    Logistic,
    /// `½ (<x, θ> − y)²`.
    Squared,
    /// The two-point quadratic problem on `[-1, 1]²` used to show that the
    /// gradient-variability term of the optimization error cannot vanish.
    AdversarialTwoPoint,
}

/// A loss together with its bound `B` and smoothness constant `L` over the
/// domain it was built for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub bound_b: f64,
    pub smoothness_l: f64,
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn adversarial_value(theta: &[f64], label: f64) -> f64 {
    let (a, b) = (theta[0], theta[1]);
    if label == 1.0 {
        (a + 1.0).powi(2) + 0.5 * (a + b + 1.0).powi(2)
    } else {
        0.5 * (a - 1.0).powi(2) + 0.5 * (a + b - 1.0).powi(2)
    }
}

impl LossSpec {
    /// Logistic loss over `domain` for features with norm at most
    /// `max_feature_norm`: `B = log(1 + exp(R·‖x‖max))`, `L = ‖x‖max² / 4`.
    pub fn logistic(domain: &Domain, max_feature_norm: f64) -> Self {
        let u = domain.max_norm() * max_feature_norm;
        LossSpec {
            kind: LossKind::Logistic,
            bound_b: softplus(u),
            smoothness_l: (max_feature_norm * max_feature_norm / 4.0).max(f64::MIN_POSITIVE),
        }
    }

    /// Squared loss with constants taken from the data range.
    pub fn squared(domain: &Domain, max_feature_norm: f64, max_abs_label: f64) -> Self {
        let u = domain.max_norm() * max_feature_norm + max_abs_label;
        LossSpec {
            kind: LossKind::Squared,
            bound_b: 0.5 * u * u,
            smoothness_l: (max_feature_norm * max_feature_norm).max(f64::MIN_POSITIVE),
        }
    }

    /// The two-point instance on `[-1, 1]²`. `B` is the largest corner value
    /// (both losses are convex, so the maximum over the box sits at a vertex)
    /// and `L = 2 + √2` is the top Hessian eigenvalue.
    pub fn adversarial_two_point() -> Self {
        let corners = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        let bound_b = corners
            .iter()
            .flat_map(|c| [adversarial_value(c, 1.0), adversarial_value(c, 2.0)])
            .fold(0.0, f64::max);
        LossSpec {
            kind: LossKind::AdversarialTwoPoint,
            bound_b,
            smoothness_l: 2.0 + std::f64::consts::SQRT_2,
        }
    }

    /// `G = √(2LB)`, a bound on gradient norms over the domain.
    pub fn gradient_bound(&self) -> f64 {
        (2.0 * self.smoothness_l * self.bound_b).sqrt()
    }

    /// Upper bound `2G` on the per-sample gradient noise σ₀.
    pub fn sigma0_bound(&self) -> f64 {
        2.0 * self.gradient_bound()
    }

    /// Upper bound `2G` on the client dissimilarity ζ.
    pub fn zeta_bound(&self) -> f64 {
        2.0 * self.gradient_bound()
    }

    fn check_dim(&self, theta: &[f64], z: &Example) -> Result<()> {
        let expected = match self.kind {
            LossKind::AdversarialTwoPoint => 2,
            _ => z.features.len(),
        };
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Loss value at any θ of matching dimension. Use [`Model::loss_value`]
    /// for the domain-checked version.
    pub fn value(&self, theta: &[f64], z: &Example) -> Result<f64> {
        self.check_dim(theta, z)?;
        Ok(self.value_unchecked(theta, z))
    }

    pub(crate) fn value_unchecked(&self, theta: &[f64], z: &Example) -> f64 {
        match self.kind {
            LossKind::Logistic => {
                let u = dot(&z.features, theta);
                softplus(u) - z.label * u
            }
            LossKind::Squared => {
                let r = dot(&z.features, theta) - z.label;
                0.5 * r * r
            }
            LossKind::AdversarialTwoPoint => adversarial_value(theta, z.label),
        }
    }

    pub fn grad(&self, theta: &[f64], z: &Example) -> Result<Vec<f64>> {
        self.check_dim(theta, z)?;
        let mut g = vec![0.0; theta.len()];
        self.add_grad(theta, z, 1.0, &mut g);
        Ok(g)
    }

    /// `acc += coef · ∇ℓ(θ; z)`; dimensions are the caller's responsibility.
    pub(crate) fn add_grad(&self, theta: &[f64], z: &Example, coef: f64, acc: &mut [f64]) {
        match self.kind {
            LossKind::Logistic | LossKind::Squared => {
                let u = dot(&z.features, theta);
                let r = match self.kind {
                    LossKind::Logistic => sigmoid(u) - z.label,
                    _ => u - z.label,
                };
                for (a, x) in acc.iter_mut().zip(&z.features) {
                    *a += coef * (r * x);
                }
            }
            LossKind::AdversarialTwoPoint => {
                let (a, b) = (theta[0], theta[1]);
                let (g0, g1) = if z.label == 1.0 {
                    let s = a + b + 1.0;
                    (2.0 * (a + 1.0) + s, s)
                } else {
                    let s = a + b - 1.0;
                    ((a - 1.0) + s, s)
                };
                acc[0] += coef * g0;
                acc[1] += coef * g1;
            }
        }
    }

    /// Whether the model classifies `z` correctly (predicting 1 when
    /// `<x, θ> ≥ 0`).
    pub fn correct(&self, theta: &[f64], z: &Example) -> Result<bool> {
        match self.kind {
            LossKind::Logistic => {
                self.check_dim(theta, z)?;
                let predicted = if dot(&z.features, theta) >= 0.0 { 1.0 } else { 0.0 };
                Ok(predicted == z.label)
            }
            _ => Err(Error::AccuracyUndefined),
        }
    }
}

/// A loss bound to its domain; the checked entry points refuse parameters
/// outside Θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub loss: LossSpec,
    pub domain: Domain,
}

impl Model {
    pub fn new(loss: LossSpec, domain: Domain) -> Self {
        Model { loss, domain }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn check_inside(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if !self.domain.contains(theta) {
            return Err(Error::OutsideDomain {
                distance: self.domain.distance(theta),
            });
        }
        Ok(())
    }

    pub fn loss_value(&self, theta: &[f64], z: &Example) -> Result<f64> {
        self.check_inside(theta)?;
        self.loss.value(theta, z)
    }

    pub fn loss_grad(&self, theta: &[f64], z: &Example) -> Result<ParameterVector> {
        self.check_inside(theta)?;
        ParameterVector::new(self.loss.grad(theta, z)?)
    }

    pub fn project(&self, v: &[f64]) -> Result<ParameterVector> {
        self.domain.project(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex(features: Vec<f64>, label: f64) -> Example {
        Example {
            meta: SampleMeta {
                client_id: 0,
                arrival_round: 1,
                global_index: 1,
            },
            features,
            label,
        }
    }

    fn adversarial_model() -> Model {
        Model::new(LossSpec::adversarial_two_point(), Domain::cube(2, 1.0).unwrap())
    }

    #[test]
    fn adversarial_values() {
        let m = adversarial_model();
        assert_eq!(m.loss_value(&[0.0, 0.0], &ex(vec![], 1.0)).unwrap(), 1.5);
        assert_eq!(m.loss_value(&[-1.0, 1.0], &ex(vec![], 1.0)).unwrap(), 0.5);
        assert_eq!(m.loss_grad(&[0.0, 0.0], &ex(vec![], 1.0)).unwrap().as_slice(), &[3.0, 1.0]);
        assert_eq!(m.loss.bound_b, 8.5);
    }

    #[test]
    fn logistic_at_origin() {
        let d = Domain::centered_ball(2, 1.0).unwrap();
        let m = Model::new(LossSpec::logistic(&d, 1.0), d);
        let z = ex(vec![1.0, 0.0], 1.0);
        assert!((m.loss_value(&[0.0, 0.0], &z).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(m.loss_grad(&[0.0, 0.0], &z).unwrap().as_slice(), &[-0.5, 0.0]);
    }

    #[test]
    fn checked_entry_points_reject_bad_inputs() {
        let d = Domain::centered_ball(2, 1.0).unwrap();
        let m = Model::new(LossSpec::logistic(&d, 1.0), d);
        let z = ex(vec![1.0, 0.0], 1.0);
        assert!(matches!(m.loss_value(&[2.0, 0.0], &z), Err(Error::OutsideDomain { .. })));
        assert!(matches!(
            m.loss_grad(&[0.0, 0.0, 0.0], &z),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ball_projection() {
        let d = Domain::centered_ball(2, 1.0).unwrap();
        assert_eq!(d.project(&[0.3, 0.4]).unwrap().as_slice(), &[0.3, 0.4]);
        assert_eq!(d.project(&[2.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn projection_variational_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let d = Domain::Ball {
            center: vec![0.5, -0.2, 0.0, 1.0],
            radius: 1.5,
        };
        for _ in 0..20 {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect();
            let p = d.project(&v).unwrap();
            for _ in 0..1000 {
                // Rejection-sample a point of the ball.
                let q = loop {
                    let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
                    let q: Vec<f64> = q
                        .iter()
                        .zip([0.5, -0.2, 0.0, 1.0])
                        .map(|(a, c)| a + c)
                        .collect();
                    if d.contains(&q) {
                        break q;
                    }
                };
                let vi: f64 = v
                    .iter()
                    .zip(p.iter())
                    .zip(&q)
                    .map(|((vi, pi), qi)| (vi - pi) * (qi - pi))
                    .sum();
                assert!(vi <= 1e-10, "variational inequality violated: {vi}");
            }
        }
    }

    #[test]
    fn logistic_bounds_hold_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 5;
        let d = Domain::centered_ball(dim, 2.0).unwrap();
        let xmax = (dim as f64).sqrt();
        let loss = LossSpec::logistic(&d, xmax);
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let theta = d.project(&v).unwrap();
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = ex(x, if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            let l = loss.value(&theta, &z).unwrap();
            assert!((0.0..=loss.bound_b).contains(&l));
            assert!(norm(&loss.grad(&theta, &z).unwrap()) <= loss.gradient_bound() + 1e-12);
        }
    }
}
