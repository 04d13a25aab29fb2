//! The two-point instance on `[-1, 1]²`: one client with memory 1 (FIFO)
//! sees `z₁` in round 1 and `z₂` halfway through the horizon. Both samples are
//! uniform over `{1, 2}`; the check averages over the four realizations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryRule;
use crate::model::{Domain, Example, LossSpec, Model, SampleMeta};
use crate::par::Exec;
use crate::stream::{ClientStream, CountingProcess, LabeledPoint, SampleSource};
use crate::trainer::{run, weighted_risk, FedClient, Federation, TrainConfig};
use crate::weighting::WeightScheme;

/// Random probes of Θ used for the probe-max variant of σ̂².
pub const PROBES: usize = 16;

/// Minimizer of `w·ℓ(θ;1) + (1−w)·ℓ(θ;2)`; it lies inside the box for every
/// `w ∈ [0, 1]`.
pub fn closed_form_minimizer(w: f64) -> [f64; 2] {
    let a = (1.0 - 3.0 * w) / (1.0 + w);
    [a, 1.0 - 2.0 * w - a]
}

/// Minimizer along the line `θ₂ = 0`, clamped to the box.
pub fn line_minimizer(w: f64) -> [f64; 2] {
    [((1.0 - 2.5 * w) / (1.0 + 0.5 * w)).clamp(-1.0, 1.0), 0.0]
}

fn model() -> Model {
    Model::new(LossSpec::adversarial_two_point(), Domain::cube(2, 1.0).expect("valid box"))
}

fn sample(label: f64, index: usize) -> Example {
    Example {
        meta: SampleMeta {
            client_id: 0,
            arrival_round: 0,
            global_index: index,
        },
        features: vec![],
        label,
    }
}

/// `w·ℓ(θ;1) + (1−w)·ℓ(θ;2)`.
pub fn risk(theta: &[f64], w: f64) -> f64 {
    let (one, two) = (sample(1.0, 1), sample(2.0, 2));
    weighted_risk(&model().loss, theta, &[(&one, w), (&two, 1.0 - w)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub z1: u8,
    pub z2: u8,
    /// Weight of label 1 in the weighted ERM.
    pub w: f64,
    pub averaged_model: [f64; 2],
    pub eps_opt: f64,
    pub sigma_hat_sq: f64,
    pub sigma_hat_sq_probe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRow {
    pub rounds: usize,
    pub eta: f64,
    /// Total round mass of the rounds in which `z₁` is in memory.
    pub q: f64,
    pub theta1_star: f64,
    pub eps_opt: f64,
    pub sigma_hat_sq: f64,
    pub sigma_hat_sq_probe: f64,
    pub threshold: f64,
    pub eps_12: f64,
    pub eps_21: f64,
    /// `min over the line θ₂ = 0` minus the unrestricted minimum, at `w = q`.
    pub line_gap: f64,
    /// `6·q(1−q)`.
    pub claimed_line_gap: f64,
    pub passed: bool,
    pub realizations: Vec<Realization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub rows: Vec<AdversarialRow>,
}

impl AdversarialReport {
    /// Verdict for the largest horizon.
    pub fn passed(&self) -> bool {
        self.rows.iter().max_by_key(|r| r.rounds).is_some_and(|r| r.passed)
    }
}

fn realization(rounds: usize, z1: u8, z2: u8, exec: Exec) -> Result<(Realization, f64)> {
    let points = [z1, z2]
        .iter()
        .map(|&z| LabeledPoint {
            features: vec![],
            label: f64::from(z),
        })
        .collect();
    let process = CountingProcess::Pulses {
        n0: 1,
        period: rounds / 2,
    };
    let fed = Federation {
        model: model(),
        clients: vec![FedClient {
            stream: ClientStream::new(0, process, SampleSource::Fixed(points), Some(1), 0)?,
            rule: MemoryRule::Fifo,
            capacity: 1,
        }],
        scheme: WeightScheme::UnitWeights,
    };
    let mut cfg = TrainConfig::new(rounds, 1, 1, 1.0 / (rounds as f64).sqrt());
    cfg.sigma_probes = PROBES;
    cfg.seed = rounds as u64;
    cfg.exec = exec;
    cfg.init = Some(vec![0.0, 0.0]);
    let result = run(fed, &cfg)?;
    // Ratio of mass sums rather than a sum of shares, so q = 1/2 exactly.
    let masses = (1..=rounds).map(|t| result.trace.round_mass(t)).collect::<Result<Vec<f64>>>()?;
    let q = masses[..rounds / 2].iter().sum::<f64>() / masses.iter().sum::<f64>();
    let w = if z1 == 1 { q } else { 0.0 } + if z2 == 1 { 1.0 - q } else { 0.0 };
    let theta = result.averaged_model.as_slice();
    let averaged_model = [theta[0], theta[1]];
    let eps_opt = risk(theta, w) - risk(&closed_form_minimizer(w), w);
    if !eps_opt.is_finite() {
        return Err(Error::NonFinite("optimization error"));
    }
    Ok((
        Realization {
            z1,
            z2,
            w,
            averaged_model,
            eps_opt,
            sigma_hat_sq: result.sigma.value,
            sigma_hat_sq_probe: result.sigma.probe_max.unwrap_or(result.sigma.value),
        },
        q,
    ))
}

/// Runs the instance for each horizon and compares the expected optimization
/// error with `(3/20)·σ̂²`.
pub fn run_adversarial_check(horizons: &[usize], exec: Exec) -> Result<AdversarialReport> {
    if horizons.is_empty() {
        return Err(Error::InvalidInput("at least one horizon is required".into()));
    }
    if let Some(t) = horizons.iter().find(|&&t| t < 2 || t % 2 == 1) {
        return Err(Error::InvalidInput(format!("horizon {t} must be even and at least 2")));
    }
    let mut rows = Vec::new();
    for &rounds in horizons {
        let combos = [(1u8, 1u8), (1, 2), (2, 1), (2, 2)];
        let runs = exec
            .map(&combos, |&(a, b)| realization(rounds, a, b, Exec::Sequential))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let q = runs[0].1;
        let realizations: Vec<Realization> = runs.into_iter().map(|r| r.0).collect();
        let mean = |f: &dyn Fn(&Realization) -> f64| realizations.iter().map(f).sum::<f64>() / 4.0;
        let eps_opt = mean(&|r| r.eps_opt);
        let sigma_hat_sq = mean(&|r| r.sigma_hat_sq);
        let threshold = 0.15 * sigma_hat_sq;
        rows.push(AdversarialRow {
            rounds,
            eta: 1.0 / (rounds as f64).sqrt(),
            q,
            theta1_star: closed_form_minimizer(q)[0],
            eps_opt,
            sigma_hat_sq,
            sigma_hat_sq_probe: mean(&|r| r.sigma_hat_sq_probe),
            threshold,
            eps_12: realizations[1].eps_opt,
            eps_21: realizations[2].eps_opt,
            line_gap: risk(&line_minimizer(q), q) - risk(&closed_form_minimizer(q), q),
            claimed_line_gap: 6.0 * q * (1.0 - q),
            passed: eps_opt >= threshold,
            realizations,
        });
    }
    Ok(AdversarialReport { rows })
}
