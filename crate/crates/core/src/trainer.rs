//! The federated training loop over streams.
//!
//! Every round, every client receives its batch and updates its memory whether
//! or not it participates; only participating clients with positive weight
//! mass run local steps. Local steps are unprojected, projection happens once
//! after aggregation.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryRule, MemoryState};
use crate::model::{dist, norm, Example, LossKind, LossSpec, Model, ParameterVector};
use crate::par::Exec;
use crate::rng::{self, Purpose};
use crate::stream::ClientStream;
use crate::weighting::{plan_trace, ClientPlan, RoundTrace, WeightScheme};

fn default_participation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of communication rounds `T`.
    pub rounds: usize,
    /// Local steps per round `E`.
    pub local_steps: usize,
    /// Minibatch cap `K`.
    pub batch_size: usize,
    pub eta: f64,
    /// Fraction of clients sampled each round, uniformly without replacement.
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default)]
    pub seed: u64,
    /// Extra random points of Θ at which the σ̄² proxy is also evaluated
    /// (0 disables the probe mode).
    #[serde(default)]
    pub sigma_probes: usize,
    #[serde(default)]
    pub exec: Exec,
    /// `θ^(1)`; defaults to the projection of the origin.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(rounds: usize, local_steps: usize, batch_size: usize, eta: f64) -> Self {
        TrainConfig {
            rounds,
            local_steps,
            batch_size,
            eta,
            participation: 1.0,
            seed: 0,
            sigma_probes: 0,
            exec: Exec::default(),
            init: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", format!("must be a positive number, got {}", self.eta)));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// The step size `η = min(1, 1/σ̄) / √T`.
pub fn theoretical_eta(rounds: usize, sigma_bar_sq: f64) -> f64 {
    let sigma = sigma_bar_sq.max(0.0).sqrt();
    let factor = if sigma > 1.0 { 1.0 / sigma } else { 1.0 };
    factor / (rounds as f64).sqrt()
}

/// A client of the federation: its stream and its memory policy.
#[derive(Debug, Clone)]
pub struct FedClient {
    pub stream: ClientStream,
    pub rule: MemoryRule,
    pub capacity: usize,
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub model: Model,
    pub clients: Vec<FedClient>,
    pub scheme: WeightScheme,
}

impl Federation {
    pub fn plans(&self) -> Vec<ClientPlan> {
        self.clients
            .iter()
            .map(|c| ClientPlan {
                process: c.stream.process,
                rule: c.rule,
                capacity: c.capacity,
                seed: c.stream.seed,
            })
            .collect()
    }

    pub fn plan(&self, rounds: usize) -> Result<RoundTrace> {
        plan_trace(&self.plans(), &self.scheme, rounds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// `θ̄ = Σ_t q^(t) θ^(t)`.
    pub averaged_model: ParameterVector,
    /// `θ^(T+1)`.
    pub final_iterate: ParameterVector,
    pub trace: RoundTrace,
    /// Broadcast iterates `θ^(1), ..., θ^(T)`.
    pub iterates: Vec<ParameterVector>,
    pub q: Vec<f64>,
    /// Round objective `Σ_j λ_j/Σλ · ℓ(θ^(t); z_j)` at the broadcast iterate.
    pub round_loss: Vec<f64>,
    /// Every sample received, `received[m][i - 1]`.
    pub received: Vec<Vec<Arc<Example>>>,
    pub sigma: SigmaEstimate,
    /// Rounds in which no participating client had positive weight mass.
    pub idle_rounds: usize,
}

impl TrainResult {
    pub fn sigma_hat_sq(&self) -> f64 {
        self.sigma.value
    }

    /// `Σ_{s≤t} q^(s) θ^(s) / Σ_{s≤t} q^(s)` for every `t`.
    pub fn running_averages(&self) -> Vec<Vec<f64>> {
        let dim = self.final_iterate.dim();
        let mut acc = vec![0.0; dim];
        let mut mass = 0.0;
        self.iterates
            .iter()
            .zip(&self.q)
            .map(|(theta, q)| {
                for (a, x) in acc.iter_mut().zip(theta.as_slice()) {
                    *a += q * x;
                }
                mass += q;
                acc.iter().map(|a| if mass > 0.0 { a / mass } else { *a }).collect()
            })
            .collect()
    }
}

/// The σ̄² proxy and its per-round contributions `q^(t)·‖…‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    /// Evaluated at the broadcast iterates.
    pub value: f64,
    pub per_round: Vec<f64>,
    /// Maximum over the broadcast iterate and random probes of Θ, if enabled.
    pub probe_max: Option<f64>,
}

impl SigmaEstimate {
    /// Cumulative sums of the per-round contributions.
    pub fn partial_sums(&self) -> Vec<f64> {
        self.per_round
            .iter()
            .scan(0.0, |s, x| {
                *s += x;
                Some(*s)
            })
            .collect()
    }
}

fn check_features(loss: &LossSpec, dim: usize, z: &Example) -> Result<()> {
    if loss.kind != LossKind::AdversarialTwoPoint && z.features.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: z.features.len(),
        });
    }
    Ok(())
}

/// `(|I|/|ξ|) Σ_{j∈ξ} (λ_j / Σ_{j'∈I} λ_j') ∇ℓ(θ; z_j)` with `ξ` drawn uniformly
/// without replacement, `|ξ| = min(K, |I|)`. When `K ≥ |I|` every sample is
/// used in memory order and no randomness is consumed.
pub fn minibatch_gradient<R: Rng + ?Sized>(
    loss: &LossSpec,
    theta: &[f64],
    items: &[(&Example, f64)],
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if k == 0 {
        return Err(Error::InvalidInput("minibatch size must be at least 1".into()));
    }
    let mass: f64 = items.iter().map(|(_, w)| w).sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass("client memory".into()));
    }
    let n = items.len();
    let size = k.min(n);
    let scale = n as f64 / size as f64;
    let mut g = vec![0.0; theta.len()];
    let mut add = |j: usize| {
        let (z, w) = items[j];
        if w != 0.0 {
            loss.add_grad(theta, z, scale * (w / mass), &mut g);
        }
    };
    if size == n {
        (0..n).for_each(&mut add);
    } else {
        index::sample(rng, n, size).into_iter().for_each(add);
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("minibatch gradient"));
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `θ_m^(t,E+1)`.
    pub endpoint: Vec<f64>,
    /// `Σ_e η g_e`, so that `endpoint = θ − displacement` up to rounding.
    pub displacement: Vec<f64>,
}

/// `E` unprojected steps `θ ← θ − η g` from the broadcast model.
pub fn local_update<R: Rng + ?Sized>(
    loss: &LossSpec,
    theta: &[f64],
    items: &[(&Example, f64)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LocalUpdate> {
    let mut current = theta.to_vec();
    let mut displacement = vec![0.0; theta.len()];
    for _ in 0..cfg.local_steps {
        let g = minibatch_gradient(loss, &current, items, cfg.batch_size, rng)?;
        for ((c, d), gk) in current.iter_mut().zip(&mut displacement).zip(&g) {
            let step = cfg.eta * gk;
            *c -= step;
            *d += step;
        }
    }
    Ok(LocalUpdate {
        endpoint: current,
        displacement,
    })
}

/// Clients taking part in round `t`, in increasing order.
pub fn select_participants(clients: usize, fraction: f64, seed: u64, t: usize) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..clients).collect();
    }
    let count = ((fraction * clients as f64).round() as usize).clamp(1, clients);
    let mut r = rng::stream(seed, Purpose::Participation, t as u64, 0);
    let mut chosen = index::sample(&mut r, clients, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Runs the weighted federated averaging loop for `cfg.rounds` rounds.
pub fn run(fed: Federation, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if fed.clients.is_empty() {
        return Err(Error::InvalidInput("federation has no clients".into()));
    }
    let trace = fed.plan(cfg.rounds)?;
    let q = trace.round_mass_share()?;
    let Federation {
        model,
        mut clients,
        scheme: _,
    } = fed;
    let dim = model.dim();
    let init = cfg.init.clone().unwrap_or_else(|| vec![0.0; dim]);
    let mut theta = model.project(&init)?.into_inner();

    let mut memories = clients
        .iter()
        .map(|c| MemoryState::<Arc<Example>>::new(c.capacity))
        .collect::<Result<Vec<_>>>()?;
    let mut received: Vec<Vec<Arc<Example>>> = vec![Vec::new(); clients.len()];
    let mut iterates = Vec::with_capacity(cfg.rounds);
    let mut round_loss = Vec::with_capacity(cfg.rounds);
    let mut idle_rounds = 0;

    for t in 1..=cfg.rounds {
        let step = (|| -> Result<(Vec<f64>, f64, bool)> {
            for (m, c) in clients.iter_mut().enumerate() {
                let batch = c.stream.next_batch(t)?;
                for z in &batch {
                    check_features(&model.loss, dim, z)?;
                }
                let batch: Vec<Arc<Example>> = batch.into_iter().map(Arc::new).collect();
                received[m].extend(batch.iter().cloned());
                memories[m].update(c.rule, batch)?;
            }
            let row = &trace.rounds[t - 1];
            let weighted = memories
                .iter()
                .zip(row)
                .map(|(mem, cr)| {
                    if mem.len() != cr.entries.len() {
                        return Err(Error::InvalidInput("memory diverged from the planned trace".into()));
                    }
                    mem.items()
                        .zip(&cr.entries)
                        .map(|(z, &(idx, w))| {
                            if z.meta.global_index != idx {
                                return Err(Error::InvalidInput("memory diverged from the planned trace".into()));
                            }
                            Ok((z.as_ref(), w))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;

            let total: f64 = row.iter().map(|c| c.mass).sum();
            let loss_t = if total > 0.0 {
                weighted
                    .iter()
                    .flatten()
                    .filter(|(_, w)| *w != 0.0)
                    .map(|(z, w)| (w / total) * model.loss.value_unchecked(&theta, z))
                    .sum()
            } else {
                f64::NAN
            };

            let active: Vec<usize> = select_participants(clients.len(), cfg.participation, cfg.seed, t)
                .into_iter()
                .filter(|&m| row[m].mass > 0.0)
                .collect();
            let active_mass: f64 = active.iter().map(|&m| row[m].mass).sum();
            if active.is_empty() {
                return Ok((theta.clone(), loss_t, true));
            }
            let updates = cfg.exec.map(&active, |&m| {
                let mut r = rng::stream(cfg.seed, Purpose::Minibatch, m as u64, t as u64);
                local_update(&model.loss, &theta, &weighted[m], cfg, &mut r)
            });
            let mut delta = vec![0.0; dim];
            for (&m, update) in active.iter().zip(updates) {
                let update = update?;
                let p = row[m].mass / active_mass;
                for (d, x) in delta.iter_mut().zip(&update.displacement) {
                    *d += p * -x;
                }
            }
            let moved: Vec<f64> = theta.iter().zip(&delta).map(|(a, b)| a + b).collect();
            Ok((model.project(&moved)?.into_inner(), loss_t, false))
        })();
        let (next, loss_t, idle) = step.map_err(|e| e.at_round(t))?;
        iterates.push(ParameterVector::new(std::mem::replace(&mut theta, next)).map_err(|e| e.at_round(t))?);
        round_loss.push(loss_t);
        idle_rounds += idle as usize;
    }

    let mut averaged = vec![0.0; dim];
    for (theta_t, q_t) in iterates.iter().zip(&q) {
        for (a, x) in averaged.iter_mut().zip(theta_t.as_slice()) {
            *a += q_t * x;
        }
    }
    let sigma = estimate_sigma_bar_sq(
        &model,
        &trace,
        &received,
        &iterates,
        cfg.sigma_probes,
        cfg.seed,
        cfg.exec,
    )?;
    Ok(TrainResult {
        averaged_model: ParameterVector::new(averaged)?,
        final_iterate: ParameterVector::new(theta)?,
        trace,
        iterates,
        q,
        round_loss,
        received,
        sigma,
        idle_rounds,
    })
}

fn sample_of(received: &[Vec<Arc<Example>>], m: usize, idx: usize) -> Result<&Example> {
    received
        .get(m)
        .and_then(|r| r.get(idx.wrapping_sub(1)))
        .map(|z| z.as_ref())
        .ok_or_else(|| Error::InvalidInput(format!("missing sample {idx} of client {m}")))
}

/// Plug-in σ̄² proxy: `Σ_t q^(t) ‖∇L_S(θ) − Σ_m p_m^(t) ∇L_{M_m^(t)}(θ)‖²` at the
/// broadcast iterates, optionally also maximized over `probes` random points of
/// Θ per round.
///
/// Both gradients are accumulated over the same (client, memory) order with
/// zero-weight samples skipped, so identical weightings cancel exactly.
pub fn estimate_sigma_bar_sq(
    model: &Model,
    trace: &RoundTrace,
    received: &[Vec<Arc<Example>>],
    iterates: &[ParameterVector],
    probes: usize,
    seed: u64,
    exec: Exec,
) -> Result<SigmaEstimate> {
    if iterates.len() != trace.num_rounds() {
        return Err(Error::InvalidInput(format!(
            "{} iterates for {} rounds",
            iterates.len(),
            trace.num_rounds()
        )));
    }
    let q = trace.round_mass_share()?;
    let importance = trace.sample_importance()?;
    let global: Vec<(&Example, f64)> = importance
        .iter()
        .enumerate()
        .flat_map(|(m, row)| row.iter().enumerate().map(move |(i, &p)| (m, i + 1, p)))
        .filter(|&(_, _, p)| p != 0.0)
        .map(|(m, i, p)| Ok((sample_of(received, m, i)?, p)))
        .collect::<Result<_>>()?;
    let rounds: Vec<Vec<(&Example, f64)>> = (1..=trace.num_rounds())
        .map(|t| {
            let total = trace.round_mass(t)?;
            let mut items = Vec::new();
            if total > 0.0 {
                for (m, c) in trace.rounds[t - 1].iter().enumerate() {
                    for &(idx, w) in &c.entries {
                        if w != 0.0 {
                            items.push((sample_of(received, m, idx)?, w / total));
                        }
                    }
                }
            }
            Ok(items)
        })
        .collect::<Result<_>>()?;

    let gap = |theta: &[f64], round: &[(&Example, f64)]| -> f64 {
        let mut a = vec![0.0; theta.len()];
        let mut b = vec![0.0; theta.len()];
        for (z, p) in &global {
            model.loss.add_grad(theta, z, *p, &mut a);
        }
        for (z, p) in round {
            model.loss.add_grad(theta, z, *p, &mut b);
        }
        dist(&a, &b).powi(2)
    };
    let terms: Vec<(f64, f64)> = exec.map_range(trace.num_rounds(), |k| {
        let theta = iterates[k].as_slice();
        let at_iterate = gap(theta, &rounds[k]);
        let mut best = at_iterate;
        if probes > 0 {
            let mut r = rng::stream(seed, Purpose::Probe, k as u64 + 1, 0);
            for _ in 0..probes {
                let point = model.domain.sample_uniform(&mut r);
                best = best.max(gap(&point, &rounds[k]));
            }
        }
        (q[k] * at_iterate, q[k] * best)
    });
    let per_round: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let value: f64 = per_round.iter().sum();
    if !value.is_finite() {
        return Err(Error::NonFinite("sigma estimate"));
    }
    Ok(SigmaEstimate {
        value,
        per_round,
        probe_max: (probes > 0).then(|| terms.iter().map(|t| t.1).sum()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Mean loss over `data`, and 0/1 accuracy when `with_accuracy` is set.
pub fn evaluate(loss: &LossSpec, theta: &[f64], data: &[Example], with_accuracy: bool) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    if with_accuracy && loss.kind != LossKind::Logistic {
        return Err(Error::AccuracyUndefined);
    }
    let n = data.len() as f64;
    let mut total = 0.0;
    let mut correct = 0usize;
    for z in data {
        total += loss.value(theta, z)?;
        if with_accuracy && loss.correct(theta, z)? {
            correct += 1;
        }
    }
    Ok(Evaluation {
        loss: total / n,
        accuracy: with_accuracy.then(|| correct as f64 / n),
    })
}

/// Weighted empirical risk `Σ_j w_j ℓ(θ; z_j)`.
pub fn weighted_risk(loss: &LossSpec, theta: &[f64], items: &[(&Example, f64)]) -> f64 {
    items
        .iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|(z, w)| w * loss.value_unchecked(theta, z))
        .sum()
}

/// Minimizes `Σ_j w_j ℓ(θ; z_j)` over Θ by full-batch projected gradient
/// descent with step `1/L`, stopping once the gradient mapping norm drops
/// below `tol`.
pub fn weighted_erm_minimum(
    model: &Model,
    items: &[(&Example, f64)],
    tol: f64,
    max_iters: usize,
) -> Result<(ParameterVector, f64)> {
    let weight: f64 = items.iter().map(|(_, w)| w).sum();
    if !(weight > 0.0) {
        return Err(Error::ZeroMass("weighted risk".into()));
    }
    let step = 1.0 / (model.loss.smoothness_l * weight);
    let mut theta = model.project(&vec![0.0; model.dim()])?.into_inner();
    for _ in 0..max_iters {
        let mut g = vec![0.0; theta.len()];
        for (z, w) in items {
            model.loss.add_grad(&theta, z, *w, &mut g);
        }
        let moved: Vec<f64> = theta.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let next = model.project(&moved)?.into_inner();
        let mapping = dist(&theta, &next) / step;
        theta = next;
        if mapping < tol {
            let value = weighted_risk(&model.loss, &theta, items);
            return Ok((ParameterVector::new(theta)?, value));
        }
    }
    let best_value = weighted_risk(&model.loss, &theta, items);
    Err(Error::NotConverged {
        iterations: max_iters,
        best_value,
        best_point: theta,
    })
}

/// Euclidean norm of a gradient, exposed for diagnostics.
pub fn gradient_norm(loss: &LossSpec, theta: &[f64], items: &[(&Example, f64)]) -> f64 {
    let mut g = vec![0.0; theta.len()];
    for (z, w) in items {
        loss.add_grad(theta, z, *w, &mut g);
    }
    norm(&g)
}
