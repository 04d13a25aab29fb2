//! Sample weights λ and the quantities derived from them: aggregation weights
//! `p_m^(t)`, round mass shares `q^(t)`, per-sample importance `p_{m,i}` and the
//! effective sample size.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryRule, MemoryState};
use crate::model::SampleMeta;
use crate::stream::CountingProcess;

/// A point of the probability simplex Δ^{M−1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ImportanceVector(Vec<f64>);

impl ImportanceVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidInput(format!("not a probability vector: {p:?}")));
        }
        if (sum - 1.0).abs() > 1e-12 * p.len() as f64 {
            return Err(Error::InvalidInput(format!("probability vector sums to {sum}")));
        }
        Ok(ImportanceVector(p))
    }

    /// Normalizes non-negative masses.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroMass("cannot normalize".into()));
        }
        Self::new(masses.iter().map(|m| m / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ImportanceVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ImportanceVector> for Vec<f64> {
    fn from(p: ImportanceVector) -> Self {
        p.0
    }
}

impl std::ops::Deref for ImportanceVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// How `λ_m^(t,j)` is chosen. Schemes see only arrival metadata.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    UnitWeights,
    /// `1/τ` where `τ` is the number of rounds the sample spends in memory
    /// over the whole horizon.
    InverseResidence,
    /// One weight per client, constant over time.
    PerClientStationary(Vec<f64>),
    /// Weights keyed by `(client, round, global_index)`; missing keys weigh 0.
    ExplicitTable(HashMap<(usize, usize, usize), f64>),
}

impl WeightScheme {
    fn weight(&self, meta: SampleMeta, round: usize, total_residence: usize) -> Result<f64> {
        let w = match self {
            WeightScheme::UnitWeights => 1.0,
            WeightScheme::InverseResidence => 1.0 / total_residence as f64,
            WeightScheme::PerClientStationary(l) => *l.get(meta.client_id).ok_or_else(|| {
                Error::InvalidInput(format!("no stationary weight for client {}", meta.client_id))
            })?,
            WeightScheme::ExplicitTable(t) => t
                .get(&(meta.client_id, round, meta.global_index))
                .copied()
                .unwrap_or(0.0),
        };
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidInput(format!("negative or non-finite weight {w}")));
        }
        Ok(w)
    }
}

/// One client's memory at one round: `(global_index, λ)` in memory order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientRound {
    pub entries: Vec<(usize, f64)>,
    pub mass: f64,
}

impl ClientRound {
    pub fn new(entries: Vec<(usize, f64)>) -> Self {
        let mass = entries.iter().map(|(_, w)| w).sum();
        ClientRound { entries, mass }
    }
}

/// Per-round memories and weights of a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    /// `rounds[t - 1][m]`.
    pub rounds: Vec<Vec<ClientRound>>,
    /// Total samples received by each client over the horizon (`N_m`).
    pub received: Vec<usize>,
}

impl RoundTrace {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn num_clients(&self) -> usize {
        self.received.len()
    }

    pub fn total_samples(&self) -> usize {
        self.received.iter().sum()
    }

    fn row(&self, t: usize) -> Result<&[ClientRound]> {
        if t == 0 || t > self.rounds.len() {
            return Err(Error::InvalidInput(format!("round {t} outside [1, {}]", self.rounds.len())));
        }
        Ok(&self.rounds[t - 1])
    }

    /// Total λ-mass of round `t`.
    pub fn round_mass(&self, t: usize) -> Result<f64> {
        Ok(self.row(t)?.iter().map(|c| c.mass).sum())
    }

    /// `p^(t)` and the raw round mass.
    pub fn round_weights(&self, t: usize) -> Result<(ImportanceVector, f64)> {
        let row = self.row(t)?;
        let masses: Vec<f64> = row.iter().map(|c| c.mass).collect();
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroMass(format!("round {t}")));
        }
        Ok((ImportanceVector::new(masses.iter().map(|m| m / total).collect())?, total))
    }

    /// `q^(t)` for every round.
    pub fn round_mass_share(&self) -> Result<Vec<f64>> {
        if self.rounds.is_empty() {
            return Err(Error::InvalidInput("empty trace".into()));
        }
        let masses: Vec<f64> = (1..=self.num_rounds())
            .map(|t| self.round_mass(t))
            .collect::<Result<_>>()?;
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroMass("whole horizon".into()));
        }
        Ok(masses.iter().map(|m| m / total).collect())
    }

    /// `p_{m,i}`, indexed `[m][i - 1]`. Samples never weighted get 0.
    pub fn sample_importance(&self) -> Result<Vec<Vec<f64>>> {
        let mut acc: Vec<Vec<f64>> = self.received.iter().map(|&n| vec![0.0; n]).collect();
        let mut total = 0.0;
        for row in &self.rounds {
            if row.len() != self.received.len() {
                return Err(Error::InvalidInput("trace row with wrong client count".into()));
            }
            for (m, c) in row.iter().enumerate() {
                for &(idx, w) in &c.entries {
                    let slot = acc[m].get_mut(idx.wrapping_sub(1)).ok_or_else(|| {
                        Error::InvalidInput(format!("client {m}: index {idx} beyond N_m = {}", self.received[m]))
                    })?;
                    *slot += w;
                    total += w;
                }
            }
        }
        if !(total > 0.0) {
            return Err(Error::ZeroMass("whole horizon".into()));
        }
        for v in acc.iter_mut().flatten() {
            *v /= total;
        }
        Ok(acc)
    }

    /// Client relative importance `p_m = Σ_i p_{m,i}`.
    pub fn client_importance(&self) -> Result<ImportanceVector> {
        let table = self.sample_importance()?;
        let masses: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        ImportanceVector::from_masses(&masses)
    }

    /// Writes `round,client,mass,p_mt,q_t`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let q = self.round_mass_share()?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["round", "client", "mass", "p_mt", "q_t"])?;
        for (t, row) in self.rounds.iter().enumerate() {
            let total: f64 = row.iter().map(|c| c.mass).sum();
            for (m, c) in row.iter().enumerate() {
                let p = if total > 0.0 { c.mass / total } else { 0.0 };
                out.write_record([
                    (t + 1).to_string(),
                    m.to_string(),
                    fmt17(c.mass),
                    fmt17(p),
                    fmt17(q[t]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Float formatting with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// `N_eff = (Σ p_{m,i}²)^{-1}`.
pub fn effective_sample_size(table: &[Vec<f64>]) -> Result<f64> {
    let s: f64 = table.iter().flatten().map(|p| p * p).sum();
    if !(s > 0.0) {
        return Err(Error::ZeroMass("importance table".into()));
    }
    Ok(1.0 / s)
}

/// Per-client stationary weights realizing importance `p` when client `m`
/// holds `occupancy[m]` samples in memory on average: `λ_m ∝ p_m / occupancy_m`,
/// scaled so that `max λ_m = 1`.
pub fn importance_to_client_weights(p: &ImportanceVector, occupancy: &[f64]) -> Result<Vec<f64>> {
    if p.len() != occupancy.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: occupancy.len(),
        });
    }
    let raw: Vec<f64> = p
        .iter()
        .zip(occupancy)
        .enumerate()
        .map(|(m, (&pm, &n))| {
            if pm == 0.0 {
                Ok(0.0)
            } else if n > 0.0 {
                Ok(pm / n)
            } else {
                Err(Error::InvalidInput(format!("client {m} has importance {pm} but no samples")))
            }
        })
        .collect::<Result<_>>()?;
    let max = raw.iter().copied().fold(0.0, f64::max);
    Ok(raw.iter().map(|l| l / max).collect())
}

impl RoundTrace {
    /// Average number of samples in each client's memory over the horizon.
    pub fn mean_occupancy(&self) -> Vec<f64> {
        let mut sums = vec![0usize; self.num_clients()];
        for row in &self.rounds {
            for (s, c) in sums.iter_mut().zip(row) {
                *s += c.entries.len();
            }
        }
        sums.iter().map(|&s| s as f64 / self.num_rounds() as f64).collect()
    }
}

/// Arrival and memory description of one client, without any sample content.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPlan {
    pub process: CountingProcess,
    pub rule: MemoryRule,
    pub capacity: usize,
    pub seed: u64,
}

/// Replays every client's arrivals and memory over metadata only and assigns
/// weights. Memory rules and weights never look at sample content, so the
/// resulting trace is exactly what a full simulation will see.
pub fn plan_trace(clients: &[ClientPlan], scheme: &WeightScheme, rounds: usize) -> Result<RoundTrace> {
    if rounds == 0 {
        return Err(Error::InvalidInput("horizon must have at least one round".into()));
    }
    let mut per_round: Vec<Vec<Vec<SampleMeta>>> = vec![Vec::with_capacity(clients.len()); rounds];
    let mut received = Vec::with_capacity(clients.len());
    let mut residence: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(clients.len());
    for (m, plan) in clients.iter().enumerate() {
        plan.process.validate()?;
        let mut memory = MemoryState::new(plan.capacity)?;
        let mut next = 1;
        let mut counts = BTreeMap::new();
        for (t, size) in plan
            .process
            .batch_sizes(plan.seed, m, rounds, Some(plan.capacity))
            .into_iter()
            .enumerate()
        {
            let batch: Vec<SampleMeta> = (0..size)
                .map(|k| SampleMeta {
                    client_id: m,
                    arrival_round: t + 1,
                    global_index: next + k,
                })
                .collect();
            next += size;
            memory
                .update(plan.rule, batch)
                .map_err(|e| e.at_round(t + 1))?;
            let contents: Vec<SampleMeta> = memory.items().copied().collect();
            for s in &contents {
                *counts.entry(s.global_index).or_insert(0) += 1;
            }
            per_round[t].push(contents);
        }
        received.push(next - 1);
        residence.push(counts);
    }
    let rounds = per_round
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            row.into_iter()
                .enumerate()
                .map(|(m, contents)| {
                    let entries = contents
                        .into_iter()
                        .map(|s| Ok((s.global_index, scheme.weight(s, t + 1, residence[m][&s.global_index])?)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ClientRound::new(entries))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundTrace { rounds, received })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from_masses(masses: &[&[f64]]) -> RoundTrace {
        RoundTrace {
            rounds: masses
                .iter()
                .map(|row| row.iter().map(|&m| ClientRound::new(vec![(1, m)])).collect())
                .collect(),
            received: vec![1; masses[0].len()],
        }
    }

    #[test]
    fn round_weight_examples() {
        let t = trace_from_masses(&[&[3.0, 1.0]]);
        assert_eq!(t.round_weights(1).unwrap().0.as_slice(), &[0.75, 0.25]);

        let plans = [
            ClientPlan {
                process: CountingProcess::SinglePulse { n0: 10 },
                rule: MemoryRule::KeepAll,
                capacity: 10,
                seed: 0,
            },
            ClientPlan {
                process: CountingProcess::SinglePulse { n0: 30 },
                rule: MemoryRule::KeepAll,
                capacity: 30,
                seed: 0,
            },
        ];
        let t = plan_trace(&plans, &WeightScheme::UnitWeights, 3).unwrap();
        assert_eq!(t.round_weights(2).unwrap().0.as_slice(), &[0.25, 0.75]);

        let zero = trace_from_masses(&[&[0.0, 0.0]]);
        assert!(matches!(zero.round_weights(1), Err(Error::ZeroMass(_))));
    }

    #[test]
    fn round_mass_share_examples() {
        let t = trace_from_masses(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        assert_eq!(t.round_mass_share().unwrap(), vec![0.25; 4]);
        let t = trace_from_masses(&[&[2.0], &[1.0], &[1.0]]);
        assert_eq!(t.round_mass_share().unwrap(), vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn effective_sample_size_examples() {
        assert_eq!(effective_sample_size(&[vec![1.0, 0.0, 0.0]]).unwrap(), 1.0);
        let n = effective_sample_size(&[vec![0.5, 0.25], vec![0.25]]).unwrap();
        assert!((n - 8.0 / 3.0).abs() < 1e-15);
        assert!(effective_sample_size(&[vec![0.0]]).is_err());
        let uniform = vec![vec![1.0 / 200.0; 200]];
        assert!((effective_sample_size(&uniform).unwrap() - 200.0).abs() < 1e-9);
    }

    #[test]
    fn client_weight_conversion() {
        let p = ImportanceVector::new(vec![0.25, 0.75]).unwrap();
        let l = importance_to_client_weights(&p, &[10.0, 30.0]).unwrap();
        assert_eq!(l, vec![1.0, 1.0]);
        let p = ImportanceVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(importance_to_client_weights(&p, &[10.0, 5.0]).unwrap(), vec![1.0, 0.0]);
        let p = ImportanceVector::new(vec![0.5, 0.5]).unwrap();
        assert!(importance_to_client_weights(&p, &[10.0, 0.0]).is_err());
    }

    #[test]
    fn replace_all_unit_weights_is_uniform() {
        let plans: Vec<ClientPlan> = [2usize, 5, 3]
            .iter()
            .map(|&b| ClientPlan {
                process: CountingProcess::ConstantRate { b },
                rule: MemoryRule::ReplaceAll,
                capacity: b,
                seed: 0,
            })
            .collect();
        let t = plan_trace(&plans, &WeightScheme::UnitWeights, 7).unwrap();
        let n = t.total_samples() as f64;
        for p in t.sample_importance().unwrap().iter().flatten() {
            assert!((p - 1.0 / n).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_residence_under_fifo_is_uniform() {
        let plans: Vec<ClientPlan> = [(1usize, 3usize), (2, 5), (3, 3)]
            .iter()
            .map(|&(b, c)| ClientPlan {
                process: CountingProcess::ConstantRate { b },
                rule: MemoryRule::Fifo,
                capacity: c,
                seed: 0,
            })
            .collect();
        let t = plan_trace(&plans, &WeightScheme::InverseResidence, 11).unwrap();
        let n = t.total_samples() as f64;
        for p in t.sample_importance().unwrap().iter().flatten() {
            assert!((p - 1.0 / n).abs() < 1e-14);
        }
    }

    #[test]
    fn keep_all_historical_importance_scales_with_horizon() {
        // A historical client (all data at t = 1, kept) next to a fresh client
        // whose samples each stay one round: per-sample importance ratio is T.
        let rounds = 6;
        let plans = [
            ClientPlan {
                process: CountingProcess::SinglePulse { n0: 4 },
                rule: MemoryRule::KeepAll,
                capacity: 4,
                seed: 0,
            },
            ClientPlan {
                process: CountingProcess::ConstantRate { b: 2 },
                rule: MemoryRule::Fifo,
                capacity: 2,
                seed: 0,
            },
        ];
        let t = plan_trace(&plans, &WeightScheme::UnitWeights, rounds).unwrap();
        let table = t.sample_importance().unwrap();
        for h in &table[0] {
            for f in &table[1] {
                assert!((h / f - rounds as f64).abs() < 1e-12);
            }
        }
    }
}
