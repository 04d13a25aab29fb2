//! Configuration-driven experiments: the historical/fresh scenario, one
//! training sub-run per (strategy, seed), learning-rate tuning, summaries and
//! their verification, and the bound-curve sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    emit_bound_curves, estimate_c_ratio, estimate_constants, log_grid, minimize_psi, strategy_importance,
    write_curves_csv, BoundCoefficients, CurveRow, EstimatedConstants, Strategy, WarmupConfig, P_HIST_GRID,
};
use crate::error::{Error, Result};
use crate::memory::MemoryRule;
use crate::model::{Domain, Example, LossSpec, Model, SampleMeta};
use crate::par::Exec;
use crate::rng::{self, Purpose};
use crate::stream::{
    generate_synthetic, load_csv_corpus, ClientStream, CountingProcess, LabeledPoint, SampleSource, SyntheticSpec,
};
use crate::trainer::{evaluate, run, FedClient, Federation, TrainConfig, TrainResult};
use crate::weighting::{
    effective_sample_size, fmt17, importance_to_client_weights, plan_trace, ClientPlan, ImportanceVector,
    WeightScheme,
};

/// `{10^-3.5, 10^-3, ..., 10^-1}`.
pub fn eta_grid() -> Vec<f64> {
    (0..6).map(|k| 10f64.powf(-3.5 + 0.5 * k as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct CustomClient {
    pub process: CountingProcess,
    pub rule: MemoryRule,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// `m_hist` historical clients holding their whole dataset from round 1
    /// (single pulse, keep all) and `m − m_hist` fresh clients receiving
    /// `fresh_rates[k]` samples per round and keeping only the latest batch.
    HistoricalFresh {
        m: usize,
        m_hist: usize,
        n_hist_over_n: f64,
        fresh_rates: Vec<usize>,
    },
    /// Arbitrary clients; the first `m_hist` count as historical.
    Custom { m_hist: usize, clients: Vec<CustomClient> },
}

fn default_true() -> bool {
    true
}

fn default_epsilon() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        dim: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// `client_id,arrival_round,label,f0,...`; client ids are mapped to
    /// indices in increasing order.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    Logistic,
    Squared,
}

fn default_radius() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_loss")]
    pub loss: LossChoice,
    /// Radius of the ball Θ centered at the origin.
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_loss() -> LossChoice {
    LossChoice::Logistic
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            loss: LossChoice::Logistic,
            radius: default_radius(),
        }
    }
}

fn default_eval_size() -> usize {
    10_000
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Fresh draws per evaluation set for synthetic data, split across
    /// clients in proportion to their dataset sizes.
    #[serde(default = "default_eval_size")]
    pub validation_size: usize,
    #[serde(default = "default_eval_size")]
    pub test_size: usize,
    /// Share of each CSV client's rows held out for validation, and again for
    /// test (0.2 gives a 60/20/20 split).
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            validation_size: default_eval_size(),
            test_size: default_eval_size(),
            holdout_fraction: default_holdout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSpec {
    #[serde(default = "eta_grid")]
    pub grid: Vec<f64>,
}

impl Default for TuneSpec {
    fn default() -> Self {
        TuneSpec { grid: eta_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub dataset: DatasetSpec,
    pub strategies: Vec<Strategy>,
    /// Also sweep p_hist over {0, 0.2, 0.5, 0.8, 1} and report the best.
    #[serde(default)]
    pub optimal_grid: bool,
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub warmup: WarmupConfig,
    /// Tune η per strategy on the validation set before the final runs.
    #[serde(default)]
    pub tune: Option<TuneSpec>,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(json_field(&e, text), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("train.{field}"), message),
            e => e,
        })?;
        match &self.scenario {
            Scenario::HistoricalFresh {
                m,
                m_hist,
                n_hist_over_n,
                fresh_rates,
            } => {
                if *m_hist == 0 || m_hist >= m {
                    return Err(Error::config("scenario.m_hist", "need 0 < m_hist < m"));
                }
                if fresh_rates.len() != m - m_hist {
                    return Err(Error::config(
                        "scenario.fresh_rates",
                        format!("expected {} rates, got {}", m - m_hist, fresh_rates.len()),
                    ));
                }
                if fresh_rates.contains(&0) {
                    return Err(Error::config("scenario.fresh_rates", "rates must be at least 1"));
                }
                if !(*n_hist_over_n > 0.0 && *n_hist_over_n < 1.0) {
                    return Err(Error::config("scenario.n_hist_over_n", "must lie in (0, 1)"));
                }
            }
            Scenario::Custom { m_hist, clients } => {
                if clients.is_empty() {
                    return Err(Error::config("scenario.clients", "at least one client is required"));
                }
                if *m_hist > clients.len() {
                    return Err(Error::config("scenario.m_hist", "exceeds the number of clients"));
                }
                for (i, c) in clients.iter().enumerate() {
                    c.process
                        .validate()
                        .map_err(|e| Error::config(format!("scenario.clients[{i}].process"), e.to_string()))?;
                    if c.capacity == 0 {
                        return Err(Error::config(format!("scenario.clients[{i}].capacity"), "must be at least 1"));
                    }
                }
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic { dim, bias, epsilon } => {
                if *dim == 0 || (*bias && *dim < 2) {
                    return Err(Error::config("dataset.dim", "must leave at least one random feature"));
                }
                if !(*epsilon >= 0.0 && epsilon.is_finite()) {
                    return Err(Error::config("dataset.epsilon", "must be finite and non-negative"));
                }
            }
            DatasetSpec::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("dataset.path", "must not be empty"));
                }
            }
        }
        if self.strategies.is_empty() && !self.optimal_grid {
            return Err(Error::config("strategies", "at least one strategy is required"));
        }
        for s in &self.strategies {
            if let Strategy::FixedPHist(h) = s {
                if !(0.0..=1.0).contains(h) {
                    return Err(Error::config("strategies", format!("p_hist {h} outside [0, 1]")));
                }
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if !(self.model.radius > 0.0 && self.model.radius.is_finite()) {
            return Err(Error::config("model.radius", "must be positive"));
        }
        if self.eval.validation_size == 0 {
            return Err(Error::config("eval.validation_size", "must be at least 1"));
        }
        if self.eval.test_size == 0 {
            return Err(Error::config("eval.test_size", "must be at least 1"));
        }
        if !(self.eval.holdout_fraction > 0.0 && self.eval.holdout_fraction < 0.5) {
            return Err(Error::config("eval.holdout_fraction", "must lie in (0, 0.5)"));
        }
        if self.warmup.batch_size == 0 || !(self.warmup.eta > 0.0) {
            return Err(Error::config("warmup", "needs a positive batch size and step"));
        }
        if let Some(t) = &self.tune {
            if t.grid.is_empty() || t.grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err(Error::config("tune.grid", "must be a non-empty list of positive step sizes"));
            }
        }
        Ok(())
    }

    pub fn m_hist(&self) -> usize {
        match &self.scenario {
            Scenario::HistoricalFresh { m_hist, .. } | Scenario::Custom { m_hist, .. } => *m_hist,
        }
    }

    /// Strategies actually run, deduplicated by label.
    pub fn all_strategies(&self) -> Vec<Strategy> {
        let mut seen = BTreeSet::new();
        let extra = if self.optimal_grid {
            P_HIST_GRID.iter().map(|&h| Strategy::FixedPHist(h)).collect()
        } else {
            vec![]
        };
        self.strategies
            .iter()
            .copied()
            .chain(extra)
            .filter(|s| seen.insert(s.label()))
            .collect()
    }
}

/// Best-effort path of the offending key in a JSON error, for diagnostics.
fn json_field(e: &serde_json::Error, _text: &str) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "config".into()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    process: CountingProcess,
    rule: MemoryRule,
    capacity: usize,
}

/// Everything a sub-run needs for one seed. Shared by all strategies so that
/// they see identical data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub model: Model,
    pub train: Vec<Vec<LabeledPoint>>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    layout: Vec<Layout>,
    /// Samples each client receives within the horizon.
    pub counts: Vec<usize>,
    /// `n_m = N_m / N`.
    pub n: ImportanceVector,
    pub occupancy: Vec<f64>,
    pub m_hist: usize,
    pub historical_fresh: bool,
    pub ours: Option<OursEstimate>,
    pub dataset_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OursEstimate {
    pub constants: EstimatedConstants,
    pub c_ratio: f64,
    pub p: ImportanceVector,
    pub p_hist_star: f64,
}

fn digest(train: &[Vec<LabeledPoint>]) -> String {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for client in train {
        client.len().hash(&mut h);
        for p in client {
            for x in &p.features {
                x.to_bits().hash(&mut h);
            }
            p.label.to_bits().hash(&mut h);
        }
    }
    format!("{:016x}", h.finish())
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

fn stamp(points: Vec<LabeledPoint>, client: usize) -> Vec<Example> {
    points
        .into_iter()
        .enumerate()
        .map(|(i, p)| Example {
            meta: SampleMeta {
                client_id: client,
                arrival_round: 0,
                global_index: i + 1,
            },
            features: p.features,
            label: p.label,
        })
        .collect()
}

fn layouts(cfg: &ExperimentConfig, hist_counts: &[usize]) -> Vec<Layout> {
    match &cfg.scenario {
        Scenario::HistoricalFresh { fresh_rates, .. } => hist_counts
            .iter()
            .map(|&n0| Layout {
                process: CountingProcess::SinglePulse { n0 },
                rule: MemoryRule::KeepAll,
                capacity: n0,
            })
            .chain(fresh_rates.iter().map(|&b| Layout {
                process: CountingProcess::ConstantRate { b },
                rule: MemoryRule::Fifo,
                capacity: b,
            }))
            .collect(),
        Scenario::Custom { clients, .. } => clients
            .iter()
            .map(|c| Layout {
                process: c.process,
                rule: c.rule,
                capacity: c.capacity,
            })
            .collect(),
    }
}

fn plans(layout: &[Layout], seed: u64) -> Vec<ClientPlan> {
    layout
        .iter()
        .map(|l| ClientPlan {
            process: l.process,
            rule: l.rule,
            capacity: l.capacity,
            seed,
        })
        .collect()
}

fn build_model(spec: &ModelSpec, dim: usize, data: &[&[Example]], train: &[Vec<LabeledPoint>]) -> Result<Model> {
    let domain = Domain::centered_ball(dim, spec.radius)?;
    let xmax = data
        .iter()
        .flat_map(|d| d.iter().map(|z| &z.features))
        .chain(train.iter().flatten().map(|p| &p.features))
        .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let loss = match spec.loss {
        LossChoice::Logistic => LossSpec::logistic(&domain, xmax),
        LossChoice::Squared => {
            let ymax = data
                .iter()
                .flat_map(|d| d.iter().map(|z| z.label.abs()))
                .chain(train.iter().flatten().map(|p| p.label.abs()))
                .fold(0.0, f64::max);
            LossSpec::squared(&domain, xmax, ymax)
        }
    };
    Ok(Model::new(loss, domain))
}

/// Builds the data, memories and estimates shared by all sub-runs of `seed`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<Prepared> {
    let rounds = cfg.train.rounds;
    let (layout, train, validation, test, dim) = match &cfg.dataset {
        DatasetSpec::Synthetic { dim, bias, epsilon } => {
            let hist_counts = match &cfg.scenario {
                Scenario::HistoricalFresh {
                    m_hist,
                    n_hist_over_n,
                    fresh_rates,
                    ..
                } => {
                    let fresh_total: usize = fresh_rates.iter().sum::<usize>() * rounds;
                    let hist_total = (fresh_total as f64 * n_hist_over_n / (1.0 - n_hist_over_n)).round() as usize;
                    if hist_total < *m_hist {
                        return Err(Error::config(
                            "scenario.n_hist_over_n",
                            format!("{hist_total} historical samples cannot cover {m_hist} clients"),
                        ));
                    }
                    split_evenly(hist_total, *m_hist)
                }
                Scenario::Custom { .. } => vec![],
            };
            let layout = layouts(cfg, &hist_counts);
            let received = plan_trace(&plans(&layout, seed), &WeightScheme::UnitWeights, rounds)?.received;
            if let Some(m) = received.iter().position(|&c| c == 0) {
                return Err(Error::config("scenario", format!("client {m} receives no sample within the horizon")));
            }
            let spec = SyntheticSpec {
                dim: *dim,
                bias: *bias,
                epsilon: *epsilon,
                per_client_counts: received.clone(),
                seed,
            };
            let data = generate_synthetic(&spec)?;
            let total: usize = received.iter().sum();
            let share = |size: usize| -> Vec<usize> {
                received
                    .iter()
                    .map(|&c| ((size as f64 * c as f64 / total as f64).round() as usize).max(1))
                    .collect()
            };
            let draw = |purpose: Purpose, sizes: Vec<usize>| -> Vec<Example> {
                sizes
                    .into_iter()
                    .enumerate()
                    .flat_map(|(m, k)| stamp(data.draw(m, purpose, k), m))
                    .collect()
            };
            let validation = draw(Purpose::Validation, share(cfg.eval.validation_size));
            let test = draw(Purpose::Evaluation, share(cfg.eval.test_size));
            (layout, data.clients, validation, test, *dim)
        }
        DatasetSpec::Csv { path } => {
            let corpus = load_csv_corpus(path).map_err(|e| Error::config("dataset.path", e.to_string()))?;
            let mut train = Vec::new();
            let mut validation = Vec::new();
            let mut test = Vec::new();
            for (m, (_, rows)) in corpus.clients.into_iter().enumerate() {
                let k = ((rows.len() as f64) * cfg.eval.holdout_fraction).round() as usize;
                let mut order: Vec<usize> = (0..rows.len()).collect();
                order.shuffle(&mut rng::stream(seed, Purpose::Validation, m as u64, 1));
                let (val_idx, rest) = order.split_at(k.min(order.len()));
                let (test_idx, train_idx) = rest.split_at(k.min(rest.len()));
                let mut train_idx = train_idx.to_vec();
                train_idx.sort_unstable();
                validation.extend(stamp(val_idx.iter().map(|&i| rows[i].clone()).collect(), m));
                test.extend(stamp(test_idx.iter().map(|&i| rows[i].clone()).collect(), m));
                train.push(train_idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>());
            }
            let m_total = match &cfg.scenario {
                Scenario::HistoricalFresh { m, .. } => *m,
                Scenario::Custom { clients, .. } => clients.len(),
            };
            if train.len() != m_total {
                return Err(Error::config(
                    "dataset.path",
                    format!("corpus has {} clients, scenario expects {m_total}", train.len()),
                ));
            }
            let hist_counts: Vec<usize> = train[..cfg.m_hist()].iter().map(|t| t.len()).collect();
            if let Some(m) = hist_counts.iter().position(|&c| c == 0) {
                return Err(Error::config("dataset.path", format!("historical client {m} has no training rows")));
            }
            (layouts(cfg, &hist_counts), train, validation, test, corpus.dim)
        }
    };

    if validation.is_empty() || test.is_empty() {
        return Err(Error::config("eval", "validation and test sets must be non-empty"));
    }
    let plan = plan_trace(&plans(&layout, seed), &WeightScheme::UnitWeights, rounds)?;
    for (m, (&need, have)) in plan.received.iter().zip(&train).enumerate() {
        if need > have.len() {
            return Err(Error::config(
                "dataset",
                format!("client {m} needs {need} samples over the horizon but has {}", have.len()),
            ));
        }
    }
    let counts = plan.received.clone();
    let total: usize = counts.iter().sum();
    let n = ImportanceVector::from_masses(&counts.iter().map(|&c| c as f64 / total as f64).collect::<Vec<_>>())?;
    let model = build_model(&cfg.model, dim, &[&validation, &test], &train)?;
    let m_hist = cfg.m_hist();
    let mut prepared = Prepared {
        seed,
        model,
        dataset_digest: digest(&train),
        train,
        validation,
        test,
        layout,
        occupancy: plan.mean_occupancy(),
        counts,
        n,
        m_hist,
        historical_fresh: matches!(cfg.scenario, Scenario::HistoricalFresh { .. }),
        ours: None,
    };
    if cfg.strategies.contains(&Strategy::Ours) {
        prepared.ours = Some(estimate_ours(cfg, &prepared, exec)?);
    }
    Ok(prepared)
}

fn initial_point(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<f64>> {
    let init = cfg.train.init.clone().unwrap_or_else(|| vec![0.0; model.dim()]);
    Ok(model.project(&init)?.into_inner())
}

/// Estimates `ĉ2/ĉ1` from the historical clients' data and minimizes ψ.
fn estimate_ours(cfg: &ExperimentConfig, p: &Prepared, exec: Exec) -> Result<OursEstimate> {
    if p.m_hist == 0 {
        return Err(Error::config("strategies", "the ours strategy needs historical clients"));
    }
    let historical: Vec<Vec<Example>> = (0..p.m_hist)
        .map(|m| stamp(p.train[m][..p.counts[m]].to_vec(), m))
        .collect();
    let theta1 = initial_point(cfg, &p.model)?;
    let mut warmup = cfg.warmup.clone();
    warmup.seed = rng::derive_seed(p.seed, Purpose::Warmup, cfg.warmup.seed, 0);
    let total: usize = p.counts.iter().sum();
    let constants = estimate_constants(&p.model, &historical, &theta1, &warmup, (total, p.counts.len()), exec)?;
    let c_ratio = estimate_c_ratio(&constants)?;
    let c = BoundCoefficients::from_ratio(c_ratio, p.n.clone(), p.m_hist)?;
    let opt = minimize_psi(&c, 1e-12, 200_000)?;
    Ok(OursEstimate {
        p_hist_star: opt.p_hist(p.m_hist),
        p: opt.p,
        constants,
        c_ratio,
    })
}

/// Per-client stationary weights realizing a strategy's importance vector.
pub fn strategy_weights(p: &Prepared, s: Strategy) -> Result<(ImportanceVector, Vec<f64>)> {
    let target = match (s, &p.ours) {
        (Strategy::Ours, Some(o)) => o.p.clone(),
        (Strategy::Ours, None) => {
            return Err(Error::InvalidInput("ours strategy requested without an estimate".into()));
        }
        _ => strategy_importance(s, &p.n, p.m_hist, None)?,
    };
    // In the historical/fresh setting the two single-group strategies are
    // unit weights on one group, which is exactly what the general formula
    // gives up to rounding.
    let lambda = match (p.historical_fresh, s) {
        (true, Strategy::Historical) => (0..p.n.len()).map(|m| if m < p.m_hist { 1.0 } else { 0.0 }).collect(),
        (true, Strategy::Fresh) => (0..p.n.len()).map(|m| if m < p.m_hist { 0.0 } else { 1.0 }).collect(),
        _ => importance_to_client_weights(&target, &p.occupancy)?,
    };
    Ok((target, lambda))
}

/// Builds the federation of a sub-run; fresh data can be replaced through
/// `sources` (used to check that zero-weight data has no influence).
pub fn federation(p: &Prepared, lambda: Vec<f64>, sources: Option<Vec<SampleSource>>) -> Result<Federation> {
    let sources = sources.unwrap_or_else(|| p.train.iter().map(|t| SampleSource::Fixed(t.clone())).collect());
    if sources.len() != p.layout.len() {
        return Err(Error::InvalidInput("one source per client is required".into()));
    }
    let clients = p
        .layout
        .iter()
        .zip(sources)
        .enumerate()
        .map(|(m, (l, source))| {
            Ok(FedClient {
                stream: ClientStream::new(m, l.process, source, Some(l.capacity), p.seed)?,
                rule: l.rule,
                capacity: l.capacity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Federation {
        model: p.model.clone(),
        clients,
        scheme: WeightScheme::PerClientStationary(lambda),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: Option<f64>,
    pub sigma_hat_sq_partial: f64,
    pub q_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRun {
    pub strategy: String,
    pub seed: u64,
    pub eta: f64,
    pub final_loss: f64,
    pub final_acc: Option<f64>,
    pub sigma_hat_sq: f64,
    pub sigma_hat_sq_probe: Option<f64>,
    pub n_eff: f64,
    pub target_p: Vec<f64>,
    pub realized_p: Vec<f64>,
    pub p_hist: f64,
    pub lambda: Vec<f64>,
    pub idle_rounds: usize,
    pub dataset_digest: String,
    pub averaged_model: Vec<f64>,
    #[serde(skip)]
    pub metrics: Vec<MetricsRow>,
}

fn train_config(cfg: &ExperimentConfig, seed: u64, eta: f64) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.eta = eta;
    t.seed = rng::derive_seed(seed, Purpose::Minibatch, cfg.train.seed, 0);
    t
}

fn metrics(p: &Prepared, result: &TrainResult, target: EvalTarget, exec: Exec) -> Result<Vec<MetricsRow>> {
    let data = match target {
        EvalTarget::Validation => &p.validation,
        EvalTarget::Test => &p.test,
    };
    let accuracy = p.model.loss.kind == crate::model::LossKind::Logistic;
    let averages = result.running_averages();
    let partial = result.sigma.partial_sums();
    let evals = exec.map(&averages, |theta| evaluate(&p.model.loss, theta, data, accuracy));
    evals
        .into_iter()
        .enumerate()
        .map(|(k, e)| {
            let e = e?;
            Ok(MetricsRow {
                round: k + 1,
                train_loss: result.round_loss[k],
                test_loss: e.loss,
                test_acc: e.accuracy,
                sigma_hat_sq_partial: partial[k],
                q_t: result.q[k],
            })
        })
        .collect()
}

/// Trains one strategy on one seed and evaluates the running averages.
pub fn sub_run(
    cfg: &ExperimentConfig,
    p: &Prepared,
    s: Strategy,
    eta: f64,
    target: EvalTarget,
    exec: Exec,
) -> Result<(SubRun, TrainResult)> {
    let (target_p, lambda) = strategy_weights(p, s)?;
    let fed = federation(p, lambda.clone(), None)?;
    let result = run(fed, &train_config(cfg, p.seed, eta))?;
    let rows = metrics(p, &result, target, exec)?;
    let last = rows.last().expect("at least one round");
    let realized = result.trace.client_importance()?;
    let n_eff = effective_sample_size(&result.trace.sample_importance()?)?;
    let out = SubRun {
        strategy: s.label(),
        seed: p.seed,
        eta,
        final_loss: last.test_loss,
        final_acc: last.test_acc,
        sigma_hat_sq: result.sigma.value,
        sigma_hat_sq_probe: result.sigma.probe_max,
        n_eff,
        p_hist: realized[..p.m_hist].iter().sum(),
        target_p: target_p.into(),
        realized_p: realized.into(),
        lambda,
        idle_rounds: result.idle_rounds,
        dataset_digest: p.dataset_digest.clone(),
        averaged_model: result.averaged_model.as_slice().to_vec(),
        metrics: rows,
    };
    Ok((out, result))
}

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["round", "train_loss", "test_loss", "test_acc", "sigma_hat_sq_partial", "q_t"])?;
    for r in rows {
        out.write_record([
            r.round.to_string(),
            fmt17(r.train_loss),
            fmt17(r.test_loss),
            r.test_acc.map(fmt17).unwrap_or_default(),
            fmt17(r.sigma_hat_sq_partial),
            fmt17(r.q_t),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(["round", "train_loss", "test_loss", "test_acc", "sigma_hat_sq_partial", "q_t"]) {
        return Err(Error::InvalidInput(format!("{}: unexpected header", path.display())));
    }
    reader
        .records()
        .map(|r| {
            let r = r?;
            let num = |i: usize| -> Result<f64> {
                r[i].parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
            };
            Ok(MetricsRow {
                round: r[0]
                    .parse()
                    .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?,
                train_loss: num(1)?,
                test_loss: num(2)?,
                test_acc: if r[3].is_empty() { None } else { Some(num(3)?) },
                sigma_hat_sq_partial: num(4)?,
                q_t: num(5)?,
            })
        })
        .collect()
}

/// Mean and half-width of the two-sided 95% Student-t interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci_half_width: f64,
    pub values: Vec<f64>,
}

fn t_quantile_975(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
        2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    TABLE.get(df.wrapping_sub(1)).copied().unwrap_or(1.96)
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Stat {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci_half_width = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            t_quantile_975(n - 1) * (var / n as f64).sqrt()
        };
        Stat {
            mean,
            ci_half_width,
            values,
        }
    }

    fn close_to(&self, other: &Stat) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        close(self.mean, other.mean) && close(self.ci_half_width, other.ci_half_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub eta: f64,
    pub test_acc: Option<Stat>,
    pub test_loss: Stat,
    pub sigma_hat_sq: Stat,
    pub sigma_hat_sq_probe: Option<Stat>,
    pub n_eff: Stat,
    pub p_hist: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSummary {
    pub strategy: String,
    pub p_hist: f64,
    pub test_acc: Option<Stat>,
    pub test_loss: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub clients: usize,
    pub m_hist: usize,
    pub n_hist_over_n: f64,
    pub strategies: BTreeMap<String, StrategySummary>,
    pub c_ratio: Option<Stat>,
    pub p_hist_star: Option<Stat>,
    /// Per-seed estimates behind `c_ratio`.
    #[serde(default)]
    pub constants: Vec<EstimatedConstants>,
    pub optimal: Option<OptimalSummary>,
}

impl Summary {
    pub fn accuracy(&self, label: &str) -> Option<f64> {
        self.strategies.get(label)?.test_acc.as_ref().map(|s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    /// Selected η per strategy label.
    pub selected: BTreeMap<String, f64>,
    /// `(η, mean validation accuracy, mean validation loss)` per strategy.
    pub scores: BTreeMap<String, Vec<(f64, Option<f64>, f64)>>,
}

fn better(a: (Option<f64>, f64), b: (Option<f64>, f64)) -> bool {
    match (a.0, b.0) {
        (Some(x), Some(y)) if x != y => x > y,
        _ => a.1 < b.1,
    }
}

/// Picks η per strategy by mean validation accuracy over seeds (validation
/// loss breaks ties and decides for the squared loss).
pub fn tune(cfg: &ExperimentConfig, prepared: &[Prepared], exec: Exec) -> Result<TuneOutcome> {
    let grid = cfg.tune.clone().unwrap_or_default().grid;
    let strategies = cfg.all_strategies();
    let jobs: Vec<(Strategy, f64, usize)> = strategies
        .iter()
        .flat_map(|&s| grid.iter().flat_map(move |&eta| (0..prepared.len()).map(move |k| (s, eta, k))))
        .collect();
    let runs = exec.map(&jobs, |&(s, eta, k)| {
        sub_run(cfg, &prepared[k], s, eta, EvalTarget::Validation, Exec::Sequential).map(|r| r.0)
    });
    let mut by_key: BTreeMap<(String, u64), Vec<SubRun>> = BTreeMap::new();
    for (job, r) in jobs.iter().zip(runs) {
        let r = r?;
        by_key.entry((job.0.label(), job.1.to_bits())).or_default().push(r);
    }
    let mut outcome = TuneOutcome {
        selected: BTreeMap::new(),
        scores: BTreeMap::new(),
    };
    for s in &strategies {
        let label = s.label();
        let mut best: Option<(f64, (Option<f64>, f64))> = None;
        for &eta in &grid {
            let runs = &by_key[&(label.clone(), eta.to_bits())];
            let acc = runs
                .iter()
                .map(|r| r.final_acc)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            let loss = runs.iter().map(|r| r.final_loss).sum::<f64>() / runs.len() as f64;
            outcome.scores.entry(label.clone()).or_default().push((eta, acc, loss));
            if best.is_none_or(|b| better((acc, loss), b.1)) {
                best = Some((eta, (acc, loss)));
            }
        }
        outcome.selected.insert(label, best.expect("non-empty grid").0);
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub runs: Vec<SubRun>,
    pub tuning: Option<TuneOutcome>,
    pub prepared: Vec<Prepared>,
}

fn prepare_all(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<Prepared>> {
    exec.map(&cfg.seeds, |&seed| prepare(cfg, seed, Exec::Sequential))
        .into_iter()
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_dir(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join(label).join(format!("seed_{seed}"))
}

/// Runs every (strategy, seed) pair and writes `metrics.csv`, `trace.csv`
/// and `run.json` per sub-run plus `summary.json` and `config.json`.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let prepared = prepare_all(cfg, exec)?;
    let tuning = match cfg.tune {
        Some(_) => Some(tune(cfg, &prepared, exec)?),
        None => None,
    };
    let strategies = cfg.all_strategies();
    let eta_of = |s: &Strategy| {
        tuning
            .as_ref()
            .and_then(|t| t.selected.get(&s.label()).copied())
            .unwrap_or(cfg.train.eta)
    };
    let jobs: Vec<(Strategy, usize)> = strategies
        .iter()
        .flat_map(|&s| (0..prepared.len()).map(move |k| (s, k)))
        .collect();
    fs::create_dir_all(&cfg.output_dir)?;
    let runs = exec.map(&jobs, |&(s, k)| -> Result<SubRun> {
        let p = &prepared[k];
        let (out, result) = sub_run(cfg, p, s, eta_of(&s), EvalTarget::Test, Exec::Sequential)?;
        let dir = run_dir(&cfg.output_dir, &out.strategy, p.seed);
        fs::create_dir_all(&dir)?;
        write_metrics_csv(&out.metrics, fs::File::create(dir.join("metrics.csv"))?)?;
        result.trace.write_csv(fs::File::create(dir.join("trace.csv"))?)?;
        write_json(&dir.join("run.json"), &out)?;
        Ok(out)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &prepared, &runs, |s| eta_of(s));
    write_json(&cfg.output_dir.join("config.json"), cfg)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    if let Some(t) = &tuning {
        write_json(&cfg.output_dir.join("tune.json"), t)?;
    }
    Ok(ExperimentOutcome {
        summary,
        runs,
        tuning,
        prepared,
    })
}

fn strategy_summary(runs: &[&SubRun], eta: f64) -> StrategySummary {
    let stat = |f: &dyn Fn(&SubRun) -> f64| Stat::of(runs.iter().map(|r| f(r)).collect());
    let opt_stat = |f: &dyn Fn(&SubRun) -> Option<f64>| runs.iter().map(|r| f(r)).collect::<Option<Vec<_>>>().map(Stat::of);
    StrategySummary {
        eta,
        test_acc: opt_stat(&|r| r.final_acc),
        test_loss: stat(&|r| r.final_loss),
        sigma_hat_sq: stat(&|r| r.sigma_hat_sq),
        sigma_hat_sq_probe: opt_stat(&|r| r.sigma_hat_sq_probe),
        n_eff: stat(&|r| r.n_eff),
        p_hist: stat(&|r| r.p_hist),
    }
}

fn summarize(cfg: &ExperimentConfig, prepared: &[Prepared], runs: &[SubRun], eta_of: impl Fn(&Strategy) -> f64) -> Summary {
    let strategies = cfg.all_strategies();
    let mut table = BTreeMap::new();
    for s in &strategies {
        let label = s.label();
        let mine: Vec<&SubRun> = runs.iter().filter(|r| r.strategy == label).collect();
        table.insert(label, strategy_summary(&mine, eta_of(s)));
    }
    let optimal = cfg.optimal_grid.then(|| {
        let (h, label) = P_HIST_GRID
            .iter()
            .map(|&h| (h, Strategy::FixedPHist(h).label()))
            .max_by(|a, b| {
                let (sa, sb) = (&table[&a.1], &table[&b.1]);
                let ka = (sa.test_acc.as_ref().map(|s| s.mean), sa.test_loss.mean);
                let kb = (sb.test_acc.as_ref().map(|s| s.mean), sb.test_loss.mean);
                if better(ka, kb) {
                    std::cmp::Ordering::Greater
                } else if better(kb, ka) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .expect("non-empty grid");
        let s: &StrategySummary = &table[&label];
        OptimalSummary {
            strategy: label.clone(),
            p_hist: h,
            test_acc: s.test_acc.clone(),
            test_loss: s.test_loss.clone(),
        }
    });
    let ours: Vec<&OursEstimate> = prepared.iter().filter_map(|p| p.ours.as_ref()).collect();
    let first = &prepared[0];
    Summary {
        seeds: cfg.seeds.clone(),
        rounds: cfg.train.rounds,
        clients: first.counts.len(),
        m_hist: first.m_hist,
        n_hist_over_n: first.n[..first.m_hist].iter().sum(),
        strategies: table,
        c_ratio: (!ours.is_empty()).then(|| Stat::of(ours.iter().map(|o| o.c_ratio).collect())),
        p_hist_star: (!ours.is_empty()).then(|| Stat::of(ours.iter().map(|o| o.p_hist_star).collect())),
        constants: ours.iter().map(|o| o.constants.clone()).collect(),
        optimal,
    }
}

/// Only the tuning stage of [`run_experiment`]; writes `tune.json`.
pub fn run_tuning(cfg: &ExperimentConfig, exec: Exec) -> Result<TuneOutcome> {
    cfg.validate()?;
    let prepared = prepare_all(cfg, exec)?;
    let outcome = tune(cfg, &prepared, exec)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("tune.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }
}

/// Recomputes the summary of a run directory from its per-run CSV files.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name)).map_err(|e| Error::InvalidInput(format!("{}: {e}", dir.join(name).display())))
    };
    let summary: Summary = serde_json::from_str(&read("summary.json")?)?;
    let cfg: ExperimentConfig = serde_json::from_str(&read("config.json")?)?;
    let mut checks = Vec::new();
    let mut check = |name: String, ok: bool, detail: String| checks.push(Check { name, ok, detail });
    for (label, s) in &summary.strategies {
        let mut accs = Vec::new();
        let mut losses = Vec::new();
        let mut sigmas = Vec::new();
        for &seed in &summary.seeds {
            let sub = run_dir(dir, label, seed);
            let rows = read_metrics_csv(&sub.join("metrics.csv"))?;
            check(
                format!("{label}/seed_{seed}/metrics.csv rows"),
                rows.len() == summary.rounds && rows.iter().enumerate().all(|(k, r)| r.round == k + 1),
                format!("{} rows for {} rounds", rows.len(), summary.rounds),
            );
            let trace_rows = csv::Reader::from_path(sub.join("trace.csv"))?.records().count();
            check(
                format!("{label}/seed_{seed}/trace.csv rows"),
                trace_rows == summary.rounds * summary.clients,
                format!("{trace_rows} rows for {} rounds x {} clients", summary.rounds, summary.clients),
            );
            let q_total: f64 = rows.iter().map(|r| r.q_t).sum();
            check(
                format!("{label}/seed_{seed} q sums to 1"),
                (q_total - 1.0).abs() < 1e-9,
                format!("sum of q_t = {q_total}"),
            );
            if let Some(last) = rows.last() {
                accs.push(last.test_acc);
                losses.push(last.test_loss);
                sigmas.push(last.sigma_hat_sq_partial);
            }
        }
        let recomputed_loss = Stat::of(losses);
        check(
            format!("{label} test_loss"),
            recomputed_loss.close_to(&s.test_loss),
            format!("summary {:?} recomputed {:?}", s.test_loss.mean, recomputed_loss.mean),
        );
        let recomputed_sigma = Stat::of(sigmas);
        check(
            format!("{label} sigma_hat_sq"),
            recomputed_sigma.close_to(&s.sigma_hat_sq),
            format!("summary {:?} recomputed {:?}", s.sigma_hat_sq.mean, recomputed_sigma.mean),
        );
        match (accs.into_iter().collect::<Option<Vec<_>>>(), &s.test_acc) {
            (Some(a), Some(expected)) => {
                let recomputed = Stat::of(a);
                check(
                    format!("{label} test_acc"),
                    recomputed.close_to(expected),
                    format!(
                        "summary {} ± {} recomputed {} ± {}",
                        expected.mean, expected.ci_half_width, recomputed.mean, recomputed.ci_half_width
                    ),
                );
            }
            (None, None) => {}
            _ => check(format!("{label} test_acc"), false, "accuracy present in only one place".into()),
        }
    }
    check(
        "config rounds".into(),
        cfg.train.rounds == summary.rounds,
        format!("config {} summary {}", cfg.train.rounds, summary.rounds),
    );
    Ok(VerifyReport { checks })
}

fn default_m() -> usize {
    50
}

fn default_m_hist() -> usize {
    25
}

fn default_ratio_min() -> f64 {
    1e-3
}

fn default_ratio_max() -> f64 {
    10.0
}

fn default_points() -> usize {
    40
}

fn default_shares() -> Vec<f64> {
    vec![0.05, 0.2, 0.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_m_hist")]
    pub m_hist: usize,
    #[serde(default = "default_ratio_min")]
    pub ratio_min: f64,
    #[serde(default = "default_ratio_max")]
    pub ratio_max: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_shares")]
    pub shares: Vec<f64>,
    pub output_dir: PathBuf,
}

impl BoundsConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BoundsConfig =
            serde_json::from_str(text).map_err(|e| Error::config(json_field(&e, text), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_hist == 0 || self.m_hist >= self.m {
            return Err(Error::config("m_hist", "need 0 < m_hist < m"));
        }
        if !(self.ratio_min > 0.0 && self.ratio_max >= self.ratio_min && self.ratio_max.is_finite()) {
            return Err(Error::config("ratio_min", "need 0 < ratio_min <= ratio_max"));
        }
        if self.points == 0 {
            return Err(Error::config("points", "must be at least 1"));
        }
        if self.shares.is_empty() || self.shares.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return Err(Error::config("shares", "every share must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Sweeps the bound curves and writes `curves.csv`.
pub fn run_bound_exploration(cfg: &BoundsConfig, exec: Exec) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    let ratios = log_grid(cfg.ratio_min, cfg.ratio_max, cfg.points);
    let rows = emit_bound_curves(&ratios, &cfg.shares, cfg.m, cfg.m_hist, exec)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_curves_csv(&rows, fs::File::create(cfg.output_dir.join("curves.csv"))?)?;
    Ok(rows)
}
