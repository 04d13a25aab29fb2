//! Client arrival processes, sample sources, and the synthetic generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, sigmoid, Example, SampleMeta};
use crate::rng::{self, Purpose};

/// The counting process `N_m^(t)` of a client, described by its increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingProcess {
    /// `b` samples every round.
    ConstantRate { b: usize },
    /// `n0` samples at round 1, nothing afterwards.
    SinglePulse { n0: usize },
    /// `n0` samples at rounds `1, 1 + period, 1 + 2·period, ...`.
    Pulses { n0: usize, period: usize },
    /// Poisson(`rate`) samples per round, clamped to `[min_batch, capacity]`.
    Poisson { rate: f64, min_batch: usize },
}

impl CountingProcess {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CountingProcess::ConstantRate { b } => b >= 1,
            CountingProcess::SinglePulse { n0 } => n0 >= 1,
            CountingProcess::Pulses { n0, period } => n0 >= 1 && period >= 1,
            CountingProcess::Poisson { rate, min_batch } => rate > 0.0 && rate.is_finite() && min_batch >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid counting process {self:?}")))
        }
    }

    /// Size of the batch received at round `t` (1-based) and whether a clamp
    /// was applied to honor `1 ≤ b ≤ C`.
    pub fn batch_size(&self, seed: u64, client: usize, t: usize, capacity: Option<usize>) -> (usize, bool) {
        match *self {
            CountingProcess::ConstantRate { b } => (b, false),
            CountingProcess::SinglePulse { n0 } => (if t == 1 { n0 } else { 0 }, false),
            CountingProcess::Pulses { n0, period } => (if (t - 1).is_multiple_of(period) { n0 } else { 0 }, false),
            CountingProcess::Poisson { rate, min_batch } => {
                let mut r = rng::stream(seed, Purpose::BatchSize, client as u64, t as u64);
                let draw = Poisson::new(rate).expect("validated rate").sample(&mut r) as usize;
                let upper = capacity.unwrap_or(usize::MAX).max(min_batch);
                let clamped = draw.clamp(min_batch, upper);
                (clamped, clamped != draw)
            }
        }
    }

    /// Batch sizes for rounds `1..=rounds`, without touching any sample.
    pub fn batch_sizes(&self, seed: u64, client: usize, rounds: usize, capacity: Option<usize>) -> Vec<usize> {
        (1..=rounds)
            .map(|t| self.batch_size(seed, client, t, capacity).0)
            .collect()
    }
}

/// Features and label of a sample before it is stamped with arrival metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub features: Vec<f64>,
    pub label: f64,
}

/// Draws samples of one client of the synthetic logistic task. Sample `i`
/// depends only on `(seed, purpose, client, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGenerator {
    pub theta: Vec<f64>,
    pub bias: bool,
    pub seed: u64,
    pub client: usize,
}

impl SyntheticGenerator {
    pub fn draw(&self, purpose: Purpose, index: u64) -> LabeledPoint {
        let mut r = rng::stream(self.seed, purpose, self.client as u64, index);
        let d = self.theta.len();
        let free = if self.bias { d - 1 } else { d };
        let mut features: Vec<f64> = (0..free).map(|_| r.random_range(-1.0..=1.0)).collect();
        if self.bias {
            features.push(1.0);
        }
        let p = sigmoid(dot(&features, &self.theta));
        let label = if Bernoulli::new(p).expect("probability").sample(&mut r) {
            1.0
        } else {
            0.0
        };
        LabeledPoint { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    /// A finite, ordered list consumed front to back.
    Fixed(Vec<LabeledPoint>),
    /// An unbounded generator.
    Generator(SyntheticGenerator),
}

/// A client's stream `B_m^(1), B_m^(2), ...`.
#[derive(Debug, Clone)]
pub struct ClientStream {
    pub client_id: usize,
    pub process: CountingProcess,
    pub source: SampleSource,
    /// Memory capacity, used to clamp Poisson batches.
    pub capacity: Option<usize>,
    /// Root seed of the batch-size sub-streams.
    pub seed: u64,
    consumed: usize,
    clamp_events: usize,
}

impl ClientStream {
    pub fn new(
        client_id: usize,
        process: CountingProcess,
        source: SampleSource,
        capacity: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        process.validate()?;
        Ok(ClientStream {
            client_id,
            process,
            source,
            capacity,
            seed,
            consumed: 0,
            clamp_events: 0,
        })
    }

    /// Number of samples received so far, `N_m^(t)`.
    pub fn received(&self) -> usize {
        self.consumed
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn next_batch(&mut self, t: usize) -> Result<Vec<Example>> {
        let (size, clamped) = self.process.batch_size(self.seed, self.client_id, t, self.capacity);
        if clamped {
            self.clamp_events += 1;
        }
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            let index = self.consumed + 1;
            let point = match &self.source {
                SampleSource::Fixed(list) => list.get(self.consumed).cloned().ok_or(Error::StreamExhausted {
                    client: self.client_id,
                    round: t,
                })?,
                SampleSource::Generator(g) => g.draw(Purpose::SampleContent, index as u64),
            };
            batch.push(Example {
                meta: SampleMeta {
                    client_id: self.client_id,
                    arrival_round: t,
                    global_index: index,
                },
                features: point.features,
                label: point.label,
            });
            self.consumed += 1;
        }
        Ok(batch)
    }
}

/// Parameters of the synthetic logistic-regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Dimension of θ. With `bias` the last feature is the constant 1.
    pub dim: usize,
    #[serde(default = "default_bias")]
    pub bias: bool,
    /// Standard deviation of the per-client drift around θ₀.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub per_client_counts: Vec<usize>,
    pub seed: u64,
}

fn default_bias() -> bool {
    true
}

fn default_epsilon() -> f64 {
    0.1
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || (self.bias && self.dim < 2) {
            return Err(Error::config("dim", "must leave at least one random feature"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be finite and non-negative"));
        }
        if self.per_client_counts.is_empty() || self.per_client_counts.contains(&0) {
            return Err(Error::config("per_client_counts", "every client needs at least one sample"));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub theta0: Vec<f64>,
    pub client_thetas: Vec<Vec<f64>>,
    pub clients: Vec<Vec<LabeledPoint>>,
    pub generators: Vec<SyntheticGenerator>,
}

impl SyntheticData {
    /// Independent draws from client `m`'s distribution for evaluation.
    pub fn draw(&self, client: usize, purpose: Purpose, count: usize) -> Vec<LabeledPoint> {
        (1..=count as u64)
            .map(|i| self.generators[client].draw(purpose, i))
            .collect()
    }
}

/// θ₀ ~ N(0, I), θ_m = θ₀ + ε g_m, x ~ U[-1, 1], y ~ Bernoulli(sigmoid(<x, θ_m>)).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut r0 = rng::stream(spec.seed, Purpose::GroundTruth, 0, 0);
    let theta0: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut r0)).collect();
    let drift = Normal::new(0.0, 1.0).expect("unit normal");
    let mut client_thetas = Vec::with_capacity(spec.per_client_counts.len());
    let mut generators = Vec::with_capacity(spec.per_client_counts.len());
    let mut clients = Vec::with_capacity(spec.per_client_counts.len());
    for (m, &count) in spec.per_client_counts.iter().enumerate() {
        let mut r = rng::stream(spec.seed, Purpose::GroundTruth, 1, m as u64);
        let theta: Vec<f64> = theta0
            .iter()
            .map(|t0| t0 + spec.epsilon * drift.sample(&mut r))
            .collect();
        let generator = SyntheticGenerator {
            theta: theta.clone(),
            bias: spec.bias,
            seed: spec.seed,
            client: m,
        };
        clients.push(
            (1..=count as u64)
                .map(|i| generator.draw(Purpose::SampleContent, i))
                .collect(),
        );
        client_thetas.push(theta);
        generators.push(generator);
    }
    Ok(SyntheticData {
        theta0,
        client_thetas,
        clients,
        generators,
    })
}

/// Samples loaded from a `client_id,arrival_round,label,f0,f1,...` file,
/// ordered per client by `(arrival_round, file order)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvCorpus {
    pub dim: usize,
    pub clients: BTreeMap<usize, Vec<LabeledPoint>>,
}

pub fn load_csv_corpus(path: &Path) -> Result<CsvCorpus> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["client_id", "arrival_round", "label"];
    if headers.len() < 4 || headers.iter().take(3).ne(expected) {
        return Err(Error::InvalidInput(format!(
            "corpus header must start with client_id,arrival_round,label,f0; got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    for (i, h) in headers.iter().skip(3).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::InvalidInput(format!("expected feature column f{i}, found {h}")));
        }
    }
    let dim = headers.len() - 3;
    let mut rows: BTreeMap<usize, Vec<(usize, usize, LabeledPoint)>> = BTreeMap::new();
    for (order, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("row {}: column {}: {e}", order + 2, headers[i].to_owned())))
        };
        let client = parse(0)? as usize;
        let round = parse(1)? as usize;
        let label = parse(2)?;
        let features = (3..record.len()).map(parse).collect::<Result<Vec<_>>>()?;
        rows.entry(client)
            .or_default()
            .push((round, order, LabeledPoint { features, label }));
    }
    let clients = rows
        .into_iter()
        .map(|(c, mut v)| {
            v.sort_by_key(|(round, order, _)| (*round, *order));
            (c, v.into_iter().map(|(_, _, p)| p).collect())
        })
        .collect();
    Ok(CsvCorpus { dim, clients })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(n: usize) -> SampleSource {
        SampleSource::Fixed(
            (0..n)
                .map(|i| LabeledPoint {
                    features: vec![i as f64],
                    label: 0.0,
                })
                .collect(),
        )
    }

    #[test]
    fn constant_rate_and_pulse() {
        let mut s = ClientStream::new(0, CountingProcess::ConstantRate { b: 3 }, fixed(9), None, 1).unwrap();
        for t in 1..=3 {
            let b = s.next_batch(t).unwrap();
            assert_eq!(b.len(), 3);
            assert!(b.iter().all(|e| e.meta.arrival_round == t));
        }
        assert!(matches!(s.next_batch(4), Err(Error::StreamExhausted { client: 0, round: 4 })));

        let mut p = ClientStream::new(1, CountingProcess::SinglePulse { n0: 40 }, fixed(40), None, 1).unwrap();
        assert_eq!(p.next_batch(1).unwrap().len(), 40);
        assert!(p.next_batch(2).unwrap().is_empty());
        assert_eq!(p.received(), 40);
    }

    #[test]
    fn global_indices_partition_stream() {
        let mut s = ClientStream::new(
            2,
            CountingProcess::Poisson { rate: 2.5, min_batch: 1 },
            fixed(10_000),
            Some(6),
            9,
        )
        .unwrap();
        let mut seen = Vec::new();
        for t in 1..=200 {
            let b = s.next_batch(t).unwrap();
            assert!((1..=6).contains(&b.len()));
            seen.extend(b.iter().map(|e| e.meta.global_index));
        }
        assert_eq!(seen, (1..=seen.len()).collect::<Vec<_>>());
        assert!(s.clamp_events() > 0);
    }

    #[test]
    fn clamped_poisson_mean_matches_law() {
        // Oracle: E[max(X, 1)] for X ~ Poisson(2) is 2 + P(X = 0) = 2 + e^-2,
        // Var[max(X, 1)] = E[max(X,1)^2] - mean^2 with E[max(X,1)^2] = 6 + e^-2.
        let process = CountingProcess::Poisson { rate: 2.0, min_batch: 1 };
        let n = 10_000;
        let sizes = process.batch_sizes(5, 0, n, None);
        let mean = sizes.iter().sum::<usize>() as f64 / n as f64;
        let e = (-2.0f64).exp();
        let law_mean = 2.0 + e;
        let law_var = 6.0 + e - law_mean * law_mean;
        let se = (law_var / n as f64).sqrt();
        assert!((mean - law_mean).abs() < 3.0 * se, "mean {mean} vs {law_mean}");
    }

    #[test]
    fn synthetic_generation() {
        let spec = SyntheticSpec {
            dim: 4,
            bias: true,
            epsilon: 0.0,
            per_client_counts: vec![5, 7, 3],
            seed: 42,
        };
        let data = generate_synthetic(&spec).unwrap();
        for theta in &data.client_thetas {
            assert_eq!(theta, &data.theta0);
        }
        for (client, &n) in data.clients.iter().zip(&spec.per_client_counts) {
            assert_eq!(client.len(), n);
            for p in client {
                assert!(p.features.iter().all(|x| (-1.0..=1.0).contains(x)));
                assert_eq!(*p.features.last().unwrap(), 1.0);
                assert!(p.label == 0.0 || p.label == 1.0);
            }
        }
        assert_eq!(generate_synthetic(&spec).unwrap(), data);
    }

    #[test]
    fn synthetic_label_law() {
        // d = 1 without bias: x ~ U[-1, 1]. Restrict to |x| < 0.05 where
        // sigmoid(x θ) is nearly constant and compare with a binomial CI.
        let g = SyntheticGenerator {
            theta: vec![2.0],
            bias: false,
            seed: 1,
            client: 0,
        };
        let (mut hits, mut ones, mut expected) = (0usize, 0usize, 0.0);
        for i in 1..=100_000u64 {
            let p = g.draw(Purpose::SampleContent, i);
            if p.features[0].abs() < 0.05 {
                hits += 1;
                ones += p.label as usize;
                expected += sigmoid(2.0 * p.features[0]);
            }
        }
        let phat = ones as f64 / hits as f64;
        let pbar = expected / hits as f64;
        let se = (pbar * (1.0 - pbar) / hits as f64).sqrt();
        assert!((phat - pbar).abs() < 3.0 * se, "{phat} vs {pbar}");
    }

    #[test]
    fn csv_corpus_sorted_by_client_round_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(
            &path,
            "client_id,arrival_round,label,f0,f1\n1,2,1,0.5,0.5\n0,3,0,1,1\n1,1,0,0.1,0.2\n0,1,1,2,2\n1,2,0,0.7,0.7\n",
        )
        .unwrap();
        let c = load_csv_corpus(&path).unwrap();
        assert_eq!(c.dim, 2);
        let f0: Vec<f64> = c.clients[&1].iter().map(|p| p.features[0]).collect();
        assert_eq!(f0, vec![0.1, 0.5, 0.7]);
        assert_eq!(c.clients[&0][0].features, vec![2.0, 2.0]);
    }
}
