//! Seeded synthetic traces.
//!
//! A [`SyntheticModel`] fixes per-head character (attention sharpness,
//! window noise, value-norm scale, key geometry, and whether the head hides
//! "planted" tokens) from a model seed. Each call to [`SyntheticModel::trace`]
//! then draws one prompt from it. Planted tokens receive strong decode-time
//! attention and boosted value norms while the prefill observation window
//! barely looks at them: the window-based metric misjudges exactly those
//! heads.
//!
//! Attention rows are softmax over `T + k` logits at decode step `k`, keeping
//! only the `T` prefill columns, so every row carries at most unit mass.
//! Window rows are causal softmax rows for the last `W` prefill queries.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Tensor, TraceBundle};
use crate::error::{Error, Result};
use crate::shape::ModelShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Window attention tracks decode attention in every head.
    Aligned,
    /// Most heads (at least a quarter) hide planted tokens.
    Misaligned,
    /// Planted and faithful heads alternate.
    Mixed,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Aligned => "aligned",
            Scenario::Misaligned => "misaligned",
            Scenario::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(Scenario::Aligned),
            "misaligned" => Ok(Scenario::Misaligned),
            "mixed" => Ok(Scenario::Mixed),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticOptions {
    /// Observation-window rows; `None` means `min(32, T)`.
    pub window_rows: Option<usize>,
    pub with_keys: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            window_rows: None,
            with_keys: true,
        }
    }
}

// Logit offsets in units of the head temperature.
const PLANTED_DECODE_SHIFT: f64 = 2.5;
const PLANTED_DECODE_SPREAD: f64 = 0.3;
const PLANTED_WINDOW_SHIFT: f64 = 2.5;
const PLANTED_VNORM_BOOST: f64 = 2.5;
const DECODE_NOISE: f64 = 0.5;
const VNORM_SPREAD: f64 = 0.4;
/// Lag-one correlation of token salience along the sequence; neighbouring
/// tokens matter together, which is what window pooling relies on.
const SALIENCE_CORRELATION: f64 = 0.9;

#[derive(Debug, Clone)]
struct HeadCharacter {
    temperature: f64,
    window_noise: f64,
    vnorm_mu: f64,
    planted: bool,
    key_center: Vec<f64>,
    key_axis: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    shape: ModelShape,
    seed: u64,
    scenario: Scenario,
    options: SyntheticOptions,
    heads: Vec<HeadCharacter>,
}

impl SyntheticModel {
    pub fn new(shape: ModelShape, seed: u64, scenario: Scenario) -> Result<Self> {
        Self::with_options(shape, seed, scenario, SyntheticOptions::default())
    }

    pub fn with_options(
        shape: ModelShape,
        seed: u64,
        scenario: Scenario,
        options: SyntheticOptions,
    ) -> Result<Self> {
        shape.validate()?;
        if let Some(w) = options.window_rows {
            if w == 0 || w > shape.prefill_len {
                return Err(Error::InvalidShape(format!(
                    "window rows {w} must lie in 1..={}",
                    shape.prefill_len
                )));
            }
        }
        let n = shape.head_count();
        let mut rng = stream_rng(seed, u64::MAX, 0);
        let planted = planted_heads(&shape, scenario, &mut rng);
        let d = shape.head_dim;
        let heads = (0..n)
            .map(|i| HeadCharacter {
                temperature: rng.random_range(0.8..2.6),
                window_noise: rng.random_range(0.2..1.4),
                vnorm_mu: 0.6 * normal(&mut rng),
                planted: planted[i],
                key_center: (0..d).map(|_| normal(&mut rng)).collect(),
                key_axis: (0..d).map(|_| normal(&mut rng)).collect(),
            })
            .collect();
        Ok(SyntheticModel {
            shape,
            seed,
            scenario,
            options,
            heads,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    /// Flat indices of heads that carry planted tokens.
    pub fn planted_heads(&self) -> Vec<usize> {
        self.heads
            .iter()
            .enumerate()
            .filter(|(_, h)| h.planted)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn window_rows(&self) -> usize {
        self.options
            .window_rows
            .unwrap_or_else(|| self.shape.prefill_len.min(32))
    }

    /// Draws the trace of prompt `query`. Pure in `(model, query)`.
    pub fn trace(&self, query: u64) -> TraceBundle {
        let s = self.shape;
        let (t, k_max, d) = (s.prefill_len, s.decode_len, s.head_dim);
        let w_rows = self.window_rows();
        let with_keys = self.options.with_keys && d > 0;
        let n = s.head_count();

        let mut decode = Vec::with_capacity(n * k_max * t);
        let mut vnorm = Vec::with_capacity(n * t);
        let mut window = Vec::with_capacity(n * w_rows * t);
        let mut keys = Vec::with_capacity(if with_keys { n * t * d } else { 0 });
        let mut logits = vec![0.0f64; t + k_max];

        for (flat, ch) in self.heads.iter().enumerate() {
            let mut rng = stream_rng(self.seed, query, flat as u64 + 1);
            let temp = ch.temperature;
            let salience = correlated_normals(&mut rng, t, SALIENCE_CORRELATION);
            let mut is_planted = vec![false; t];
            if ch.planted {
                let count = (t / 8).max(2).min(t);
                for p in sample(&mut rng, t, count) {
                    is_planted[p] = true;
                }
            }

            for step in 1..=k_max {
                for j in 0..t {
                    let base = if is_planted[j] {
                        PLANTED_DECODE_SHIFT + PLANTED_DECODE_SPREAD * salience[j]
                    } else {
                        salience[j]
                    };
                    logits[j] = temp * base + DECODE_NOISE * normal(&mut rng);
                }
                for l in logits[t..t + step].iter_mut() {
                    *l = temp * normal(&mut rng);
                }
                softmax_prefix(&logits[..t + step], t, &mut decode);
            }

            for j in 0..t {
                let boost = if is_planted[j] { PLANTED_VNORM_BOOST } else { 1.0 };
                let v = (ch.vnorm_mu + VNORM_SPREAD * normal(&mut rng)).exp() * boost;
                vnorm.push(v as f32);
            }

            for row in 0..w_rows {
                let query_pos = t - w_rows + row;
                for j in 0..=query_pos {
                    let shift = if is_planted[j] { PLANTED_WINDOW_SHIFT } else { 0.0 };
                    logits[j] = temp * (salience[j] - shift + ch.window_noise * normal(&mut rng));
                }
                softmax_prefix(&logits[..=query_pos], query_pos + 1, &mut window);
                window.extend(std::iter::repeat_n(0.0f32, t - query_pos - 1));
            }

            if with_keys {
                for j in 0..t {
                    let offset = if is_planted[j] {
                        0.1 * normal(&mut rng)
                    } else {
                        0.8 * salience[j] + 0.2 * normal(&mut rng)
                    };
                    for c in 0..d {
                        let jitter = 0.15 * normal(&mut rng);
                        keys.push((ch.key_center[c] + offset * ch.key_axis[c] + jitter) as f32);
                    }
                }
            }
        }

        let (l, h) = (s.num_layers, s.num_heads);
        let bundle = TraceBundle::new(
            s,
            Tensor::new(vec![l, h, k_max, t], decode).expect("decode dims"),
            Tensor::new(vec![l, h, t], vnorm).expect("vnorm dims"),
            Some(Tensor::new(vec![l, h, w_rows, t], window).expect("window dims")),
            with_keys.then(|| Tensor::new(vec![l, h, t, d], keys).expect("key dims")),
        )
        .expect("synthetic trace satisfies bundle invariants");
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("generator".into(), "synthetic".into());
        meta.insert("scenario".into(), self.scenario.as_str().into());
        meta.insert("query".into(), query.to_string());
        bundle.with_seed(Some(self.seed)).with_meta(meta)
    }
}

/// One-shot generator: the first prompt of the model drawn from `seed`.
pub fn generate_synthetic_trace(shape: ModelShape, seed: u64, scenario: Scenario) -> Result<TraceBundle> {
    Ok(SyntheticModel::new(shape, seed, scenario)?.trace(0))
}

fn planted_heads(shape: &ModelShape, scenario: Scenario, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = shape.head_count();
    match scenario {
        Scenario::Aligned => vec![false; n],
        Scenario::Mixed => (0..n)
            .map(|i| (i / shape.num_heads + i % shape.num_heads) % 2 == 1)
            .collect(),
        Scenario::Misaligned => {
            let mut planted: Vec<bool> = (0..n).map(|_| rng.random_bool(0.75)).collect();
            let minimum = n.div_ceil(4);
            let mut count = planted.iter().filter(|p| **p).count();
            let mut i = 0;
            while count < minimum {
                if !planted[i] {
                    planted[i] = true;
                    count += 1;
                }
                i += 1;
            }
            planted
        }
    }
}

fn stream_rng(seed: u64, query: u64, head: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&query.to_le_bytes());
    bytes[16..24].copy_from_slice(&head.to_le_bytes());
    bytes[24..].copy_from_slice(b"lukv-syn");
    ChaCha8Rng::from_seed(bytes)
}

/// Stationary unit-variance AR(1) sequence.
fn correlated_normals(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> Vec<f64> {
    let innovation = (1.0 - rho * rho).sqrt();
    let mut prev = normal(rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            prev = rho * prev + innovation * normal(rng);
        }
        out.push(prev);
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Softmax over `logits`, appending the first `keep` probabilities as `f32`.
fn softmax_prefix(logits: &[f64], keep: usize, out: &mut Vec<f32>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    out.extend(logits[..keep].iter().map(|&x| ((x - max).exp() / total) as f32));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::HeadIndex;

    #[test]
    fn single_row_is_subnormalized() {
        let shape = ModelShape::new(1, 1, 4, 1, 0).unwrap();
        let b = generate_synthetic_trace(shape, 7, Scenario::Aligned).unwrap();
        let sum: f64 = b
            .decode_row(HeadIndex::new(0, 0), 0)
            .iter()
            .map(|&v| v as f64)
            .sum();
        assert!(sum > 0.0 && sum <= 1.0 + 1e-6);
        assert!(b.keys().is_none());
    }

    #[test]
    fn generation_is_deterministic() {
        let shape = ModelShape::new(2, 2, 16, 3, 4).unwrap();
        let a = generate_synthetic_trace(shape, 11, Scenario::Mixed).unwrap();
        let b = generate_synthetic_trace(shape, 11, Scenario::Mixed).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_trace(shape, 12, Scenario::Mixed).unwrap();
        assert_ne!(a.decode_attn(), c.decode_attn());
    }

    #[test]
    fn planted_fraction_by_scenario() {
        let shape = ModelShape::new(4, 4, 8, 1, 0).unwrap();
        for seed in 0..20 {
            let m = SyntheticModel::new(shape, seed, Scenario::Misaligned).unwrap();
            assert!(m.planted_heads().len() >= 4);
        }
        let mixed = SyntheticModel::new(shape, 0, Scenario::Mixed).unwrap();
        assert_eq!(mixed.planted_heads().len(), 8);
        let aligned = SyntheticModel::new(shape, 0, Scenario::Aligned).unwrap();
        assert!(aligned.planted_heads().is_empty());
    }

    #[test]
    fn window_rows_are_causal() {
        let shape = ModelShape::new(1, 1, 10, 1, 0).unwrap();
        let opts = SyntheticOptions {
            window_rows: Some(3),
            with_keys: false,
        };
        let b = SyntheticModel::with_options(shape, 1, Scenario::Aligned, opts)
            .unwrap()
            .trace(0);
        let first = b.prefill_row(HeadIndex::new(0, 0), 0).unwrap();
        // query position 7 sees positions 0..=7 only
        assert_eq!(&first[8..], &[0.0, 0.0]);
        let total: f64 = first.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn scenario_parses() {
        assert_eq!("mixed".parse::<Scenario>().unwrap(), Scenario::Mixed);
        assert!("other".parse::<Scenario>().is_err());
    }
}
