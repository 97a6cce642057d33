//! Heuristic token-importance metrics computed from prefill-observable data.
//!
//! * `snapkv`: mean attention over the last `window` observation rows, then a
//!   same-length 1-D max pool of width `kernel` whose edge windows are
//!   truncated rather than zero padded.
//! * `keydiff`: negative cosine similarity between each key and the head's
//!   mean key; the most anomalous keys score highest.
//! * `oracle`: the oracle importance itself, for reference runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{compute_oracle_importance, Ranking};
use crate::shape::HeadValues;
use crate::trace::TraceBundle;

pub const SNAPKV_WINDOW: usize = 32;
pub const SNAPKV_KERNEL: usize = 7;
pub const KEYDIFF_WINDOW: usize = 1;

/// Per-head score vectors over prefill positions.
pub type HeadScores = HeadValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Snapkv,
    Keydiff,
    #[serde(rename = "oracle")]
    OraclePassthrough,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Snapkv => "snapkv",
            MetricKind::Keydiff => "keydiff",
            MetricKind::OraclePassthrough => "oracle",
        }
    }

    /// Recent-token window kept by the eviction safeguards for this metric.
    pub fn default_recent_window(&self) -> usize {
        match self {
            MetricKind::Snapkv => SNAPKV_WINDOW,
            MetricKind::Keydiff => KEYDIFF_WINDOW,
            MetricKind::OraclePassthrough => 0,
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snapkv" => Ok(MetricKind::Snapkv),
            "keydiff" => Ok(MetricKind::Keydiff),
            "oracle" | "oracle_passthrough" => Ok(MetricKind::OraclePassthrough),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub window_size: usize,
    pub kernel_size: usize,
}

impl MetricSpec {
    pub fn new(kind: MetricKind) -> Self {
        match kind {
            MetricKind::Snapkv => Self::snapkv(),
            MetricKind::Keydiff => Self::keydiff(),
            MetricKind::OraclePassthrough => Self::oracle(),
        }
    }

    pub fn snapkv() -> Self {
        MetricSpec {
            kind: MetricKind::Snapkv,
            window_size: SNAPKV_WINDOW,
            kernel_size: SNAPKV_KERNEL,
        }
    }

    pub fn keydiff() -> Self {
        MetricSpec {
            kind: MetricKind::Keydiff,
            window_size: KEYDIFF_WINDOW,
            kernel_size: 1,
        }
    }

    pub fn oracle() -> Self {
        MetricSpec {
            kind: MetricKind::OraclePassthrough,
            window_size: 1,
            kernel_size: 1,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window_size = window;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel_size = kernel;
        self
    }

    pub fn validate(&self, prefill_len: usize) -> Result<()> {
        if self.window_size == 0 || self.window_size > prefill_len {
            return Err(Error::Config(format!(
                "window {} must lie in 1..={prefill_len}",
                self.window_size
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel_size)));
        }
        Ok(())
    }
}

/// Scores every head of `trace` with the metric described by `spec`.
pub fn score(trace: &TraceBundle, spec: &MetricSpec) -> Result<HeadScores> {
    match spec.kind {
        MetricKind::Snapkv => snapkv_score(trace, spec),
        MetricKind::Keydiff => keydiff_score(trace, spec),
        MetricKind::OraclePassthrough => {
            Ok(compute_oracle_importance(trace, false)?.values().clone())
        }
    }
}

pub fn snapkv_score(trace: &TraceBundle, spec: &MetricSpec) -> Result<HeadScores> {
    let shape = *trace.shape();
    spec.validate(shape.prefill_len)?;
    let rows = trace.window_rows().ok_or_else(|| Error::MetricUnavailable {
        metric: "snapkv".into(),
        reason: "trace has no prefill_attn".into(),
    })?;
    if rows < spec.window_size {
        return Err(Error::MetricUnavailable {
            metric: "snapkv".into(),
            reason: format!("window {} exceeds the {rows} recorded rows", spec.window_size),
        });
    }
    let t = shape.prefill_len;
    let mut out = HeadValues::zeros(shape.num_layers, shape.num_heads, t);
    let mut mean = vec![0.0f64; t];
    for head in shape.heads() {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for row in rows - spec.window_size..rows {
            let attn = trace.prefill_row(head, row).expect("rows checked");
            for (m, &a) in mean.iter_mut().zip(attn) {
                *m += a as f64;
            }
        }
        let w = spec.window_size as f64;
        mean.iter_mut().for_each(|m| *m /= w);
        max_pool(&mean, spec.kernel_size, out.head_mut(head));
    }
    Ok(out)
}

/// Same-length max pool with truncated edge windows.
pub fn max_pool(input: &[f64], kernel: usize, out: &mut [f64]) {
    let half = kernel / 2;
    let n = input.len();
    for (j, o) in out.iter_mut().enumerate() {
        let lo = j.saturating_sub(half);
        let hi = (j + half + 1).min(n);
        *o = input[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
}

pub fn keydiff_score(trace: &TraceBundle, spec: &MetricSpec) -> Result<HeadScores> {
    let shape = *trace.shape();
    spec.validate(shape.prefill_len)?;
    if trace.keys().is_none() || shape.head_dim == 0 {
        return Err(Error::MetricUnavailable {
            metric: "keydiff".into(),
            reason: "trace has no key vectors".into(),
        });
    }
    let t = shape.prefill_len;
    let mut out = HeadValues::zeros(shape.num_layers, shape.num_heads, t);
    for head in shape.heads() {
        let keys: Vec<Vec<f64>> = (0..t)
            .map(|j| {
                trace
                    .key(head, j)
                    .expect("keys present")
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect();
        out.head_mut(head).copy_from_slice(&keydiff_head(&keys));
    }
    Ok(out)
}

/// Negative cosine of each key against the mean key. Zero-norm keys score
/// `-1`; a zero mean key leaves every score at `0`.
pub fn keydiff_head(keys: &[Vec<f64>]) -> Vec<f64> {
    let d = keys.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for k in keys {
        for (m, v) in mean.iter_mut().zip(k) {
            *m += v;
        }
    }
    let n = keys.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mean_norm = norm(&mean);
    keys.iter()
        .map(|k| {
            let kn = norm(k);
            if kn == 0.0 {
                -1.0
            } else if mean_norm == 0.0 {
                0.0
            } else {
                let dot: f64 = k.iter().zip(&mean).map(|(a, b)| a * b).sum();
                // + 0.0 folds -0.0 into 0.0
                -(dot / (kn * mean_norm)) + 0.0
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Ranking by descending score with the ascending-position tie-break.
pub fn metric_ranking(scores: &HeadScores) -> Result<Ranking> {
    Ranking::from_scores(scores)
}

/// Kendall's tau-b between two score vectors over the same positions.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n1 = (concordant + discordant + ties_a) as f64;
    let n2 = (concordant + discordant + ties_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / (n1 * n2).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::{HeadIndex, ModelShape};
    use crate::trace::Tensor;

    fn windowed(mean_rows: Vec<Vec<f32>>) -> TraceBundle {
        let t = mean_rows[0].len();
        let w = mean_rows.len();
        let shape = ModelShape::new(1, 1, t, 1, 0).unwrap();
        TraceBundle::new(
            shape,
            Tensor::new(vec![1, 1, 1, t], vec![0.0; t]).unwrap(),
            Tensor::new(vec![1, 1, t], vec![1.0; t]).unwrap(),
            Some(Tensor::new(vec![1, 1, w, t], mean_rows.concat()).unwrap()),
            None,
        )
        .unwrap()
    }

    const H0: HeadIndex = HeadIndex { layer: 0, head: 0 };

    #[test]
    fn constant_attention_stays_constant() {
        let b = windowed(vec![vec![0.125; 8]; 3]);
        let s = snapkv_score(&b, &MetricSpec::snapkv().with_window(3).with_kernel(5)).unwrap();
        assert!(s.head(H0).iter().all(|&v| (v - 0.125).abs() < 1e-12));
    }

    #[test]
    fn truncated_edge_pooling() {
        let b = windowed(vec![vec![0.0, 1.0, 0.0, 0.0, 0.0]]);
        let s = snapkv_score(&b, &MetricSpec::snapkv().with_window(1).with_kernel(3)).unwrap();
        assert_eq!(s.head(H0), &[1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn kernel_one_is_window_mean() {
        let b = windowed(vec![vec![0.5, 0.25, 0.25], vec![0.25, 0.25, 0.5]]);
        let s = snapkv_score(&b, &MetricSpec::snapkv().with_window(2).with_kernel(1)).unwrap();
        assert_eq!(s.head(H0), &[0.375, 0.25, 0.375]);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let shape = ModelShape::new(1, 1, 2, 1, 0).unwrap();
        let b = TraceBundle::new(
            shape,
            Tensor::new(vec![1, 1, 1, 2], vec![0.0; 2]).unwrap(),
            Tensor::new(vec![1, 1, 2], vec![1.0; 2]).unwrap(),
            None,
            None,
        )
        .unwrap();
        let spec = MetricSpec::snapkv().with_window(1);
        assert!(matches!(snapkv_score(&b, &spec), Err(Error::MetricUnavailable { .. })));
        assert!(matches!(
            keydiff_score(&b, &MetricSpec::keydiff()),
            Err(Error::MetricUnavailable { .. })
        ));
    }

    #[test]
    fn even_kernel_is_rejected() {
        let b = windowed(vec![vec![0.25; 4]]);
        let spec = MetricSpec::snapkv().with_window(1).with_kernel(4);
        assert!(matches!(snapkv_score(&b, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn identical_keys_score_minus_one() {
        let s = keydiff_head(&vec![vec![0.3, -1.2]; 4]);
        assert!(s.iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn hand_computed_cosines() {
        let keys = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        let s = keydiff_head(&keys);
        assert_eq!(s, vec![0.0, 0.0, -1.0]);
        let scores = HeadValues::from_vec(1, 1, 3, s).unwrap();
        assert_eq!(metric_ranking(&scores).unwrap().head(H0), &[0, 1, 2]);
    }

    #[test]
    fn duplicated_keys_leave_scores_unchanged() {
        let keys = vec![vec![1.0, 0.5], vec![-0.2, 1.0], vec![0.3, 0.3]];
        let doubled: Vec<Vec<f64>> = keys.iter().chain(keys.iter()).cloned().collect();
        let a = keydiff_head(&keys);
        let b = keydiff_head(&doubled);
        for (x, y) in a.iter().zip(&b[..3]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_key_scores_minus_one() {
        let s = keydiff_head(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(s[0], -1.0);
    }

    #[test]
    fn nan_scores_are_rejected() {
        let scores = HeadValues::from_vec(1, 1, 2, vec![0.1, f64::NAN]).unwrap();
        assert!(matches!(
            metric_ranking(&scores),
            Err(Error::InvalidScore { position: 1, .. })
        ));
    }

    #[test]
    fn ranking_examples() {
        let r = |v: Vec<f64>| {
            let n = v.len();
            metric_ranking(&HeadValues::from_vec(1, 1, n, v).unwrap())
                .unwrap()
                .head(H0)
                .to_vec()
        };
        assert_eq!(r(vec![0.3, 0.3, 0.3]), vec![0, 1, 2]);
        assert_eq!(r(vec![1.0, 3.0, 2.0]), vec![1, 2, 0]);
    }

    #[test]
    fn kendall_tau_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((kendall_tau(&a, &a) - 1.0).abs() < 1e-12);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((kendall_tau(&a, &rev) + 1.0).abs() < 1e-12);
    }
}
