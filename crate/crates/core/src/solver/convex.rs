//! Convex surrogate of a loss curve and its marginal gains.

use crate::error::{Error, Result};
use crate::loss::LossCurve;
use crate::shape::HeadIndex;

/// Greatest convex minorant of a [`LossCurve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexLossCurve {
    pub head: HeadIndex,
    values: Vec<f64>,
    contact: Vec<bool>,
}

impl ConvexLossCurve {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, b: usize) -> f64 {
        self.values[b]
    }

    /// `contact()[i]` is true where the surrogate touches the raw curve.
    pub fn contact(&self) -> &[bool] {
        &self.contact
    }

    pub fn capacity(&self) -> usize {
        self.values.len() - 1
    }

    /// The surrogate viewed as a plain curve, e.g. for the exact solvers.
    pub fn as_curve(&self) -> LossCurve {
        LossCurve::from_values(self.head, self.values.clone()).expect("surrogate is non-increasing")
    }
}

/// Convexifies `curve` by pooling adjacent violators on its gains.
///
/// The gains `d_i = L(i-1) - L(i)` are projected onto non-increasing
/// sequences; each pooled block is a straight segment between two points of
/// the raw curve, which are kept exactly.
pub fn pava_convexify(curve: &LossCurve) -> Result<ConvexLossCurve> {
    let l = curve.values();
    if let Some(i) = l.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::InvalidCurve { index: i });
    }
    let slope = |a: usize, e: usize| (l[a] - l[e]) / (e - a) as f64;
    // block boundaries: each block spans [start, end] on the budget axis
    let mut starts: Vec<usize> = Vec::with_capacity(l.len());
    let mut ends: Vec<usize> = Vec::with_capacity(l.len());
    for i in 1..l.len() {
        let mut start = i - 1;
        while let Some(&prev) = starts.last() {
            if slope(prev, start) < slope(start, i) {
                start = prev;
                starts.pop();
                ends.pop();
            } else {
                break;
            }
        }
        starts.push(start);
        ends.push(i);
    }

    let mut values = l.to_vec();
    let mut contact = vec![false; l.len()];
    contact[0] = true;
    for (&a, &e) in starts.iter().zip(&ends) {
        contact[e] = true;
        let step = slope(a, e);
        for (k, v) in values.iter_mut().enumerate().take(e).skip(a + 1) {
            *v = (l[a] - (k - a) as f64 * step).clamp(l[e], l[a]);
            if *v == l[k] {
                contact[k] = true;
            }
        }
    }
    Ok(ConvexLossCurve {
        head: curve.head,
        values,
        contact,
    })
}

/// Effective marginal gains `g(i) = L̆(i-1) - L̆(i)` for `i = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalGains {
    pub head: HeadIndex,
    base: f64,
    gains: Vec<f64>,
}

impl MarginalGains {
    /// Gains from explicit values; they must be nonnegative and
    /// non-increasing. `base` is the loss at budget zero.
    pub fn from_values(head: HeadIndex, base: f64, gains: Vec<f64>) -> Result<Self> {
        if let Some(i) = gains.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config(format!("gain {i} is not a nonnegative real")));
        }
        if let Some(i) = gains.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidCurve { index: i + 1 });
        }
        Ok(MarginalGains { head, base, gains })
    }

    /// `gains()[i - 1]` is `g(i)`.
    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn capacity(&self) -> usize {
        self.gains.len()
    }

    /// Surrogate loss left after spending `b` units on this head.
    pub fn loss_at(&self, b: usize) -> f64 {
        self.base - self.gains[..b].iter().sum::<f64>()
    }
}

pub fn marginal_gains(surrogate: &ConvexLossCurve) -> MarginalGains {
    let v = surrogate.values();
    let mut floor = f64::INFINITY;
    let gains = v
        .windows(2)
        .map(|w| {
            // interpolated segments may wobble by an ulp; keep the sequence
            // exactly non-increasing and nonnegative
            floor = floor.min((w[0] - w[1]).max(0.0));
            floor
        })
        .collect();
    MarginalGains {
        head: surrogate.head,
        base: v[0],
        gains,
    }
}
