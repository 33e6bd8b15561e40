//! Routing scores, head aggregation, thresholds and cross-layer averaging.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, HamError, Result};
use crate::math::{gelu, logit, sigmoid, Matrix};

/// Hidden width of the deep input router.
pub const MLP_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// Cosine distance between the recurrent prediction and the value.
    #[default]
    PredictionError,
    /// `σ(W_r x)`, one score broadcast to every head.
    InputLinear,
    /// `σ(MLP(x))`, three layers with GELU, broadcast to every head.
    InputMlp,
}

impl RouterKind {
    /// Upper end of the score range.
    pub fn scale(self) -> f64 {
        match self {
            RouterKind::PredictionError => 2.0,
            RouterKind::InputLinear | RouterKind::InputMlp => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RouterConfig {
    pub kind: RouterKind,
    pub aggregation: Aggregation,
    pub eda_enabled: bool,
}

/// Threshold stored in logit space: `τ = scale_s · σ(p_tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParam {
    pub p_tau: f64,
    pub scale_s: f64,
}

impl ThresholdParam {
    pub fn new(p_tau: f64, scale_s: f64) -> Result<Self> {
        if !(scale_s > 0.0 && scale_s.is_finite()) {
            return Err(HamError::Config(format!("threshold scale must be positive, got {scale_s}")));
        }
        Ok(Self { p_tau, scale_s })
    }

    /// `p_tau = 0`, i.e. `τ` at the middle of the score range.
    pub fn for_kind(kind: RouterKind) -> Self {
        Self {
            p_tau: 0.0,
            scale_s: kind.scale(),
        }
    }

    /// Inverse of [`effective`](Self::effective) for `0 ≤ τ ≤ scale_s`.
    pub fn from_tau(tau: f64, scale_s: f64) -> Result<Self> {
        if !(0.0..=scale_s).contains(&tau) {
            return Err(HamError::Config(format!("threshold {tau} outside [0, {scale_s}]")));
        }
        Self::new(logit(tau / scale_s), scale_s)
    }

    pub fn effective(&self) -> f64 {
        self.scale_s * sigmoid(self.p_tau)
    }
}

/// Routing outcome of one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub head_scores: Vec<f64>,
    /// Aggregated score after optional cross-layer averaging.
    pub score: f64,
    pub selected: bool,
    /// Multiplier applied to the token's KV-path value.
    pub attach: f64,
}

pub fn aggregate(head_scores: &[f64], mode: Aggregation) -> Result<f64> {
    let (first, rest) = head_scores
        .split_first()
        .ok_or(HamError::Empty("head scores"))?;
    Ok(rest.iter().fold(*first, |acc, &s| match mode {
        Aggregation::Min => acc.min(s),
        Aggregation::Max => acc.max(s),
    }))
}

#[inline]
pub fn select(score: f64, tau: f64) -> bool {
    score >= tau
}

/// `γ e_curr + (1 − γ) e_prev`.
#[inline]
pub fn eda_combine(e_curr: f64, e_prev: f64, gamma: f64) -> f64 {
    gamma * e_curr + (1.0 - gamma) * e_prev
}

pub fn attach_score(v: &[f64], p: f64) -> Vec<f64> {
    v.iter().map(|x| p * x).collect()
}

/// Aggregated raw score divided by the metric's scale, so it lies in `[0, 1]`.
pub fn attach_scalar(head_scores: &[f64], mode: Aggregation, scale_s: f64) -> Result<f64> {
    Ok(aggregate(head_scores, mode)? / scale_s)
}

/// Aggregates, optionally averages with the previous layer and thresholds.
pub fn decide(
    head_scores: Vec<f64>,
    cfg: &RouterConfig,
    tau: f64,
    prev_layer_score: Option<f64>,
    eda_gamma: f64,
) -> Result<RoutingDecision> {
    let raw = aggregate(&head_scores, cfg.aggregation)?;
    let score = match (cfg.eda_enabled, prev_layer_score) {
        (true, Some(prev)) => eda_combine(raw, prev, eda_gamma),
        _ => raw,
    };
    Ok(RoutingDecision {
        attach: raw / cfg.kind.scale(),
        selected: select(score, tau),
        score,
        head_scores,
    })
}

/// Weights of a three-layer input router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRouter {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// `hidden × 1`
    pub w3: Matrix,
    pub b3: Vec<f64>,
}

impl MlpRouter {
    pub fn zeros(d_hidden: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_hidden, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, hidden),
            b2: vec![0.0; hidden],
            w3: Matrix::zeros(hidden, 1),
            b3: vec![0.0],
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.w1, &self.w2, &self.w3]
            .iter()
            .map(|m| m.as_slice().len())
            .sum::<usize>()
            + self.b1.len()
            + self.b2.len()
            + self.b3.len()
    }

    fn layer(x: &[f64], w: &Matrix, b: &[f64], act: bool) -> Result<Vec<f64>> {
        let mut y = w.left_mul(x)?;
        check_len("router bias", y.len(), b.len())?;
        for (yi, bi) in y.iter_mut().zip(b) {
            *yi += bi;
            if act {
                *yi = gelu(*yi);
            }
        }
        Ok(y)
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        let h1 = Self::layer(x, &self.w1, &self.b1, true)?;
        let h2 = Self::layer(&h1, &self.w2, &self.b2, true)?;
        let out = Self::layer(&h2, &self.w3, &self.b3, false)?;
        check_len("router output", 1, out.len())?;
        Ok(out[0])
    }
}

/// Learned router parameters; prediction-error routing carries none.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterWeights {
    #[default]
    None,
    Linear(Vec<f64>),
    Mlp(MlpRouter),
}

impl RouterWeights {
    pub fn zeros(kind: RouterKind, d_hidden: usize) -> Self {
        match kind {
            RouterKind::PredictionError => RouterWeights::None,
            RouterKind::InputLinear => RouterWeights::Linear(vec![0.0; d_hidden]),
            RouterKind::InputMlp => RouterWeights::Mlp(MlpRouter::zeros(d_hidden, MLP_HIDDEN)),
        }
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng>(kind: RouterKind, d_hidden: usize, rng: &mut R) -> Self {
        fn gauss<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        }
        match kind {
            RouterKind::PredictionError => RouterWeights::None,
            RouterKind::InputLinear => RouterWeights::Linear(gauss(d_hidden, 1, rng).into_vec()),
            RouterKind::InputMlp => RouterWeights::Mlp(MlpRouter {
                w1: gauss(d_hidden, MLP_HIDDEN, rng),
                b1: vec![0.0; MLP_HIDDEN],
                w2: gauss(MLP_HIDDEN, MLP_HIDDEN, rng),
                b2: vec![0.0; MLP_HIDDEN],
                w3: gauss(MLP_HIDDEN, 1, rng),
                b3: vec![0.0],
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            RouterWeights::None => 0,
            RouterWeights::Linear(w) => w.len(),
            RouterWeights::Mlp(m) => m.param_count(),
        }
    }
}

/// Input-router scores for one token, broadcast to `heads`.
pub fn route_input(x: &[f64], weights: &RouterWeights, heads: usize) -> Result<Vec<f64>> {
    let z = match weights {
        RouterWeights::None => {
            return Err(HamError::Config("input routing needs router weights".into()))
        }
        RouterWeights::Linear(w) => {
            check_len("linear router", w.len(), x.len())?;
            crate::math::dot(w, x)
        }
        RouterWeights::Mlp(m) => m.logit(x)?,
    };
    Ok(vec![sigmoid(z); heads])
}
