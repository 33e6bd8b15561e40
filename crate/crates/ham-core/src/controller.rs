//! Steers the logit-space threshold toward a target KV fraction.
//!
//! Each step pools the usage gap `f_actual − f_target` over every sequence,
//! turns it into `g = clamp(−γ·gap, −c, c)` and hands `g` to AdamW as the
//! gradient of `p_tau`. Over-use therefore raises `τ`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{HamError, Result};
use crate::math::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub f_target: f64,
    pub gain_gamma: f64,
    pub clip_c: f64,
    pub freeze_n: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Range of the routing metric; `τ = scale_s · σ(p_tau)`.
    pub scale_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            f_target: 0.5,
            gain_gamma: 1.0,
            clip_c: 1.0,
            freeze_n: 20_000,
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            scale_s: 1.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HamError::Config(m.into()));
        if !(self.f_target > 0.0 && self.f_target < 1.0) {
            return bad("f_target must lie in (0, 1)");
        }
        if !(self.gain_gamma > 0.0 && self.clip_c > 0.0 && self.lr > 0.0 && self.scale_s > 0.0) {
            return bad("gain, clip, learning rate and scale must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `ln(1/3)`: the threshold starts at a quarter of the metric range.
pub const DEFAULT_P_TAU: f64 = -1.098_612_288_668_109_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub cfg: ControllerConfig,
    pub p_tau: f64,
    pub adam_m: f64,
    pub adam_v: f64,
    pub step: u64,
}

impl ControllerState {
    pub fn new(cfg: ControllerConfig, p_tau: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            p_tau,
            adam_m: 0.0,
            adam_v: 0.0,
            step: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.cfg.scale_s * sigmoid(self.p_tau)
    }
}

/// Selected and total token counts of each sequence in a batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchUsage {
    pub sequences: Vec<(usize, usize)>,
}

impl BatchUsage {
    pub fn push(&mut self, selected: usize, tokens: usize) -> Result<()> {
        if tokens == 0 {
            return Err(HamError::Empty("sequence with zero tokens"));
        }
        if selected > tokens {
            return Err(HamError::UsageExceedsLength { selected, total: tokens });
        }
        self.sequences.push((selected, tokens));
        Ok(())
    }
}

/// Mean of `f_actual − f_target` over every sequence of every rank.
pub fn mean_gap(ranks: &[BatchUsage], f_target: f64) -> Result<f64> {
    let (sum, n) = ranks
        .iter()
        .flat_map(|r| &r.sequences)
        .fold((0.0, 0usize), |(s, n), &(sel, tok)| (s + sel as f64 / tok as f64 - f_target, n + 1));
    if n == 0 {
        return Err(HamError::Empty("usage batch"));
    }
    Ok(sum / n as f64)
}

pub fn synthetic_grad(gap: f64, cfg: &ControllerConfig) -> f64 {
    (-cfg.gain_gamma * gap).clamp(-cfg.clip_c, cfg.clip_c)
}

/// Advances the step counter and, past the freeze window, applies one AdamW
/// update with bias correction counted from the first unfrozen step.
pub fn controller_step(st: &ControllerState, gap: f64) -> ControllerState {
    let mut next = *st;
    next.step += 1;
    if next.step <= st.cfg.freeze_n {
        return next;
    }
    let c = &st.cfg;
    let t = (next.step - c.freeze_n) as i32;
    let g = synthetic_grad(gap, c);
    next.p_tau -= c.lr * c.weight_decay * next.p_tau;
    next.adam_m = c.beta1 * st.adam_m + (1.0 - c.beta1) * g;
    next.adam_v = c.beta2 * st.adam_v + (1.0 - c.beta2) * g * g;
    let m_hat = next.adam_m / (1.0 - c.beta1.powi(t));
    let v_hat = next.adam_v / (1.0 - c.beta2.powi(t));
    next.p_tau -= c.lr * m_hat / (v_hat.sqrt() + c.adam_eps);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub gap: f64,
    pub p_tau: f64,
    pub tau: f64,
    pub realized: f64,
}

/// Closed-loop run against i.i.d. `Beta(a, b)` scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BetaSimulation {
    pub alpha: f64,
    pub beta: f64,
    pub steps: u64,
    pub tokens_per_batch: usize,
    pub heldout_tokens: usize,
    pub seed: u64,
    pub p_tau0: f64,
}

impl Default for BetaSimulation {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 5.0,
            steps: 5000,
            tokens_per_batch: 256,
            heldout_tokens: 200_000,
            seed: 0,
            p_tau0: DEFAULT_P_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub trace: Vec<TraceRow>,
    pub final_state: ControllerState,
    /// Fraction of fresh scores at or above the final threshold.
    pub heldout_fraction: f64,
}

impl SimulationResult {
    /// CSV with header `step,gap,p_tau,tau,realized`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.trace {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn simulate_beta(sim: &BetaSimulation, cfg: ControllerConfig) -> Result<SimulationResult> {
    if sim.tokens_per_batch == 0 || sim.heldout_tokens == 0 {
        return Err(HamError::Config("simulation batch sizes must be positive".into()));
    }
    let dist = Beta::new(sim.alpha, sim.beta).map_err(|e| HamError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut st = ControllerState::new(cfg, sim.p_tau0)?;
    let mut trace = Vec::with_capacity(sim.steps as usize);
    for _ in 0..sim.steps {
        let tau = st.tau();
        let selected = (0..sim.tokens_per_batch)
            .filter(|_| dist.sample(&mut rng) >= tau)
            .count();
        let mut batch = BatchUsage::default();
        batch.push(selected, sim.tokens_per_batch)?;
        let gap = mean_gap(std::slice::from_ref(&batch), cfg.f_target)?;
        st = controller_step(&st, gap);
        trace.push(TraceRow {
            step: st.step,
            gap,
            p_tau: st.p_tau,
            tau: st.tau(),
            realized: selected as f64 / sim.tokens_per_batch as f64,
        });
    }
    let tau = st.tau();
    let hits = (0..sim.heldout_tokens)
        .filter(|_| dist.sample(&mut rng) >= tau)
        .count();
    Ok(SimulationResult {
        trace,
        final_state: st,
        heldout_fraction: hits as f64 / sim.heldout_tokens as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn usage(seqs: &[(usize, usize)]) -> BatchUsage {
        let mut b = BatchUsage::default();
        for &(s, t) in seqs {
            b.push(s, t).unwrap();
        }
        b
    }

    #[test]
    fn mean_gap_cases() {
        assert_eq!(mean_gap(&[usage(&[(5, 10), (8, 16)])], 0.5).unwrap(), 0.0);
        assert!((mean_gap(&[usage(&[(6, 10)])], 0.5).unwrap() - 0.1).abs() < 1e-15);
        let r1 = usage(&[(6, 10), (6, 10)]);
        let r2 = usage(&[(4, 10), (4, 10), (4, 10)]);
        assert!((mean_gap(&[r1, r2], 0.5).unwrap() + 0.02).abs() < 1e-15);
        assert!(mean_gap(&[], 0.5).is_err());
        assert!(mean_gap(&[BatchUsage::default()], 0.5).is_err());
        assert!(BatchUsage::default().push(3, 2).is_err());
    }

    #[test]
    fn synthetic_grad_cases() {
        let mut c = ControllerConfig::default();
        assert_eq!(synthetic_grad(0.0, &c), 0.0);
        c.clip_c = 0.05;
        assert_eq!(synthetic_grad(0.1, &c), -0.05);
        c.clip_c = 1.0;
        c.gain_gamma = 0.1;
        assert!((synthetic_grad(0.1, &c) + 0.01).abs() < 1e-17);
    }

    #[test]
    fn freeze_then_move() {
        let cfg = ControllerConfig {
            freeze_n: 3,
            ..Default::default()
        };
        let mut st = ControllerState::new(cfg, 0.25).unwrap();
        for gap in [0.7, -0.4, 0.9] {
            st = controller_step(&st, gap);
            assert_eq!(st.p_tau.to_bits(), 0.25f64.to_bits());
        }
        let next = controller_step(&st, 0.1);
        assert!(next.p_tau > st.p_tau);
        assert_eq!(next.step, 4);
    }

    #[test]
    fn zero_gap_is_stationary() {
        let cfg = ControllerConfig {
            freeze_n: 0,
            ..Default::default()
        };
        let mut st = ControllerState::new(cfg, -0.3).unwrap();
        for _ in 0..50 {
            st = controller_step(&st, 0.0);
        }
        assert_eq!(st.p_tau, -0.3);
    }

    #[test]
    fn config_rejects_bad_target() {
        let cfg = ControllerConfig {
            f_target: 1.0,
            ..Default::default()
        };
        assert!(ControllerState::new(cfg, 0.0).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let cfg = ControllerConfig {
            freeze_n: 0,
            ..Default::default()
        };
        let sim = BetaSimulation {
            steps: 3,
            heldout_tokens: 10,
            ..Default::default()
        };
        let res = simulate_beta(&sim, cfg).unwrap();
        let mut buf = Vec::new();
        res.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,gap,p_tau,tau,realized\n"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn drive_is_bounded(gap in -5.0f64..5.0, g in 0.01f64..10.0, c in 0.001f64..2.0) {
            let cfg = ControllerConfig { gain_gamma: g, clip_c: c, ..Default::default() };
            prop_assert!(synthetic_grad(gap, &cfg).abs() <= c);
        }

        #[test]
        fn gap_independent_of_partition(
            seqs in prop::collection::vec((0usize..50, 50usize..100), 1..20),
            cut in 0usize..20,
        ) {
            let cut = cut.min(seqs.len());
            let all = usage(&seqs);
            let a = usage(&seqs[..cut]);
            let b = usage(&seqs[cut..]);
            let pooled = mean_gap(&[all], 0.3).unwrap();
            let split = mean_gap(&[a, b], 0.3).unwrap();
            prop_assert!((pooled - split).abs() < 1e-12);
        }

        #[test]
        fn correction_opposes_gap(gap in -1.0f64..1.0, p in -3.0f64..3.0) {
            prop_assume!(gap.abs() > 1e-9);
            let cfg = ControllerConfig { freeze_n: 0, ..Default::default() };
            let st = ControllerState::new(cfg, p).unwrap();
            let next = controller_step(&st, gap);
            prop_assert_eq!((next.tau() - st.tau()).signum(), gap.signum());
        }
    }
}
