//! Synthetic-data drivers: needle-in-a-haystack sequences, per-layer routing
//! traces, threshold sweeps and closed-loop threshold control on a stack.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{controller_step, mean_gap, BatchUsage, ControllerConfig, ControllerState, TraceRow};
use crate::error::{HamError, Result};
use crate::io::Corpus;
use crate::layer::{init_weights, rnn_pass, stack_forward, Block, LayerConfig, LayerWeights, SequenceInput};
use crate::router::aggregate;

/// Gate value below which a step counts as a state reset.
pub const ALPHA_RESET: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahSpec {
    pub t: usize,
    /// First needle position, zero-based.
    pub needle_pos: usize,
    pub needle_len: usize,
    /// Pattern period.
    pub pattern_vocab_size: usize,
    pub needle_vocab_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for NiahSpec {
    fn default() -> Self {
        Self {
            t: 256,
            needle_pos: 160,
            needle_len: 4,
            pattern_vocab_size: 8,
            needle_vocab_size: 16,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl NiahSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.embed_dim == 0 || self.pattern_vocab_size == 0 {
            return Err(HamError::Config("length, width and pattern vocabulary must be positive".into()));
        }
        if self.needle_len > 0 && self.needle_vocab_size == 0 {
            return Err(HamError::Config("needle vocabulary is empty".into()));
        }
        if self.needle_pos + self.needle_len > self.t {
            return Err(HamError::Config(format!(
                "needle window [{}, {}) outside [0, {})",
                self.needle_pos,
                self.needle_pos + self.needle_len,
                self.t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Niah {
    pub input: SequenceInput,
    pub needle_mask: Vec<bool>,
    /// Token ids; needle ids are offset by the pattern vocabulary size.
    pub tokens: Vec<usize>,
}

fn gaussian_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

/// A cyclic pattern over fixed random embeddings with one window of tokens
/// from a disjoint vocabulary.
pub fn gen_niah(spec: &NiahSpec) -> Result<Niah> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.pattern_vocab_size;
    let vocab = gaussian_rows(p + spec.needle_vocab_size, spec.embed_dim, &mut rng);
    let window = spec.needle_pos..spec.needle_pos + spec.needle_len;
    let tokens: Vec<usize> = (0..spec.t)
        .map(|t| if window.contains(&t) { p + rng.random_range(0..spec.needle_vocab_size) } else { t % p })
        .collect();
    let x = tokens.iter().map(|&id| vocab[id].clone()).collect();
    Ok(Niah {
        input: SequenceInput::single(x),
        needle_mask: (0..spec.t).map(|t| window.contains(&t)).collect(),
        tokens,
    })
}

/// Two recurrent heads of key width 16, two attention heads.
pub fn niah_layer_config(d_hidden: usize) -> LayerConfig {
    LayerConfig {
        d_qk: 32,
        d_v: 48,
        rnn_qk_head: 16,
        rnn_v_head: 24,
        kv_qk_head: 16,
        kv_v_head: 24,
        ffn_int: 2 * d_hidden,
        ..LayerConfig::small(d_hidden)
    }
}

/// Random weights with decay gates near 1, so the state keeps what it wrote.
pub fn retentive_weights(cfg: &LayerConfig, seed: u64) -> Result<LayerWeights> {
    let mut w = init_weights(cfg, seed)?;
    w.scalars.a_proj.scale(0.1);
    w.scalars.dt_bias.iter_mut().for_each(|b| *b = -6.0);
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahScores {
    pub scores: Vec<f64>,
    pub needle_mean: f64,
    /// 95th percentile over non-needle positions after the first period.
    pub pattern_p95: f64,
    pub spike: bool,
}

/// Nearest-rank percentile, `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(HamError::Empty("percentile input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Aggregated prediction-error scores of one layer on a needle sequence.
pub fn niah_scores(niah: &Niah, spec: &NiahSpec, w: &LayerWeights, cfg: &LayerConfig) -> Result<NiahScores> {
    let pass = rnn_pass(&niah.input, w, cfg)?;
    let scores = pass
        .errors
        .iter()
        .map(|e| aggregate(e, cfg.router.aggregation))
        .collect::<Result<Vec<_>>>()?;
    let needle: Vec<f64> = scores.iter().zip(&niah.needle_mask).filter(|(_, &m)| m).map(|(s, _)| *s).collect();
    let pattern: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(t, _)| t >= spec.pattern_vocab_size && !niah.needle_mask[t])
        .map(|(_, s)| *s)
        .collect();
    if needle.is_empty() {
        return Err(HamError::Empty("needle window"));
    }
    let needle_mean = needle.iter().sum::<f64>() / needle.len() as f64;
    let pattern_p95 = percentile(&pattern, 0.95)?;
    Ok(NiahScores {
        spike: needle_mean > pattern_p95,
        scores,
        needle_mean,
        pattern_p95,
    })
}

/// Runs [`gen_niah`] and a fresh retentive layer for `seeds` consecutive
/// seeds starting at `spec.seed`; returns the fraction showing a spike.
pub fn niah_spike_rate(spec: &NiahSpec, seeds: u64) -> Result<f64> {
    let cfg = niah_layer_config(spec.embed_dim);
    let mut hits = 0;
    for s in 0..seeds {
        let sp = NiahSpec { seed: spec.seed + s, ..*spec };
        let niah = gen_niah(&sp)?;
        let w = retentive_weights(&cfg, sp.seed.wrapping_add(0x5eed))?;
        hits += usize::from(niah_scores(&niah, &sp, &w, &cfg)?.spike);
    }
    Ok(hits as f64 / seeds.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sequences: usize,
    pub t: usize,
    pub d: usize,
    pub docs_per_sequence: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sequences: 4,
            t: 64,
            d: 16,
            docs_per_sequence: 1,
            seed: 0,
        }
    }
}

/// Gaussian embeddings; each sequence is split into equal contiguous documents
/// with globally unique ids.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.t == 0 || spec.d == 0 || spec.docs_per_sequence == 0 || spec.docs_per_sequence > spec.t {
        return Err(HamError::Config("synthetic corpus needs 1 ≤ docs ≤ t and d ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_doc = spec.t.div_ceil(spec.docs_per_sequence);
    let sequences = (0..spec.sequences)
        .map(|s| SequenceInput {
            x: gaussian_rows(spec.t, spec.d, &mut rng),
            doc_ids: (0..spec.t).map(|t| (s * spec.docs_per_sequence + t / per_doc) as i64).collect(),
            padding: vec![false; spec.t],
        })
        .collect();
    Corpus::new(spec.d, sequences)
}

/// One token of one layer in a routing trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub sequence: usize,
    pub layer: usize,
    pub t: usize,
    pub doc_id: i64,
    pub score: f64,
    pub selected: bool,
    /// Selected tokens at positions `≤ t` in this layer.
    pub cum_t_kv: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEvent {
    pub sequence: usize,
    pub layer: usize,
    pub t: usize,
    pub head: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub points: Vec<TracePoint>,
    pub alpha_events: Vec<AlphaEvent>,
}

pub const TRACE_HEADER: [&str; 7] = ["sequence", "layer", "t", "doc_id", "score", "selected", "cum_t_kv"];
pub const ALPHA_HEADER: [&str; 5] = ["sequence", "layer", "t", "head", "alpha"];

impl Trace {
    pub fn write_points_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for p in &self.points {
            out.serialize((p.sequence, p.layer, p.t, p.doc_id, p.score, u8::from(p.selected), p.cum_t_kv))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_alpha_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ALPHA_HEADER)?;
        for e in &self.alpha_events {
            out.serialize((e.sequence, e.layer, e.t, e.head, e.alpha))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the stack over every sequence and records scores, cumulative cache
/// growth and gate resets per layer.
pub fn trace(blocks: &[Block], corpus: &Corpus, taus: &[f64]) -> Result<Trace> {
    let mut tr = Trace::default();
    for (s, seq) in corpus.sequences.iter().enumerate() {
        let out = stack_forward(blocks, seq, taus)?;
        for (l, layer) in out.layers.iter().enumerate() {
            let mut cum = 0;
            for (t, d) in layer.decisions.iter().enumerate() {
                cum += usize::from(d.selected);
                tr.points.push(TracePoint {
                    sequence: s,
                    layer: l,
                    t,
                    doc_id: seq.doc_ids[t],
                    score: d.score,
                    selected: d.selected,
                    cum_t_kv: cum,
                });
            }
            for (t, alphas) in layer.alphas.iter().enumerate() {
                for (head, &alpha) in alphas.iter().enumerate() {
                    if alpha < ALPHA_RESET {
                        tr.alpha_events.push(AlphaEvent {
                            sequence: s,
                            layer: l,
                            t,
                            head,
                            alpha,
                        });
                    }
                }
            }
        }
    }
    Ok(tr)
}

/// Per-layer scores of every token from one pass at reference thresholds.
/// A layer's scores do not depend on its own threshold, so they determine
/// that layer's usage at any threshold given the upstream thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    /// `[layer][token]` pooled over sequences; padding tokens are excluded
    /// from `scores` but counted in `tokens`.
    pub scores: Vec<Vec<f64>>,
    pub tokens: usize,
}

pub fn collect_scores(blocks: &[Block], corpus: &Corpus, reference_taus: &[f64]) -> Result<LayerScores> {
    let mut scores = vec![Vec::new(); blocks.len()];
    let mut tokens = 0;
    for seq in &corpus.sequences {
        let out = stack_forward(blocks, seq, reference_taus)?;
        tokens += seq.len();
        for (l, layer) in out.layers.iter().enumerate() {
            scores[l].extend(layer.decisions.iter().zip(&seq.padding).filter(|(_, &p)| !p).map(|(d, _)| d.score));
        }
    }
    Ok(LayerScores { scores, tokens })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub per_layer: Vec<f64>,
    pub global: f64,
}

/// `ρ_ℓ(τ)` for each layer with the other layers at their reference
/// thresholds; `global` is the layer mean.
pub fn sweep(scores: &LayerScores, grid: &[f64]) -> Result<Vec<SweepPoint>> {
    if scores.tokens == 0 {
        return Err(HamError::Empty("sweep corpus"));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &tau in grid {
        if tau.is_nan() {
            return Err(HamError::Config("NaN threshold in sweep grid".into()));
        }
        let per_layer: Vec<f64> = scores
            .scores
            .iter()
            .map(|s| s.iter().filter(|&&e| e >= tau).count() as f64 / scores.tokens as f64)
            .collect();
        let global = if per_layer.is_empty() { 0.0 } else { per_layer.iter().sum::<f64>() / per_layer.len() as f64 };
        out.push(SweepPoint { tau, per_layer, global });
    }
    Ok(out)
}

/// `n` evenly spaced thresholds from 0 to `hi` inclusive.
pub fn tau_grid(hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tau", "layer", "rho"])?;
    for p in points {
        for (l, r) in p.per_layer.iter().enumerate() {
            out.write_record([p.tau.to_string(), l.to_string(), r.to_string()])?;
        }
        out.write_record([p.tau.to_string(), "global".into(), p.global.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Realized global usage of a stack with one threshold shared by all layers.
pub fn shared_usage(blocks: &[Block], corpus: &Corpus, tau: f64) -> Result<BatchUsage> {
    let taus = vec![tau; blocks.len()];
    let mut usage = BatchUsage::default();
    for seq in &corpus.sequences {
        let out = stack_forward(blocks, seq, &taus)?;
        for layer in &out.layers {
            usage.push(layer.cache.len(), seq.len())?;
        }
    }
    Ok(usage)
}

fn pooled_fraction(u: &BatchUsage) -> f64 {
    let (sel, tok) = u.sequences.iter().fold((0, 0), |(a, b), &(s, t)| (a + s, b + t));
    if tok == 0 {
        0.0
    } else {
        sel as f64 / tok as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlSpec {
    pub steps: u64,
    /// Further steps at a tenth of the step size.
    pub fine_steps: u64,
    /// Fresh batch per step, seeds offset by the step index.
    pub batch: SyntheticSpec,
    pub heldout: SyntheticSpec,
    pub p_tau0: f64,
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            steps: 300,
            fine_steps: 300,
            batch: SyntheticSpec {
                sequences: 8,
                ..SyntheticSpec::default()
            },
            heldout: SyntheticSpec {
                sequences: 64,
                seed: 1 << 40,
                ..SyntheticSpec::default()
            },
            p_tau0: 0.0,
        }
    }
}

/// Controller settings for driving a desk-scale stack. The step size is
/// larger than the training default so a few hundred steps suffice.
pub fn stack_controller_config(f_target: f64, scale_s: f64) -> ControllerConfig {
    ControllerConfig {
        f_target,
        freeze_n: 0,
        lr: 2e-2,
        scale_s,
        ..ControllerConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlResult {
    pub trace: Vec<TraceRow>,
    pub final_state: ControllerState,
    pub heldout_rho: f64,
}

/// Closed-loop control of one global threshold shared by every layer.
pub fn control_stack(blocks: &[Block], cfg: ControllerConfig, spec: &ControlSpec) -> Result<ControlResult> {
    let mut st = ControllerState::new(cfg, spec.p_tau0)?;
    let mut trace = Vec::with_capacity(spec.steps as usize);
    let coarse_lr = st.cfg.lr;
    for step in 0..spec.steps + spec.fine_steps {
        st.cfg.lr = if step < spec.steps { coarse_lr } else { coarse_lr / 10.0 };
        let batch = synthetic_corpus(&SyntheticSpec {
            seed: spec.batch.seed.wrapping_add(step),
            ..spec.batch
        })?;
        let usage = shared_usage(blocks, &batch, st.tau())?;
        let gap = mean_gap(std::slice::from_ref(&usage), st.cfg.f_target)?;
        st = controller_step(&st, gap);
        trace.push(TraceRow {
            step: st.step,
            gap,
            p_tau: st.p_tau,
            tau: st.tau(),
            realized: pooled_fraction(&usage),
        });
    }
    st.cfg.lr = coarse_lr;
    let heldout = synthetic_corpus(&spec.heldout)?;
    let heldout_rho = pooled_fraction(&shared_usage(blocks, &heldout, st.tau())?);
    Ok(ControlResult {
        trace,
        final_state: st,
        heldout_rho,
    })
}

/// Enough to rerun a command and get the same files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config,
            seed,
            outputs: Vec::new(),
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Blocks for the synthetic demos: `layers` copies of `cfg` with seeds
/// `seed, seed + 1, …`.
pub fn seeded_stack(cfg: &LayerConfig, layers: usize, seed: u64) -> Result<Vec<Block>> {
    (0..layers).map(|l| Block::init(cfg.clone(), seed.wrapping_add(l as u64))).collect()
}
