//! One hybrid layer and a pre-norm residual stack of them.
//!
//! Forward pass of a layer on `X` (`T × d_hidden`):
//!
//! 1. `x̂ = RMSNorm(x)`; shared projections `q, k, v = x̂W_Q, x̂W_K, x̂W_V`.
//! 2. Each path runs its own causal SiLU convolution and full-width RMSNorm
//!    over `q, k, v`. The recurrent path then L2-normalizes `q, k` per head;
//!    the attention path applies RoPE at the absolute position.
//! 3. The gated delta rule runs per head and yields outputs and pre-update
//!    prediction errors. Scores are aggregated over heads and thresholded.
//! 4. Selected tokens enter the scratchpad with values scaled by the
//!    attachment scalar; every query attends over the admissible entries.
//! 5. `o = W_O(g_RNN ⊙ GatedNorm(o_RNN) + g_KV ⊙ Norm(o_KV))` with per-head
//!    sigmoid gates broadcast over each path's own head partition.
//!
//! Recurrent state and convolution history restart at each document
//! boundary, so documents packed into one sequence never exchange
//! information through either path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, HamError, Result};
use crate::math::{
    causal_depthwise_conv, gated_rms_norm, l2_normalize, rms_norm, rope_apply, sigmoid, silu,
    Activation, Matrix, RMS_NORM_EPS, ROPE_BASE,
};
use crate::rnn::{gdn_scalars, run_chunked, HeadInputs, HeadState, ScalarParams};
use crate::router::{decide, route_input, RouterConfig, RouterKind, RouterWeights, RoutingDecision, ThresholdParam};
use crate::scratchpad::{sparse_attend, usage, KvCache, KvEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_hidden: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub rnn_qk_head: usize,
    pub rnn_v_head: usize,
    pub kv_qk_head: usize,
    pub kv_v_head: usize,
    pub d_conv: usize,
    pub rope_base: f64,
    pub chunk: usize,
    /// Intermediate width of the SwiGLU block that follows the layer in a stack.
    pub ffn_int: usize,
    pub router: RouterConfig,
    pub threshold: ThresholdParam,
    /// Counts `p_tau` as a trained scalar in [`LayerWeights::param_count`].
    pub learnable_tau: bool,
    pub l2_norm_qk: bool,
}

impl LayerConfig {
    /// Dimensions of the reference 800M-scale configuration family at width `d`.
    pub fn reference(d: usize) -> Result<Self> {
        let exact = |num: usize, den: usize, what: &str| -> Result<usize> {
            if (d * num) % den == 0 {
                Ok(d * num / den)
            } else {
                Err(HamError::Config(format!("{what} = {num}/{den}·{d} is not an integer")))
            }
        };
        let cfg = Self {
            d_hidden: d,
            d_qk: exact(5, 7, "d_QK")?,
            d_v: exact(15, 14, "d_V")?,
            rnn_qk_head: 256,
            rnn_v_head: 384,
            kv_qk_head: 128,
            kv_v_head: 192,
            d_conv: 4,
            rope_base: ROPE_BASE,
            chunk: 64,
            ffn_int: exact(10, 7, "d_int")?,
            router: RouterConfig::default(),
            threshold: ThresholdParam::for_kind(RouterKind::PredictionError),
            learnable_tau: false,
            l2_norm_qk: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A desk-scale configuration with two recurrent and two attention heads.
    pub fn small(d_hidden: usize) -> Self {
        Self {
            d_hidden,
            d_qk: 8,
            d_v: 12,
            rnn_qk_head: 4,
            rnn_v_head: 6,
            kv_qk_head: 4,
            kv_v_head: 6,
            d_conv: 4,
            rope_base: ROPE_BASE,
            chunk: 4,
            ffn_int: 2 * d_hidden,
            router: RouterConfig::default(),
            threshold: ThresholdParam::for_kind(RouterKind::PredictionError),
            learnable_tau: false,
            l2_norm_qk: true,
        }
    }

    pub fn h_rnn(&self) -> usize {
        self.d_qk / self.rnn_qk_head
    }

    pub fn h_kv(&self) -> usize {
        self.d_qk / self.kv_qk_head
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HamError::Config(m));
        if self.d_hidden == 0 || self.d_qk == 0 || self.d_v == 0 || self.ffn_int == 0 {
            return bad("widths must be positive".into());
        }
        if [self.rnn_qk_head, self.rnn_v_head, self.kv_qk_head, self.kv_v_head].contains(&0) {
            return bad("head widths must be positive".into());
        }
        if self.d_qk % self.rnn_qk_head != 0 || self.d_qk % self.kv_qk_head != 0 {
            return bad(format!(
                "d_QK = {} must be divisible by both head widths {} and {}",
                self.d_qk, self.rnn_qk_head, self.kv_qk_head
            ));
        }
        if self.h_rnn() * self.rnn_v_head != self.d_v || self.h_kv() * self.kv_v_head != self.d_v {
            return bad(format!(
                "value width {} must equal heads × value head width on both paths",
                self.d_v
            ));
        }
        if self.kv_qk_head % 2 != 0 {
            return bad("attention key head width must be even for RoPE".into());
        }
        if self.d_conv == 0 || self.chunk == 0 {
            return bad("d_conv and chunk must be ≥ 1".into());
        }
        if !(self.rope_base > 0.0) {
            return bad("rope_base must be positive".into());
        }
        Ok(())
    }
}

/// Depthwise kernels for `q, k, v` of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSet {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Full-width RMSNorm gains for `q, k, v` of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSet {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub pre_norm: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub conv_rnn: ConvSet,
    pub conv_kv: ConvSet,
    pub norm_rnn: NormSet,
    pub norm_kv: NormSet,
    pub scalars: ScalarParams,
    /// `d_hidden × d_V`, SiLU gate of the recurrent output norm.
    pub w_norm_gate: Matrix,
    pub rnn_out_norm: Vec<f64>,
    pub kv_out_norm: Vec<f64>,
    pub w_gate_rnn: Matrix,
    pub w_gate_kv: Matrix,
    pub w_o: Matrix,
    pub router: RouterWeights,
    pub eda_gamma: f64,
}

impl LayerWeights {
    /// Scalar count. Includes `p_tau` when the threshold is learnable and the
    /// averaging weight when cross-layer averaging is on.
    pub fn param_count(&self, cfg: &LayerConfig) -> usize {
        let mats = [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.conv_rnn.q,
            &self.conv_rnn.k,
            &self.conv_rnn.v,
            &self.conv_kv.q,
            &self.conv_kv.k,
            &self.conv_kv.v,
            &self.w_norm_gate,
            &self.w_gate_rnn,
            &self.w_gate_kv,
            &self.w_o,
        ];
        let vecs = [
            &self.pre_norm,
            &self.norm_rnn.q,
            &self.norm_rnn.k,
            &self.norm_rnn.v,
            &self.norm_kv.q,
            &self.norm_kv.k,
            &self.norm_kv.v,
            &self.rnn_out_norm,
            &self.kv_out_norm,
        ];
        mats.iter().map(|m| m.as_slice().len()).sum::<usize>()
            + vecs.iter().map(|v| v.len()).sum::<usize>()
            + self.scalars.param_count()
            + self.router.param_count()
            + usize::from(cfg.learnable_tau)
            + usize::from(cfg.router.eda_enabled)
    }

    fn validate(&self, cfg: &LayerConfig) -> Result<()> {
        let (d, dqk, dv, w) = (cfg.d_hidden, cfg.d_qk, cfg.d_v, cfg.d_conv);
        let shape = |ctx: &'static str, m: &Matrix, r: usize, c: usize| -> Result<()> {
            check_len(ctx, r, m.rows())?;
            check_len(ctx, c, m.cols())
        };
        check_len("pre-norm gain", d, self.pre_norm.len())?;
        shape("W_Q", &self.w_q, d, dqk)?;
        shape("W_K", &self.w_k, d, dqk)?;
        shape("W_V", &self.w_v, d, dv)?;
        for c in [&self.conv_rnn, &self.conv_kv] {
            shape("conv q", &c.q, dqk, w)?;
            shape("conv k", &c.k, dqk, w)?;
            shape("conv v", &c.v, dv, w)?;
        }
        for n in [&self.norm_rnn, &self.norm_kv] {
            check_len("norm q", dqk, n.q.len())?;
            check_len("norm k", dqk, n.k.len())?;
            check_len("norm v", dv, n.v.len())?;
        }
        shape("a_proj", &self.scalars.a_proj, d, cfg.h_rnn())?;
        shape("b_proj", &self.scalars.b_proj, d, cfg.h_rnn())?;
        check_len("A_log", cfg.h_rnn(), self.scalars.a_log.len())?;
        check_len("dt_bias", cfg.h_rnn(), self.scalars.dt_bias.len())?;
        shape("norm gate", &self.w_norm_gate, d, dv)?;
        check_len("recurrent output norm", cfg.rnn_v_head, self.rnn_out_norm.len())?;
        check_len("attention output norm", cfg.kv_v_head, self.kv_out_norm.len())?;
        shape("recurrent gate", &self.w_gate_rnn, d, cfg.h_rnn())?;
        shape("attention gate", &self.w_gate_kv, d, cfg.h_kv())?;
        shape("W_O", &self.w_o, dv, d)?;
        match (&self.router, cfg.router.kind) {
            (RouterWeights::None, RouterKind::PredictionError)
            | (RouterWeights::Linear(_), RouterKind::InputLinear)
            | (RouterWeights::Mlp(_), RouterKind::InputMlp) => Ok(()),
            _ => Err(HamError::Config("router weights do not match router kind".into())),
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn conv_kernel(channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("positive std");
    Matrix::from_fn(channels, width, |_, _| normal.sample(rng))
}

/// Deterministic weights: projections `N(0, 1/fan_in)`, gains 1, `A_log = 0`,
/// `dt_bias = 0`, averaging weight 0.5.
pub fn init_weights(cfg: &LayerConfig, seed: u64) -> Result<LayerWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, dqk, dv, w, h) = (cfg.d_hidden, cfg.d_qk, cfg.d_v, cfg.d_conv, cfg.h_rnn());
    let w_q = gaussian(d, dqk, &mut rng);
    let w_k = gaussian(d, dqk, &mut rng);
    let w_v = gaussian(d, dv, &mut rng);
    let conv = |rng: &mut ChaCha8Rng| ConvSet {
        q: conv_kernel(dqk, w, rng),
        k: conv_kernel(dqk, w, rng),
        v: conv_kernel(dv, w, rng),
    };
    let conv_rnn = conv(&mut rng);
    let conv_kv = conv(&mut rng);
    let norms = || NormSet {
        q: vec![1.0; dqk],
        k: vec![1.0; dqk],
        v: vec![1.0; dv],
    };
    let scalars = ScalarParams {
        a_proj: gaussian(d, h, &mut rng),
        b_proj: gaussian(d, h, &mut rng),
        a_log: vec![0.0; h],
        dt_bias: vec![0.0; h],
    };
    let w_norm_gate = gaussian(d, dv, &mut rng);
    let w_gate_rnn = gaussian(d, h, &mut rng);
    let w_gate_kv = gaussian(d, cfg.h_kv(), &mut rng);
    let w_o = gaussian(dv, d, &mut rng);
    let router = RouterWeights::init(cfg.router.kind, d, &mut rng);
    Ok(LayerWeights {
        pre_norm: vec![1.0; d],
        w_q,
        w_k,
        w_v,
        conv_rnn,
        conv_kv,
        norm_rnn: norms(),
        norm_kv: norms(),
        scalars,
        w_norm_gate,
        rnn_out_norm: vec![1.0; cfg.rnn_v_head],
        kv_out_norm: vec![1.0; cfg.kv_v_head],
        w_gate_rnn,
        w_gate_kv,
        w_o,
        router,
        eda_gamma: 0.5,
    })
}

/// A packed sequence: rows, per-token document ids and padding flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInput {
    pub x: Vec<Vec<f64>>,
    pub doc_ids: Vec<i64>,
    pub padding: Vec<bool>,
}

impl SequenceInput {
    /// One document, no padding.
    pub fn single(x: Vec<Vec<f64>>) -> Self {
        let t = x.len();
        Self {
            x,
            doc_ids: vec![0; t],
            padding: vec![false; t],
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self, d_hidden: usize) -> Result<()> {
        if self.x.is_empty() {
            return Err(HamError::Empty("layer input"));
        }
        check_len("doc ids", self.x.len(), self.doc_ids.len())?;
        check_len("padding flags", self.x.len(), self.padding.len())?;
        for (t, row) in self.x.iter().enumerate() {
            check_len("input row", d_hidden, row.len())?;
            if let Some(i) = row.iter().position(|v| !v.is_finite()) {
                return Err(HamError::NonFinite {
                    what: "layer input",
                    position: t * d_hidden + i,
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (t, &doc) in self.doc_ids.iter().enumerate() {
            if (t == 0 || self.doc_ids[t - 1] != doc) && !seen.insert(doc) {
                return Err(HamError::Config(format!(
                    "document {doc} resumes at position {t}; documents must be contiguous"
                )));
            }
        }
        Ok(())
    }

    /// Half-open ranges of consecutive tokens sharing a document id.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in 1..=self.doc_ids.len() {
            if t == self.doc_ids.len() || self.doc_ids[t] != self.doc_ids[start] {
                out.push((start, t));
                start = t;
            }
        }
        out
    }
}

/// Path-specific `q, k, v` per token and head, after convolution and norms.
#[derive(Debug, Clone, PartialEq)]
pub struct PathQkv {
    pub q: Vec<Vec<Vec<f64>>>,
    pub k: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<Vec<f64>>>,
}

/// Everything the two memories consume, computed from the layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    /// Pre-normed input rows.
    pub x_hat: Vec<Vec<f64>>,
    pub rnn: PathQkv,
    /// Keys and queries are already rotated.
    pub kv: PathQkv,
}

fn split_heads(x: &[f64], heads: usize) -> Vec<Vec<f64>> {
    let w = x.len() / heads;
    x.chunks(w).map(<[f64]>::to_vec).collect()
}

fn conv_segments(seq: &[Vec<f64>], kernel: &Matrix, segments: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seq.len());
    for &(s, e) in segments {
        out.extend(causal_depthwise_conv(&seq[s..e], kernel, Activation::Silu)?);
    }
    Ok(out)
}

/// Steps 1 and 2 of the forward pass, up to the inputs of both memories.
pub fn project(input: &SequenceInput, w: &LayerWeights, cfg: &LayerConfig) -> Result<Projected> {
    cfg.validate()?;
    w.validate(cfg)?;
    input.validate(cfg.d_hidden)?;
    let segments = input.segments();
    let x_hat = input
        .x
        .iter()
        .map(|row| rms_norm(row, &w.pre_norm, RMS_NORM_EPS))
        .collect::<Result<Vec<_>>>()?;
    let proj = |m: &Matrix| x_hat.iter().map(|r| m.left_mul(r)).collect::<Result<Vec<_>>>();
    let (q, k, v) = (proj(&w.w_q)?, proj(&w.w_k)?, proj(&w.w_v)?);

    let path = |conv: &ConvSet, norm: &NormSet| -> Result<[Vec<Vec<f64>>; 3]> {
        let run = |seq: &[Vec<f64>], kernel: &Matrix, gain: &[f64]| -> Result<Vec<Vec<f64>>> {
            conv_segments(seq, kernel, &segments)?
                .iter()
                .map(|r| rms_norm(r, gain, RMS_NORM_EPS))
                .collect()
        };
        Ok([run(&q, &conv.q, &norm.q)?, run(&k, &conv.k, &norm.k)?, run(&v, &conv.v, &norm.v)?])
    };

    let [rq, rk, rv] = path(&w.conv_rnn, &w.norm_rnn)?;
    let h_rnn = cfg.h_rnn();
    let heads_l2 = |rows: Vec<Vec<f64>>| -> Vec<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                split_heads(r, h_rnn)
                    .into_iter()
                    .map(|h| if cfg.l2_norm_qk { l2_normalize(&h) } else { h })
                    .collect()
            })
            .collect()
    };
    let rnn = PathQkv {
        q: heads_l2(rq),
        k: heads_l2(rk),
        v: rv.iter().map(|r| split_heads(r, h_rnn)).collect(),
    };

    let [kq, kk, kv] = path(&w.conv_kv, &w.norm_kv)?;
    let h_kv = cfg.h_kv();
    let rotate = |rows: Vec<Vec<f64>>| -> Result<Vec<Vec<Vec<f64>>>> {
        rows.iter()
            .enumerate()
            .map(|(t, r)| {
                split_heads(r, h_kv)
                    .iter()
                    .map(|h| rope_apply(h, t, cfg.rope_base))
                    .collect()
            })
            .collect()
    };
    let kv = PathQkv {
        q: rotate(kq)?,
        k: rotate(kk)?,
        v: kv.iter().map(|r| split_heads(r, h_kv)).collect(),
    };
    Ok(Projected { x_hat, rnn, kv })
}

/// Recurrent outputs, per-head scores and gate values per token.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnPass {
    pub outputs: Vec<Vec<Vec<f64>>>,
    pub errors: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
}

fn run_rnn(p: &Projected, input: &SequenceInput, w: &LayerWeights, cfg: &LayerConfig) -> Result<RnnPass> {
    let t_len = input.len();
    let h = cfg.h_rnn();
    let scalars = p
        .x_hat
        .iter()
        .map(|x| gdn_scalars(x, &w.scalars))
        .collect::<Result<Vec<_>>>()?;
    let mut outputs = vec![Vec::with_capacity(h); t_len];
    let mut errors = vec![Vec::with_capacity(h); t_len];
    for head in 0..h {
        for (s, e) in input.segments() {
            let inputs = HeadInputs {
                queries: (s..e).map(|t| p.rnn.q[t][head].clone()).collect(),
                keys: (s..e).map(|t| p.rnn.k[t][head].clone()).collect(),
                values: (s..e).map(|t| p.rnn.v[t][head].clone()).collect(),
                scalars: (s..e).map(|t| scalars[t][head]).collect(),
            };
            let run = run_chunked(&inputs, &HeadState::zeros(cfg.rnn_qk_head, cfg.rnn_v_head), cfg.chunk)?;
            for (i, (o, err)) in run.outputs.into_iter().zip(run.errors).enumerate() {
                outputs[s + i].push(o);
                errors[s + i].push(err);
            }
        }
    }
    let alphas = scalars.iter().map(|s| s.iter().map(|x| x.alpha).collect()).collect();
    Ok(RnnPass { outputs, errors, alphas })
}

fn check_finite(rows: &[Vec<f64>], what: &'static str) -> Result<()> {
    for (t, r) in rows.iter().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(HamError::NonFinite { what, position: t });
        }
    }
    Ok(())
}

/// Step 5 for one token; `kv` is `None` when the attention path is absent.
fn combine(
    x_hat: &[f64],
    rnn: &[Vec<f64>],
    kv: Option<&[Vec<f64>]>,
    w: &LayerWeights,
    cfg: &LayerConfig,
) -> Result<Vec<f64>> {
    let gate_pre = w.w_norm_gate.left_mul(x_hat)?;
    let g_rnn: Vec<f64> = w.w_gate_rnn.left_mul(x_hat)?.into_iter().map(sigmoid).collect();
    let mut mixed = Vec::with_capacity(cfg.d_v);
    for (h, o) in rnn.iter().enumerate() {
        let gate = &gate_pre[h * cfg.rnn_v_head..(h + 1) * cfg.rnn_v_head];
        let normed = gated_rms_norm(o, &w.rnn_out_norm, gate, RMS_NORM_EPS)?;
        mixed.extend(normed.into_iter().map(|v| g_rnn[h] * v));
    }
    if let Some(kv) = kv {
        let g_kv: Vec<f64> = w.w_gate_kv.left_mul(x_hat)?.into_iter().map(sigmoid).collect();
        let mut j = 0;
        for (h, o) in kv.iter().enumerate() {
            for v in rms_norm(o, &w.kv_out_norm, RMS_NORM_EPS)? {
                mixed[j] += g_kv[h] * v;
                j += 1;
            }
        }
    }
    w.w_o.left_mul(&mixed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub outputs: Vec<Vec<f64>>,
    pub decisions: Vec<RoutingDecision>,
    pub cache: KvCache,
    pub rho_kv: f64,
    /// Decay gate of each recurrent head per token.
    pub alphas: Vec<Vec<f64>>,
    /// Raw attention-path output per token and head, before its norm.
    pub kv_out: Vec<Vec<Vec<f64>>>,
}

/// Full layer at threshold `tau`. `prev_scores` carries the previous layer's
/// per-token scores for cross-layer averaging.
pub fn forward(
    input: &SequenceInput,
    w: &LayerWeights,
    cfg: &LayerConfig,
    tau: f64,
    prev_scores: Option<&[f64]>,
) -> Result<LayerOutput> {
    let p = project(input, w, cfg)?;
    let rnn = run_rnn(&p, input, w, cfg)?;
    if let Some(prev) = prev_scores {
        check_len("previous layer scores", input.len(), prev.len())?;
    }
    let mut cache = KvCache::new(cfg.h_kv(), cfg.kv_qk_head, cfg.kv_v_head);
    let mut decisions = Vec::with_capacity(input.len());
    let mut kv_out = Vec::with_capacity(input.len());
    let mut outputs = Vec::with_capacity(input.len());
    for t in 0..input.len() {
        let head_scores = match cfg.router.kind {
            RouterKind::PredictionError => rnn.errors[t].clone(),
            RouterKind::InputLinear | RouterKind::InputMlp => route_input(&p.x_hat[t], &w.router, cfg.h_rnn())?,
        };
        let mut d = decide(head_scores, &cfg.router, tau, prev_scores.map(|s| s[t]), w.eda_gamma)?;
        d.selected &= !input.padding[t];
        let entry = KvEntry {
            orig_pos: t,
            doc_id: input.doc_ids[t],
            padding: input.padding[t],
            keys: p.kv.k[t].clone(),
            values: p.kv.v[t].iter().map(|v| v.iter().map(|x| d.attach * x).collect()).collect(),
        };
        cache.append_if_selected(entry, d.selected)?;
        let o_kv = sparse_attend(&p.kv.q[t], t, input.doc_ids[t], &cache)?;
        outputs.push(combine(&p.x_hat[t], &rnn.outputs[t], Some(&o_kv), w, cfg)?);
        kv_out.push(o_kv);
        decisions.push(d);
    }
    check_finite(&outputs, "layer output")?;
    let rho_kv = usage(&cache, input.len())?;
    Ok(LayerOutput {
        outputs,
        decisions,
        cache,
        rho_kv,
        alphas: rnn.alphas,
        kv_out,
    })
}

/// Reference output with the attention path removed entirely.
pub fn forward_rnn_only(input: &SequenceInput, w: &LayerWeights, cfg: &LayerConfig) -> Result<Vec<Vec<f64>>> {
    let p = project(input, w, cfg)?;
    let rnn = run_rnn(&p, input, w, cfg)?;
    let out = (0..input.len())
        .map(|t| combine(&p.x_hat[t], &rnn.outputs[t], None, w, cfg))
        .collect::<Result<Vec<_>>>()?;
    check_finite(&out, "layer output")?;
    Ok(out)
}

/// Recurrent-path scores and gates only, without attention or output mixing.
pub fn rnn_pass(input: &SequenceInput, w: &LayerWeights, cfg: &LayerConfig) -> Result<RnnPass> {
    let p = project(input, w, cfg)?;
    run_rnn(&p, input, w, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnWeights {
    pub pre_norm: Vec<f64>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl FfnWeights {
    pub fn init(d_hidden: usize, d_int: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            pre_norm: vec![1.0; d_hidden],
            w_gate: gaussian(d_hidden, d_int, &mut rng),
            w_up: gaussian(d_hidden, d_int, &mut rng),
            w_down: gaussian(d_int, d_hidden, &mut rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.pre_norm.len() + self.w_gate.as_slice().len() + self.w_up.as_slice().len() + self.w_down.as_slice().len()
    }
}

/// `W_down(silu(x W_gate) ⊙ (x W_up))`.
pub fn ffn_swiglu(x: &[f64], w: &FfnWeights) -> Result<Vec<f64>> {
    check_len("ffn up", w.w_gate.cols(), w.w_up.cols())?;
    check_len("ffn down", w.w_gate.cols(), w.w_down.rows())?;
    let gate = w.w_gate.left_mul(x)?;
    let up = w.w_up.left_mul(x)?;
    let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    w.w_down.left_mul(&hidden)
}

/// A hybrid layer followed by its feed-forward block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub cfg: LayerConfig,
    pub ham: LayerWeights,
    pub ffn: FfnWeights,
}

impl Block {
    /// Layer and FFN weights derived from one seed.
    pub fn init(cfg: LayerConfig, seed: u64) -> Result<Self> {
        let ham = init_weights(&cfg, seed)?;
        let ffn = FfnWeights::init(cfg.d_hidden, cfg.ffn_int, seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self { cfg, ham, ffn })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackOutput {
    pub layers: Vec<LayerOutput>,
    pub hidden: Vec<Vec<f64>>,
}

impl StackOutput {
    /// `(1/LT) Σ_ℓ T_KV^(ℓ)`.
    pub fn global_rho(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.rho_kv).sum::<f64>() / self.layers.len() as f64
    }
}

/// Pre-norm residual stack: `h += HAM(h)`, then `h += FFN(RMSNorm(h))`.
pub fn stack_forward(blocks: &[Block], input: &SequenceInput, taus: &[f64]) -> Result<StackOutput> {
    check_len("per-layer thresholds", blocks.len(), taus.len())?;
    let mut h = input.clone();
    let mut layers = Vec::with_capacity(blocks.len());
    let mut prev: Option<Vec<f64>> = None;
    for (b, &tau) in blocks.iter().zip(taus) {
        if b.cfg.d_hidden != input.x.first().map_or(0, Vec::len) {
            return Err(HamError::Config("inconsistent hidden width across layers".into()));
        }
        let out = forward(&h, &b.ham, &b.cfg, tau, prev.as_deref())?;
        for (row, o) in h.x.iter_mut().zip(&out.outputs) {
            row.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            let normed = rms_norm(row, &b.ffn.pre_norm, RMS_NORM_EPS)?;
            let f = ffn_swiglu(&normed, &b.ffn)?;
            row.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        check_finite(&h.x, "stack hidden state")?;
        prev = Some(out.decisions.iter().map(|d| d.score).collect());
        layers.push(out);
    }
    Ok(StackOutput { layers, hidden: h.x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot, max_abs_diff};
    use rand::Rng;

    fn random_input(t: usize, d: usize, seed: u64) -> SequenceInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SequenceInput::single((0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
    }

    #[test]
    fn reference_dims() {
        let cfg = LayerConfig::reference(1792).unwrap();
        assert_eq!((cfg.h_rnn(), cfg.h_kv(), cfg.d_qk, cfg.d_v), (5, 10, 1280, 1920));
        assert!(LayerConfig::reference(1000).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LayerConfig::small(6);
        assert!(cfg.validate().is_ok());
        cfg.kv_qk_head = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = LayerConfig::small(6);
        cfg.d_v = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = LayerConfig::small(6);
        assert_eq!(init_weights(&cfg, 5).unwrap(), init_weights(&cfg, 5).unwrap());
        assert_ne!(init_weights(&cfg, 5).unwrap(), init_weights(&cfg, 6).unwrap());
    }

    #[test]
    fn segments_split_on_doc_change() {
        let mut s = random_input(6, 2, 1);
        s.doc_ids = vec![3, 3, 7, 7, 7, 9];
        assert_eq!(s.segments(), vec![(0, 2), (2, 5), (5, 6)]);
        s.doc_ids = vec![3, 3, 7, 3, 3, 3];
        assert!(s.validate(2).is_err());
    }

    #[test]
    fn tau_above_range_matches_rnn_only() {
        let cfg = LayerConfig::small(6);
        let w = init_weights(&cfg, 11).unwrap();
        let input = random_input(10, 6, 12);
        let full = forward(&input, &w, &cfg, 2.5, None).unwrap();
        assert_eq!(full.rho_kv, 0.0);
        assert_eq!(full.outputs, forward_rnn_only(&input, &w, &cfg).unwrap());
    }

    #[test]
    fn zero_gates_are_one_half() {
        let cfg = LayerConfig::small(6);
        let mut w = init_weights(&cfg, 13).unwrap();
        w.w_gate_rnn = Matrix::zeros(6, cfg.h_rnn());
        w.w_gate_kv = Matrix::zeros(6, cfg.h_kv());
        let input = random_input(5, 6, 14);
        let out = forward(&input, &w, &cfg, 0.0, None).unwrap();
        let p = project(&input, &w, &cfg).unwrap();
        let rnn = rnn_pass(&input, &w, &cfg).unwrap();
        for t in 0..5 {
            let gate_pre = w.w_norm_gate.left_mul(&p.x_hat[t]).unwrap();
            let mut sum = Vec::new();
            for h in 0..cfg.h_rnn() {
                let g = &gate_pre[h * 6..(h + 1) * 6];
                sum.extend(gated_rms_norm(&rnn.outputs[t][h], &w.rnn_out_norm, g, RMS_NORM_EPS).unwrap());
            }
            let mut j = 0;
            for o in &out.kv_out[t] {
                for v in rms_norm(o, &w.kv_out_norm, RMS_NORM_EPS).unwrap() {
                    sum[j] += v;
                    j += 1;
                }
            }
            let half: Vec<f64> = w.w_o.left_mul(&sum).unwrap().iter().map(|v| 0.5 * v).collect();
            assert!(max_abs_diff(&out.outputs[t], &half) < 1e-12);
        }
    }

    #[test]
    fn padding_never_selected() {
        let cfg = LayerConfig::small(6);
        let w = init_weights(&cfg, 15).unwrap();
        let mut input = random_input(6, 6, 16);
        input.padding = vec![false, false, true, false, true, true];
        let out = forward(&input, &w, &cfg, 0.0, None).unwrap();
        assert_eq!(out.cache.len(), 3);
        assert!(out.cache.entries().iter().all(|e| !e.padding));
    }

    #[test]
    fn ffn_cases() {
        let w = FfnWeights::init(4, 6, 3);
        assert_eq!(ffn_swiglu(&[0.0; 4], &w).unwrap(), vec![0.0; 4]);
        let mut zero_gate = w.clone();
        zero_gate.w_gate = Matrix::zeros(4, 6);
        assert_eq!(ffn_swiglu(&[0.3, -1.0, 2.0, 0.5], &zero_gate).unwrap(), vec![0.0; 4]);

        let x = [0.3, -1.0, 2.0, 0.5];
        let col = |m: &Matrix, c: usize| -> Vec<f64> { (0..m.rows()).map(|r| m.get(r, c)).collect() };
        let hidden: Vec<f64> = (0..6).map(|j| silu(dot(&x, &col(&w.w_gate, j))) * dot(&x, &col(&w.w_up, j))).collect();
        let want: Vec<f64> = (0..4).map(|i| dot(&hidden, &col(&w.w_down, i))).collect();
        assert!(max_abs_diff(&ffn_swiglu(&x, &w).unwrap(), &want) < 1e-12);
        assert!(ffn_swiglu(&[1.0; 3], &w).is_err());
    }

    #[test]
    fn single_block_stack() {
        let cfg = LayerConfig::small(6);
        let block = Block::init(cfg.clone(), 17).unwrap();
        let input = random_input(7, 6, 18);
        let stack = stack_forward(std::slice::from_ref(&block), &input, &[0.8]).unwrap();
        let out = forward(&input, &block.ham, &cfg, 0.8, None).unwrap();
        for t in 0..7 {
            let mut h: Vec<f64> = input.x[t].iter().zip(&out.outputs[t]).map(|(a, b)| a + b).collect();
            let f = ffn_swiglu(&rms_norm(&h, &block.ffn.pre_norm, RMS_NORM_EPS).unwrap(), &block.ffn).unwrap();
            h.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            assert_eq!(stack.hidden[t], h);
        }
        assert_eq!(stack.global_rho(), out.rho_kv);
    }

    #[test]
    fn non_finite_input_reported() {
        let cfg = LayerConfig::small(6);
        let w = init_weights(&cfg, 19).unwrap();
        let mut input = random_input(3, 6, 20);
        input.x[1][2] = f64::NAN;
        assert!(matches!(
            forward(&input, &w, &cfg, 0.0, None),
            Err(HamError::NonFinite { position: 8, .. })
        ));
    }
}
