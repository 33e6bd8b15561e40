//! Analytical parameter, forward-FLOP and forward-memory accounting for the
//! hybrid layer, pure gated delta-rule stacks, Transformers and delta-rule
//! stacks interleaved with full attention every `k` layers.
//!
//! Every quantity has up to three evaluation routes:
//!
//! * **itemized** sums one term per row of the per-layer accounting tables;
//! * **simplified** multiplies the closed per-layer forms by the layer count;
//! * **polynomial** evaluates the model-level closed forms in `d`, which
//!   assume the layer count follows the aspect ratio exactly.
//!
//! Dimensions are real-valued so the routes can be compared without integer
//! rounding. Widths derive from `d` by the fixed architectural ratios
//! (`d_QK = 5d/7`, `d_V = 15d/14`, 256/384 recurrent and 128/192 attention
//! head widths, `d_int = 10d/7`, or `4d/3` for the Transformer).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HamError, Result};
use crate::layer::LayerConfig;
use crate::router::RouterKind;

pub const VOCAB: f64 = 32_000.0;
pub const ZFLOP: f64 = 1e21;
pub const TRAIN_T: f64 = 16_384.0;
pub const TRAIN_RANKS: f64 = 32.0;
pub const TRAIN_STEPS: f64 = 95_367.0;
/// Hidden size per layer of the hybrid, delta-rule and interleaved stacks.
pub const RHO_RECURRENT: f64 = 1792.0 / 24.0;
pub const RHO_TRANSFORMER: f64 = 1920.0 / 23.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum Family {
    Ham,
    Gdn,
    Transformer,
    /// Full attention every `k`-th layer.
    GdnGsa { k: u32 },
}

impl Family {
    pub fn rho(self) -> f64 {
        match self {
            Family::Transformer => RHO_TRANSFORMER,
            _ => RHO_RECURRENT,
        }
    }

    pub fn label(self) -> String {
        match self {
            Family::Ham => "HAM".into(),
            Family::Gdn => "GDN".into(),
            Family::Transformer => "Transformer".into(),
            Family::GdnGsa { k } => format!("GDN-GSA(k={k})"),
        }
    }

    pub fn all_reference() -> [Family; 4] {
        [Family::Ham, Family::Gdn, Family::Transformer, Family::GdnGsa { k: 2 }]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Family {
    type Err = HamError;

    /// `ham`, `gdn`, `transformer`/`tf`, `gsa`/`gdn-gsa` (k = 2) or `gsa:K`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, k) = match lower.split_once(':') {
            Some((n, k)) => (
                n.to_string(),
                Some(k.parse::<u32>().map_err(|_| HamError::Config(format!("bad interleave period in {s}")))?),
            ),
            None => (lower.clone(), None),
        };
        match (name.as_str(), k) {
            ("ham", None) => Ok(Family::Ham),
            ("gdn", None) => Ok(Family::Gdn),
            ("transformer" | "tf", None) => Ok(Family::Transformer),
            ("gsa" | "gdn-gsa" | "gdn_gsa", k) => match k.unwrap_or(2) {
                0 => Err(HamError::Config("interleave period must be ≥ 1".into())),
                k => Ok(Family::GdnGsa { k }),
            },
            _ => Err(HamError::Config(format!("unknown family {s}"))),
        }
    }
}

/// Widths entering the accounting tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub d: f64,
    pub d_qk: f64,
    pub d_v: f64,
    pub h_rnn: f64,
    pub h_kv: f64,
    pub rnn_v_head: f64,
    pub kv_v_head: f64,
    /// Key/value width of a full-attention layer.
    pub d_kv: f64,
    /// Head count of a full-attention layer.
    pub attn_heads: f64,
    pub d_int: f64,
    pub d_conv: f64,
    pub chunk: f64,
}

impl Dims {
    /// Hybrid, delta-rule and interleaved stacks at width `d`.
    pub fn recurrent(d: f64) -> Self {
        let d_qk = 5.0 * d / 7.0;
        Self {
            d,
            d_qk,
            d_v: 15.0 * d / 14.0,
            h_rnn: d_qk / 256.0,
            h_kv: d_qk / 128.0,
            rnn_v_head: 384.0,
            kv_v_head: 192.0,
            d_kv: d,
            attn_heads: d / 128.0,
            d_int: 10.0 * d / 7.0,
            d_conv: 4.0,
            chunk: 64.0,
        }
    }

    pub fn transformer(d: f64) -> Self {
        Self {
            d_qk: d,
            d_v: d,
            d_int: 4.0 * d / 3.0,
            ..Self::recurrent(d)
        }
    }

    pub fn for_family(family: Family, d: f64) -> Self {
        match family {
            Family::Transformer => Self::transformer(d),
            _ => Self::recurrent(d),
        }
    }
}

impl From<&LayerConfig> for Dims {
    fn from(c: &LayerConfig) -> Self {
        let d = c.d_hidden as f64;
        Self {
            d,
            d_qk: c.d_qk as f64,
            d_v: c.d_v as f64,
            h_rnn: c.h_rnn() as f64,
            h_kv: c.h_kv() as f64,
            rnn_v_head: c.rnn_v_head as f64,
            kv_v_head: c.kv_v_head as f64,
            d_kv: d,
            attn_heads: d / 128.0,
            d_int: c.ffn_int as f64,
            d_conv: c.d_conv as f64,
            chunk: c.chunk as f64,
        }
    }
}

impl From<&LayerConfig> for HamOptions {
    fn from(c: &LayerConfig) -> Self {
        Self {
            learnable_tau: c.learnable_tau,
            learnable_router: c.router.kind == RouterKind::InputLinear,
        }
    }
}

/// Optional trained scalars of the hybrid layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HamOptions {
    pub learnable_tau: bool,
    /// Single-projection input router in place of prediction-error routing.
    pub learnable_router: bool,
}

/// One row of an accounting table, evaluated per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub table: String,
    pub item: String,
    pub value: f64,
}

fn row(table: &str, item: &str, value: f64) -> Row {
    Row {
        table: table.into(),
        item: item.into(),
        value,
    }
}

pub fn sum_rows(rows: &[Row]) -> f64 {
    rows.iter().map(|r| r.value).sum()
}

const T_HAM_P: &str = "HAM params";
const T_TF_P: &str = "Transformer params";
const T_GDN_P: &str = "GDN params";
const T_FFN_P: &str = "FFN params";
const T_RNN_F: &str = "RNN FLOPs";
const T_KV_F: &str = "KV FLOPs";
const T_HAM_F: &str = "HAM FLOPs";
const T_TF_F: &str = "Transformer FLOPs";
const T_GDN_F: &str = "GDN FLOPs";
const T_FFN_F: &str = "FFN FLOPs";
const T_HEAD: &str = "Embedding and head";

pub fn ham_layer_param_rows(x: &Dims, o: HamOptions) -> Vec<Row> {
    let qkv = 2.0 * x.d_qk + x.d_v;
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    vec![
        row(T_HAM_P, "Pre-norm", x.d),
        row(T_HAM_P, "W_Q, W_K", 2.0 * x.d * x.d_qk),
        row(T_HAM_P, "W_V", x.d * x.d_v),
        row(T_HAM_P, "RNN RMS norms", qkv),
        row(T_HAM_P, "KV RMS norms", qkv),
        row(T_HAM_P, "a, b projections", 2.0 * x.d * x.h_rnn),
        row(T_HAM_P, "A_log", x.h_rnn),
        row(T_HAM_P, "dt bias", x.h_rnn),
        row(T_HAM_P, "W_RNN-Q conv, W_RNN-K conv", 2.0 * x.d_qk * x.d_conv),
        row(T_HAM_P, "W_RNN-V conv", x.d_v * x.d_conv),
        row(T_HAM_P, "W_KV-Q conv, W_KV-K conv", 2.0 * x.d_qk * x.d_conv),
        row(T_HAM_P, "W_KV-V conv", x.d_v * x.d_conv),
        row(T_HAM_P, "tau_l (learnable threshold)", on(o.learnable_tau)),
        row(T_HAM_P, "W_router (learnable router)", x.d * on(o.learnable_router)),
        row(T_HAM_P, "RNN norm", x.rnn_v_head),
        row(T_HAM_P, "RNN norm gate", x.d * x.d_v),
        row(T_HAM_P, "KV norm", x.kv_v_head),
        row(T_HAM_P, "Per-head RNN gate", x.d * x.h_rnn),
        row(T_HAM_P, "Per-head KV gate", x.d * x.h_kv),
        row(T_HAM_P, "Output projection", x.d_v * x.d),
    ]
}

/// The table's closed "Layer Total" expression.
pub fn ham_layer_params_total(x: &Dims, o: HamOptions) -> f64 {
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    (x.d + 2.0 * x.d_conv + 2.0) * (2.0 * x.d_qk + x.d_v)
        + x.d * (3.0 * x.h_rnn + x.h_kv + 2.0 * x.d_v + 1.0)
        + 2.0 * x.h_rnn
        + x.rnn_v_head
        + x.kv_v_head
        + on(o.learnable_tau)
        + x.d * on(o.learnable_router)
}

pub fn ham_layer_params_simplified(d: f64, o: HamOptions) -> f64 {
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    8345.0 / 1792.0 * d * d + 23301.0 / 896.0 * d + 576.0 + on(o.learnable_tau) + d * on(o.learnable_router)
}

pub fn tf_layer_param_rows(x: &Dims) -> Vec<Row> {
    vec![
        row(T_TF_P, "Pre-norm", x.d),
        row(T_TF_P, "W_Q", x.d * x.d),
        row(T_TF_P, "W_K", x.d * x.d_kv),
        row(T_TF_P, "W_V", x.d * x.d_kv),
        row(T_TF_P, "W_O", x.d * x.d),
    ]
}

pub fn tf_layer_params_total(x: &Dims) -> f64 {
    x.d * (2.0 * x.d + 2.0 * x.d_kv + 1.0)
}

pub fn tf_layer_params_simplified(d: f64) -> f64 {
    d * (4.0 * d + 1.0)
}

pub fn gdn_layer_param_rows(x: &Dims) -> Vec<Row> {
    vec![
        row(T_GDN_P, "Pre-norm", x.d),
        row(T_GDN_P, "W_Q, W_K", 2.0 * x.d * x.d_qk),
        row(T_GDN_P, "W_V", x.d * x.d_v),
        row(T_GDN_P, "a, b projections", 2.0 * x.d * x.h_rnn),
        row(T_GDN_P, "A_log", x.h_rnn),
        row(T_GDN_P, "dt bias", x.h_rnn),
        row(T_GDN_P, "W_Q conv, W_K conv", 2.0 * x.d_qk * x.d_conv),
        row(T_GDN_P, "W_V conv", x.d_v * x.d_conv),
        row(T_GDN_P, "Gate projection", x.d * x.d_v),
        row(T_GDN_P, "Output norm", x.rnn_v_head),
        row(T_GDN_P, "W_O", x.d_v * x.d),
    ]
}

pub fn gdn_layer_params_total(x: &Dims) -> f64 {
    x.d * (2.0 * x.d_qk + 3.0 * x.d_v + 2.0 * x.h_rnn + 1.0)
        + x.d_conv * (2.0 * x.d_qk + x.d_v)
        + 2.0 * x.h_rnn
        + x.rnn_v_head
}

pub fn gdn_layer_params_simplified(d: f64) -> f64 {
    65.0 / 14.0 * d * d + 21.0 * d + 394.0
}

pub fn ffn_param_rows(d: f64, d_int: f64) -> Vec<Row> {
    vec![
        row(T_FFN_P, "Pre-norm", d),
        row(T_FFN_P, "Gate projection (W_gate)", d * d_int),
        row(T_FFN_P, "Up projection (W_up)", d * d_int),
        row(T_FFN_P, "Down projection (W_down)", d_int * d),
    ]
}

pub fn ffn_params_total(d: f64, d_int: f64) -> f64 {
    d + 3.0 * d * d_int
}

pub fn ffn_params_simplified(family: Family, d: f64) -> f64 {
    match family {
        Family::Transformer => d * (4.0 * d + 1.0),
        _ => 30.0 / 7.0 * d * d + d,
    }
}

pub fn head_param_rows(d: f64, vocab: f64) -> Vec<Row> {
    vec![
        row(T_HEAD, "Token embedding", vocab * d),
        row(T_HEAD, "Output head", vocab * d),
        row(T_HEAD, "Final norm", d),
    ]
}

pub fn rnn_flop_rows(x: &Dims, t: f64) -> Vec<Row> {
    let c = x.chunk;
    vec![
        row(T_RNN_F, "beta (from b proj)", 3.0 * t * x.d * x.h_rnn),
        row(T_RNN_F, "g (from a proj & A_log)", 5.0 * t * x.d * x.h_rnn),
        row(T_RNN_F, "g cumsum", x.h_rnn * t),
        row(T_RNN_F, "Compute A", t / c * c * c * (2.0 * x.d_qk + 3.5 * x.h_rnn)),
        row(T_RNN_F, "Invert A", t / c * x.h_rnn * c * c * c / 2.0),
        row(T_RNN_F, "Recompute w, u", 2.0 * t / c * c * c * (x.d_qk + x.d_v)),
        row(T_RNN_F, "Gated Delta Rule", 4.0 * t * x.d_qk * x.rnn_v_head),
        row(T_RNN_F, "Output", 2.0 * t * (x.d_qk * x.rnn_v_head + c * (x.d_qk + x.d_v))),
    ]
}

pub fn kv_flop_rows(x: &Dims, t: f64, t_kv: f64) -> Vec<Row> {
    vec![
        row(T_KV_F, "RoPE on Q, K", 4.0 * t * x.d_qk),
        row(T_KV_F, "QK^T (causal)", t * t_kv * x.d_qk),
        row(T_KV_F, "Softmax (causal)", 2.0 * t * t_kv * x.h_kv),
        row(T_KV_F, "Attn V (causal)", t * t_kv * x.d_v),
    ]
}

/// Hybrid-layer rows with the recurrent and attention blocks expanded.
pub fn ham_layer_flop_rows(x: &Dims, t: f64, t_kv: f64, o: HamOptions) -> Vec<Row> {
    let qkv = 2.0 * x.d_qk + x.d_v;
    let learned = if o.learnable_router { 1.0 } else { 0.0 };
    let mut rows = vec![
        row(T_HAM_F, "Pre-norm", 4.0 * t * x.d),
        row(T_HAM_F, "W_Q, W_K", 4.0 * t * x.d * x.d_qk),
        row(T_HAM_F, "W_V", 2.0 * t * x.d * x.d_v),
        row(T_HAM_F, "RNN Q, K, V norms", 4.0 * t * qkv),
        row(T_HAM_F, "KV Q, K, V norms", 4.0 * t * qkv),
        row(T_HAM_F, "RNN Q, K, V conv", t * qkv * (2.0 * x.d_conv + 3.0)),
        row(T_HAM_F, "KV Q, K, V conv", t * qkv * (2.0 * x.d_conv + 3.0)),
        row(T_HAM_F, "Selection via RNN state", 12.0 * t * x.d * (1.0 - learned)),
        row(T_HAM_F, "Selection via input", 2.0 * t * x.d * learned),
    ];
    rows.extend(rnn_flop_rows(x, t));
    rows.extend(kv_flop_rows(x, t, t_kv));
    rows.extend([
        row(T_HAM_F, "RNN norm", 4.0 * t * x.rnn_v_head),
        row(T_HAM_F, "RNN norm gate", 2.0 * t * x.d * x.d_v + t * x.d_v),
        row(T_HAM_F, "KV norm", 4.0 * t * x.kv_v_head),
        row(T_HAM_F, "Per-head RNN gate", 2.0 * t * x.d * x.h_rnn + t * x.d_v),
        row(T_HAM_F, "Per-head KV gate", 2.0 * t * x.d * x.h_kv + t * x.d_v),
        row(T_HAM_F, "Output projection", 2.0 * t * x.d_v * x.d),
    ]);
    rows
}

pub fn ham_layer_flops_total(x: &Dims, t: f64, t_kv: f64, o: HamOptions) -> f64 {
    let c = x.chunk;
    let router_saving = if o.learnable_router { 10.0 * x.d } else { 0.0 };
    t * (4.0 * x.d * x.d_qk
        + 6.0 * x.d * x.d_v
        + 8.0 * x.d_conv * x.d_qk
        + 4.0 * x.d_conv * x.d_v
        + 6.0 * x.d_qk * x.rnn_v_head
        + x.d * (16.0 + 2.0 * x.h_kv)
        + x.d_qk * (32.0 + 6.0 * c + t_kv)
        + x.d_v * (17.0 + 4.0 * c + t_kv)
        + x.h_rnn * (10.0 * x.d + 1.0 + 3.5 * c + c * c / 2.0)
        + 2.0 * t_kv * x.h_kv
        + 4.0 * x.rnn_v_head
        + 4.0 * x.kv_v_head
        - router_saving)
}

pub fn ham_layer_flops_simplified(d: f64, t: f64, t_kv: f64, o: HamOptions) -> f64 {
    let router_saving = if o.learnable_router { 10.0 * d } else { 0.0 };
    t * (65.0 / 7.0 * d * d + 33059.0 / 14.0 * d + 13669.0 + t_kv * (25.0 / 14.0 * d + 20.0) - router_saving)
}

pub fn tf_layer_flop_rows(x: &Dims, t: f64) -> Vec<Row> {
    vec![
        row(T_TF_F, "Pre-norm", 4.0 * t * x.d),
        row(T_TF_F, "W_Q", 2.0 * t * x.d * x.d),
        row(T_TF_F, "W_K", 2.0 * t * x.d * x.d_kv),
        row(T_TF_F, "W_V", 2.0 * t * x.d * x.d_kv),
        row(T_TF_F, "RoPE on Q", 6.0 * t * x.d),
        row(T_TF_F, "RoPE on K", 6.0 * t * x.d_kv),
        row(T_TF_F, "QK^T (causal)", t * t * x.d),
        row(T_TF_F, "Softmax (causal)", 2.0 * t * t * x.attn_heads),
        row(T_TF_F, "Attn V (causal)", t * t * x.d),
        row(T_TF_F, "W_O", 2.0 * t * x.d * x.d),
    ]
}

pub fn tf_layer_flops_total(x: &Dims, t: f64) -> f64 {
    2.0 * t * (2.0 * x.d + x.d * (x.d + 2.0 * x.d_kv) + 3.0 * (x.d + x.d_kv) + x.d * x.d)
        + 2.0 * t * t * (x.d + x.attn_heads)
}

pub fn tf_layer_flops_simplified(d: f64, t: f64) -> f64 {
    8.0 * t * d * (d + 2.0) + 129.0 / 64.0 * t * t * d
}

pub fn gdn_layer_flop_rows(x: &Dims, t: f64) -> Vec<Row> {
    let c = x.chunk;
    let qkv = 2.0 * x.d_qk + x.d_v;
    vec![
        row(T_GDN_F, "Pre-norm", 4.0 * t * x.d),
        row(T_GDN_F, "W_Q, W_K", 4.0 * t * x.d * x.d_qk),
        row(T_GDN_F, "W_V", 2.0 * t * x.d * x.d_v),
        row(T_GDN_F, "Q, K, V norms", 4.0 * t * qkv),
        row(T_GDN_F, "Q, K, V conv", t * qkv * (2.0 * x.d_conv + 3.0)),
        row(T_GDN_F, "beta (from b proj)", 3.0 * t * x.d * x.h_rnn),
        row(T_GDN_F, "g (from a proj & A_log)", 5.0 * t * x.d * x.h_rnn),
        row(T_GDN_F, "g cumsum", x.h_rnn * t),
        row(T_GDN_F, "Compute A", t / c * c * c * (2.0 * x.d_qk + 3.5 * x.h_rnn)),
        row(T_GDN_F, "Invert A", t / c * x.h_rnn * c * c * c / 2.0),
        row(T_GDN_F, "Recompute w, u", 2.0 * t / c * c * c * (x.d_qk + x.d_v)),
        row(T_GDN_F, "Gated delta rule", 4.0 * t * x.d_qk * x.rnn_v_head),
        row(T_GDN_F, "Output", 2.0 * t * (x.d_qk * x.rnn_v_head + c * (x.d_qk + x.d_v))),
        row(T_GDN_F, "Pre-gate norm", 4.0 * t * x.d),
        row(T_GDN_F, "Gate projection", 2.0 * t * x.d * x.d_v),
        row(T_GDN_F, "SiLU activation", 3.0 * t * x.d_v),
        row(T_GDN_F, "Fused norm + gate", 5.0 * t * x.d_v),
        row(T_GDN_F, "Output projection", 2.0 * t * x.d_v * x.d),
        row(T_GDN_F, "Final norm", 4.0 * t * x.d),
    ]
}

pub fn gdn_layer_flops_total(x: &Dims, t: f64) -> f64 {
    let c = x.chunk;
    t * ((2.0 * x.d + 2.0 * x.d_conv + 7.0) * (2.0 * x.d_qk + x.d_v)
        + 8.0 * x.d * x.h_rnn
        + x.h_rnn * (1.0 + 3.5 * c + c * c / 2.0)
        + 6.0 * c * x.d_qk
        + 4.0 * c * x.d_v
        + 6.0 * x.d_qk * x.rnn_v_head
        + 12.0 * x.d
        + 4.0 * x.d * x.d_v
        + 8.0 * x.d_v)
}

/// The reference closed form. It does not equal the sum of its own rows; the
/// model-level polynomials and the training-FLOP figures are built on it.
pub fn gdn_layer_flops_simplified(d: f64, t: f64) -> f64 {
    t * d * (2085.0 / 224.0 * d + 1_560_037.0 / 1792.0)
}

pub fn ffn_flop_rows(d: f64, d_int: f64, t: f64) -> Vec<Row> {
    vec![
        row(T_FFN_F, "Gate projection (W_gate)", 2.0 * t * d * d_int),
        row(T_FFN_F, "Up projection (W_up)", 2.0 * t * d * d_int),
        row(T_FFN_F, "SiLU activation", 3.0 * t * d_int),
        row(T_FFN_F, "Gate * Up", t * d_int),
        row(T_FFN_F, "Down projection (W_down)", 2.0 * t * d_int * d),
    ]
}

pub fn ffn_flops_total(d: f64, d_int: f64, t: f64) -> f64 {
    t * d_int * (6.0 * d + 4.0)
}

pub fn ffn_flops_simplified(family: Family, d: f64, t: f64) -> f64 {
    match family {
        Family::Transformer => 8.0 / 3.0 * t * d * (3.0 * d + 2.0),
        _ => 20.0 / 7.0 * t * d * (3.0 * d + 2.0),
    }
}

pub fn head_flop_rows(d: f64, vocab: f64, t: f64) -> Vec<Row> {
    vec![row(T_HEAD, "Output head", 4.0 * t * vocab * d), row(T_HEAD, "Final norm", 4.0 * t * d)]
}

/// Total parameters from the model-level closed forms.
pub fn params_polynomial(family: Family, d: f64) -> f64 {
    let (d2, d3) = (d * d, d * d * d);
    match family {
        Family::Ham => 48075.0 / 401_408.0 * d3 + 72591.0 / 200_704.0 * d2 + 448_061.0 / 7.0 * d,
        Family::Gdn => 375.0 / 3136.0 * d3 + 33.0 / 112.0 * d2 + 7_168_703.0 / 112.0 * d,
        Family::Transformer => 23.0 / 240.0 * d3 + 23.0 / 960.0 * d2 + 64001.0 * d,
        Family::GdnGsa { k } => {
            let k = f64::from(k);
            (375.0 * k - 27.0) / (3136.0 * k) * d3
                + (33.0 * k - 30.0) / (112.0 * k) * d2
                + (7_168_703.0 * k - 591.0) / (112.0 * k) * d
        }
    }
}

/// Total forward FLOPs from the model-level closed forms.
pub fn flops_polynomial(family: Family, d: f64, t: f64, t_kv: f64) -> f64 {
    let (d2, d3) = (d * d, d * d * d);
    match family {
        Family::Ham => {
            t * (375.0 / 1568.0 * d3 + 99417.0 / 3136.0 * d2 + 28_713_903.0 / 224.0 * d)
                + t * t_kv * (75.0 / 3136.0 * d2 + 15.0 / 56.0 * d)
        }
        Family::Gdn => t * (12015.0 / 50176.0 * d3 + 4_689_327.0 / 401_408.0 * d2 + 128_004.0 * d),
        Family::Transformer => t * (23.0 / 120.0 * d3 + (23.0 / 90.0 + 989.0 / 40960.0 * t) * d2 + 128_004.0 * d),
        Family::GdnGsa { k } => {
            let k = f64::from(k);
            t * ((12015.0 * k - 879.0) / (50176.0 * k) * d3
                + (10836.0 * t + 4_689_327.0 * k - 4_572_591.0) / (401_408.0 * k) * d2
                + 128_004.0 * d)
        }
    }
}

/// Forward memory in bytes from the model-level closed forms.
pub fn memory_polynomial(family: Family, d: f64, t: f64, t_kv: f64) -> f64 {
    let (d2, d3) = (d * d, d * d * d);
    match family {
        Family::Ham => {
            48075.0 / 200_704.0 * d3 + 809_871.0 / 100_352.0 * d2 + 75.0 / 1568.0 * t_kv * d2 + 896_122.0 / 7.0 * d
        }
        Family::Gdn => 375.0 / 1568.0 * d3 + 3111.0 / 392.0 * d2 + 7_168_703.0 / 56.0 * d,
        Family::Transformer => 23.0 / 120.0 * d3 + 23.0 / 480.0 * (1.0 + t) * d2 + 128_002.0 * d,
        Family::GdnGsa { k } => {
            let k = f64::from(k);
            (375.0 * k - 27.0) / (1568.0 * k) * d3
                + (12444.0 * k - 12360.0 + 75.0 * t) / (1568.0 * k) * d2
                + (7_168_703.0 * k - 591.0) / (56.0 * k) * d
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRounding {
    /// Real-valued `d/ρ`, as the closed forms assume.
    Exact,
    #[default]
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCount {
    Fixed(u32),
    Aspect { rho: f64, rounding: LayerRounding },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Itemized,
    #[default]
    Simplified,
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: Family,
    pub d: f64,
    pub layers: LayerCount,
    pub vocab: f64,
    pub ham: HamOptions,
}

impl ArchConfig {
    /// The four 800M-scale configurations.
    pub fn reference(family: Family) -> Self {
        let (d, l) = match family {
            Family::Transformer => (1920.0, 23),
            _ => (1792.0, 24),
        };
        Self {
            family,
            d,
            layers: LayerCount::Fixed(l),
            vocab: VOCAB,
            ham: HamOptions::default(),
        }
    }

    /// Width `d` with the layer count from the family's aspect ratio.
    pub fn scaled(family: Family, d: f64, rounding: LayerRounding) -> Self {
        Self {
            family,
            d,
            layers: LayerCount::Aspect {
                rho: family.rho(),
                rounding,
            },
            vocab: VOCAB,
            ham: HamOptions::default(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::for_family(self.family, self.d)
    }

    pub fn num_layers(&self) -> f64 {
        match self.layers {
            LayerCount::Fixed(l) => f64::from(l),
            LayerCount::Aspect { rho, rounding } => match rounding {
                LayerRounding::Exact => self.d / rho,
                LayerRounding::Nearest => (self.d / rho).round(),
            },
        }
    }

    fn is_integral(&self) -> bool {
        !matches!(
            self.layers,
            LayerCount::Aspect {
                rounding: LayerRounding::Exact,
                ..
            }
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(HamError::Config(format!("hidden size must be positive, got {}", self.d)));
        }
        if !(self.vocab >= 0.0) {
            return Err(HamError::Config("vocabulary size must be non-negative".into()));
        }
        if let LayerCount::Aspect { rho, .. } = self.layers {
            if !(rho > 0.0) {
                return Err(HamError::Config("aspect ratio must be positive".into()));
            }
        }
        if let Family::GdnGsa { k } = self.family {
            if k == 0 {
                return Err(HamError::Config("interleave period must be ≥ 1".into()));
            }
            let l = self.num_layers();
            if self.is_integral() && l % f64::from(k) != 0.0 {
                return Err(HamError::Config(format!("interleave period {k} must divide the layer count {l}")));
            }
        }
        Ok(())
    }

    /// `(layers of the primary kind, full-attention layers)`.
    fn layer_split(&self) -> (f64, f64) {
        let l = self.num_layers();
        match self.family {
            Family::GdnGsa { k } => {
                let attn = l / f64::from(k);
                (l - attn, attn)
            }
            _ => (l, 0.0),
        }
    }
}

/// A table row scaled by how many times it occurs in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub table: String,
    pub item: String,
    pub per_layer: f64,
    pub multiplicity: f64,
    pub total: f64,
}

fn scale_rows(rows: Vec<Row>, m: f64, out: &mut Vec<ModelRow>) {
    out.extend(rows.into_iter().map(|r| ModelRow {
        total: r.value * m,
        table: r.table,
        item: r.item,
        per_layer: r.value,
        multiplicity: m,
    }));
}

pub fn param_rows(cfg: &ArchConfig) -> Result<Vec<ModelRow>> {
    cfg.validate()?;
    let x = cfg.dims();
    let (main, attn) = cfg.layer_split();
    let mut out = Vec::new();
    match cfg.family {
        Family::Ham => scale_rows(ham_layer_param_rows(&x, cfg.ham), main, &mut out),
        Family::Gdn => scale_rows(gdn_layer_param_rows(&x), main, &mut out),
        Family::Transformer => scale_rows(tf_layer_param_rows(&x), main, &mut out),
        Family::GdnGsa { .. } => {
            scale_rows(gdn_layer_param_rows(&x), main, &mut out);
            scale_rows(tf_layer_param_rows(&x), attn, &mut out);
        }
    }
    scale_rows(ffn_param_rows(x.d, x.d_int), main + attn, &mut out);
    scale_rows(head_param_rows(x.d, cfg.vocab), 1.0, &mut out);
    Ok(out)
}

/// Itemized parameter total.
pub fn params(cfg: &ArchConfig) -> Result<f64> {
    Ok(param_rows(cfg)?.iter().map(|r| r.total).sum())
}

/// Per-layer closed forms times the layer counts.
pub fn params_simplified(cfg: &ArchConfig) -> Result<f64> {
    cfg.validate()?;
    let d = cfg.d;
    let (main, attn) = cfg.layer_split();
    let layer = match cfg.family {
        Family::Ham => ham_layer_params_simplified(d, cfg.ham),
        Family::Gdn | Family::GdnGsa { .. } => gdn_layer_params_simplified(d),
        Family::Transformer => tf_layer_params_simplified(d),
    };
    let ffn = ffn_params_simplified(cfg.family, d);
    Ok(main * (layer + ffn) + attn * (tf_layer_params_simplified(d) + ffn) + (2.0 * cfg.vocab + 1.0) * d)
}

fn check_lengths(cfg: &ArchConfig, t: f64, t_kv: f64) -> Result<()> {
    if !(t >= 1.0) {
        return Err(HamError::Config(format!("sequence length must be ≥ 1, got {t}")));
    }
    if cfg.family == Family::Ham && !(0.0..=t).contains(&t_kv) {
        return Err(HamError::Config(format!("T_KV = {t_kv} must lie in [0, T = {t}]")));
    }
    Ok(())
}

pub fn flop_rows(cfg: &ArchConfig, t: f64, t_kv: f64) -> Result<Vec<ModelRow>> {
    cfg.validate()?;
    check_lengths(cfg, t, t_kv)?;
    let x = cfg.dims();
    let (main, attn) = cfg.layer_split();
    let mut out = Vec::new();
    match cfg.family {
        Family::Ham => scale_rows(ham_layer_flop_rows(&x, t, t_kv, cfg.ham), main, &mut out),
        Family::Gdn => scale_rows(gdn_layer_flop_rows(&x, t), main, &mut out),
        Family::Transformer => scale_rows(tf_layer_flop_rows(&x, t), main, &mut out),
        Family::GdnGsa { .. } => {
            scale_rows(gdn_layer_flop_rows(&x, t), main, &mut out);
            scale_rows(tf_layer_flop_rows(&x, t), attn, &mut out);
        }
    }
    scale_rows(ffn_flop_rows(x.d, x.d_int, t), main + attn, &mut out);
    scale_rows(head_flop_rows(x.d, cfg.vocab, t), 1.0, &mut out);
    Ok(out)
}

/// Forward FLOPs of one sequence of length `t`; `t_kv` is only read for the
/// hybrid layer.
pub fn forward_flops(cfg: &ArchConfig, t: f64, t_kv: f64, route: Route) -> Result<f64> {
    cfg.validate()?;
    check_lengths(cfg, t, t_kv)?;
    let d = cfg.d;
    match route {
        Route::Itemized => Ok(flop_rows(cfg, t, t_kv)?.iter().map(|r| r.total).sum()),
        Route::Simplified => {
            let (main, attn) = cfg.layer_split();
            let layer = match cfg.family {
                Family::Ham => ham_layer_flops_simplified(d, t, t_kv, cfg.ham),
                Family::Gdn | Family::GdnGsa { .. } => gdn_layer_flops_simplified(d, t),
                Family::Transformer => tf_layer_flops_simplified(d, t),
            };
            let ffn = ffn_flops_simplified(cfg.family, d, t);
            let attn_layer = tf_layer_flops_simplified(d, t);
            Ok(main * (layer + ffn) + attn * (attn_layer + ffn) + 4.0 * t * cfg.vocab * d + 4.0 * t * d)
        }
        Route::Polynomial => Ok(flops_polynomial(cfg.family, d, t, t_kv)),
    }
}

/// Recurrent-state and KV-cache bytes (2 bytes per value).
pub fn state_bytes(cfg: &ArchConfig, t: f64, t_kv: f64) -> f64 {
    let x = cfg.dims();
    let l = cfg.num_layers();
    let rnn_state = x.d_qk * x.rnn_v_head;
    match cfg.family {
        Family::Ham => 2.0 * l * (rnn_state + t_kv * (x.d_qk + x.d_v)),
        Family::Gdn => 2.0 * l * rnn_state,
        Family::Transformer => 2.0 * l * t * (x.d_qk + x.d_v),
        Family::GdnGsa { k } => {
            let k = f64::from(k);
            2.0 * l * ((k - 1.0) / k * rnn_state + t / k * (x.d_qk + x.d_v))
        }
    }
}

/// Weights and memory states at 2 bytes per value.
pub fn forward_memory(cfg: &ArchConfig, t: f64, t_kv: f64, route: Route) -> Result<f64> {
    cfg.validate()?;
    check_lengths(cfg, t, t_kv)?;
    match route {
        Route::Itemized => Ok(2.0 * params(cfg)? + state_bytes(cfg, t, t_kv)),
        Route::Simplified => Ok(2.0 * params_simplified(cfg)? + state_bytes(cfg, t, t_kv)),
        Route::Polynomial => Ok(memory_polynomial(cfg.family, cfg.d, t, t_kv)),
    }
}

/// `3 · forward · ranks · steps`.
pub fn training_flops(cfg: &ArchConfig, t: f64, t_kv: f64, ranks: f64, steps: f64, route: Route) -> Result<f64> {
    if !(ranks > 0.0 && steps > 0.0) {
        return Err(HamError::Config("ranks and steps must be positive".into()));
    }
    Ok(3.0 * forward_flops(cfg, t, t_kv, route)? * ranks * steps)
}

/// Per-token FLOPs and total memory from the long-context approximations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Asymptotic {
    pub flops_per_token: f64,
    pub memory: f64,
}

/// Defined for the four reference families; the interleaved form is for `k = 2`.
pub fn asymptotic(family: Family, p: f64, t: f64, t_kv: f64) -> Result<Asymptotic> {
    let p23 = p.powf(2.0 / 3.0);
    let p13 = p.cbrt();
    let (flops_per_token, memory) = match family {
        Family::Ham => (
            2.0 * p + (130.0 + 0.1 * t_kv) * p23 - 8.5e3 * t_kv,
            2.0 * p + t_kv * (0.208 * p23 - 13.0 * p13 - 11.4e3),
        ),
        Family::Gdn => (2.0 * p + 46.0 * p23, 2.0 * p + 30.0 * p23),
        Family::Transformer => (2.0 * p + t * (0.115 * p23 - 11e3), 2.0 * p + t * (0.23 * p23 - 21e3)),
        Family::GdnGsa { k: 2 } => (
            2.0 * p + t * (0.06 * p23 - 4.0 * p13 - 3.3e3),
            2.0 * p + t * (0.107 * p23 - 7.0 * p13 - 5.9e3),
        ),
        Family::GdnGsa { k } => {
            return Err(HamError::Config(format!("no long-context approximation for k = {k}")))
        }
    };
    Ok(Asymptotic { flops_per_token, memory })
}

/// Positive root of `params_polynomial(family, d) = p_target`.
pub fn solve_d_for_params(family: Family, p_target: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target.is_finite()) {
        return Err(HamError::NoBracket(p_target));
    }
    let f = |d: f64| params_polynomial(family, d) - p_target;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(HamError::NoBracket(p_target));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (params_polynomial(family, hi) - p_target).abs() <= 1e-12 * p_target {
            break;
        }
    }
    Ok(hi)
}

/// One family's line of the training-compute comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub family: String,
    pub d: f64,
    pub layers: f64,
    pub params: f64,
    pub t_kv: f64,
    pub zflops: f64,
    /// Percent change relative to the hybrid.
    pub relative_pct: f64,
    pub route: Route,
}

/// Training compute of the four 800M configurations at `T = 16384`, 32 ranks
/// and 95367 steps. The hybrid's cache length is `rho_target · T` throughout.
pub fn training_table(rho_target: f64, route: Route) -> Result<Vec<TrainingRow>> {
    if !(0.0..=1.0).contains(&rho_target) {
        return Err(HamError::Config(format!("target usage {rho_target} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    for family in Family::all_reference() {
        let cfg = ArchConfig::reference(family);
        let t_kv = if family == Family::Ham { rho_target * TRAIN_T } else { 0.0 };
        let total = training_flops(&cfg, TRAIN_T, t_kv, TRAIN_RANKS, TRAIN_STEPS, route)?;
        rows.push(TrainingRow {
            family: family.label(),
            d: cfg.d,
            layers: cfg.num_layers(),
            params: params(&cfg)?,
            t_kv,
            zflops: total / ZFLOP,
            relative_pct: 0.0,
            route,
        });
    }
    let base = rows[0].zflops;
    for r in &mut rows {
        r.relative_pct = (r.zflops / base - 1.0) * 100.0;
    }
    Ok(rows)
}

/// Summary of one configuration at one sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub family: String,
    pub d: f64,
    pub layers: f64,
    pub t: f64,
    pub t_kv: f64,
    pub params: f64,
    pub fwd_flops: f64,
    pub fwd_memory: f64,
    pub training_flops: f64,
    pub route: Route,
}

pub fn report(cfg: &ArchConfig, t: f64, t_kv: f64, ranks: f64, steps: f64, route: Route) -> Result<CostReport> {
    Ok(CostReport {
        family: cfg.family.label(),
        d: cfg.d,
        layers: cfg.num_layers(),
        t,
        t_kv,
        params: params(cfg)?,
        fwd_flops: forward_flops(cfg, t, t_kv, route)?,
        fwd_memory: forward_memory(cfg, t, t_kv, route)?,
        training_flops: training_flops(cfg, t, t_kv, ranks, steps, route)?,
        route,
    })
}
