//! Independent oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use ham_core::layer::{forward, init_weights, project, LayerConfig, LayerWeights, SequenceInput};
use ham_core::math::{cosine_distance, dot, norm, rope_apply, COSINE_EPS, ROPE_BASE};
use ham_core::rnn::{delta_update, la_update, readout, run_chunked, run_sequential, HeadInputs, HeadState, StepScalars};
use ham_core::router::{Aggregation, RouterKind, ThresholdParam};
use ham_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

pub fn unit(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gauss(r, n);
    let s = norm(&v);
    v.iter().map(|x| x / s).collect()
}

fn loss(m: &Matrix, k: &[f64], v: &[f64]) -> f64 {
    let pred = m.left_mul(k).unwrap();
    0.5 * pred.iter().zip(v).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
}

/// Relative error between the closed-form delta update and one step of size
/// `β` along a central-difference gradient of `½‖Mᵀk − v‖²`.
pub fn delta_vs_finite_difference(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d_k = r.random_range(1..=8);
    let d_v = r.random_range(1..=8);
    let m = Matrix::from_vec(d_k, d_v, gauss(&mut r, d_k * d_v)).unwrap();
    let k = gauss(&mut r, d_k);
    let v = gauss(&mut r, d_v);
    let beta: f64 = r.random_range(0.05..1.0);
    let analytic = delta_update(&HeadState::from_matrix(m.clone()), &k, &v, beta).unwrap();
    let h = 1e-5;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..d_k {
        for j in 0..d_v {
            let mut plus = m.clone();
            plus.set(i, j, m.get(i, j) + h);
            let mut minus = m.clone();
            minus.set(i, j, m.get(i, j) - h);
            let g = (loss(&plus, &k, &v) - loss(&minus, &k, &v)) / (2.0 * h);
            let fd_step = -beta * g;
            let an_step = analytic.matrix().get(i, j) - m.get(i, j);
            num += (an_step - fd_step).powi(2);
            den += fd_step.powi(2);
        }
    }
    (num / den.max(1e-300)).sqrt()
}

pub fn random_head_inputs(r: &mut ChaCha8Rng, t: usize, d_k: usize, d_v: usize) -> HeadInputs {
    HeadInputs {
        queries: (0..t).map(|_| unit(r, d_k)).collect(),
        keys: (0..t).map(|_| unit(r, d_k)).collect(),
        values: (0..t).map(|_| gauss(r, d_v)).collect(),
        scalars: (0..t).map(|_| StepScalars::new(r.random_range(0.5..1.0), r.random_range(0.0..1.0))).collect(),
    }
}

/// Largest absolute difference between the chunked and sequential runs over
/// outputs, errors and final state.
pub fn chunked_gap(seed: u64, t: usize, chunk: usize) -> f64 {
    let mut r = rng(seed);
    let (d_k, d_v) = (r.random_range(1..=6), r.random_range(1..=6));
    let inputs = random_head_inputs(&mut r, t, d_k, d_v);
    let init = HeadState::from_matrix(Matrix::from_vec(d_k, d_v, gauss(&mut r, d_k * d_v)).unwrap());
    let a = run_sequential(&inputs, &init).unwrap();
    let b = run_chunked(&inputs, &init, chunk).unwrap();
    let mut gap = a.final_state.matrix().max_abs_diff(b.final_state.matrix());
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        gap = gap.max(ham_core::math::max_abs_diff(x, y));
    }
    for (x, y) in a.errors.iter().zip(&b.errors) {
        gap = gap.max((x - y).abs());
    }
    gap
}

/// Median cosine similarity between the linear-attention readout for a stored
/// key and its value, over `seeds` draws of `t` random pairs.
pub fn interference_median(t: usize, d_k: usize, seeds: u64) -> f64 {
    let mut sims: Vec<f64> = (0..seeds)
        .map(|s| {
            let mut r = rng(s * 7919 + t as u64);
            let keys: Vec<Vec<f64>> = (0..t).map(|_| unit(&mut r, d_k)).collect();
            let vals: Vec<Vec<f64>> = (0..t).map(|_| gauss(&mut r, d_k)).collect();
            let mut st = HeadState::zeros(d_k, d_k);
            for (k, v) in keys.iter().zip(&vals) {
                st = la_update(&st, k, v).unwrap();
            }
            let j = r.random_range(0..t);
            let out = readout(&st, &keys[j]).unwrap();
            1.0 - cosine_distance(&out, &vals[j], 0.0)
        })
        .collect();
    sims.sort_by(f64::total_cmp);
    let n = sims.len();
    if n % 2 == 1 {
        sims[n / 2]
    } else {
        0.5 * (sims[n / 2 - 1] + sims[n / 2])
    }
}

/// Causal softmax attention at `t` over positions in `[start, t]`, per head.
pub fn dense_attention(q: &[Vec<f64>], keys: &[Vec<Vec<f64>>], vals: &[Vec<Vec<f64>>], start: usize, t: usize) -> Vec<Vec<f64>> {
    q.iter()
        .enumerate()
        .map(|(h, qh)| {
            let scale = 1.0 / (qh.len() as f64).sqrt();
            let logits: Vec<f64> = (start..=t).map(|s| dot(qh, &keys[s][h]) * scale).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut out = vec![0.0; vals[start][h].len()];
            for (i, s) in (start..=t).enumerate() {
                for (o, v) in out.iter_mut().zip(&vals[s][h]) {
                    *o += w[i] / z * v;
                }
            }
            out
        })
        .collect()
}

/// Max difference between the layer's attention-path output at `τ = 0` and
/// dense causal attention on its own projected, attach-scaled q, k, v.
pub fn tau_zero_gap(cfg: &LayerConfig, w: &LayerWeights, input: &SequenceInput) -> f64 {
    let out = forward(input, w, cfg, 0.0, None).unwrap();
    let p = project(input, w, cfg).unwrap();
    let vals: Vec<Vec<Vec<f64>>> = p
        .kv
        .v
        .iter()
        .zip(&out.decisions)
        .map(|(heads, d)| heads.iter().map(|v| v.iter().map(|x| d.attach * x).collect()).collect())
        .collect();
    let mut gap: f64 = 0.0;
    for (s, e) in input.segments() {
        for t in s..e {
            let want = dense_attention(&p.kv.q[t], &p.kv.k, &vals, s, t);
            for (a, b) in want.iter().zip(&out.kv_out[t]) {
                gap = gap.max(ham_core::math::max_abs_diff(a, b));
            }
        }
    }
    gap
}

/// A valid random layer configuration with a random router.
pub fn random_config(r: &mut ChaCha8Rng) -> LayerConfig {
    // (d_qk, rnn_qk_head, kv_qk_head, d_v, rnn_v_head, kv_v_head)
    const LAYOUTS: [(usize, usize, usize, usize, usize, usize); 4] = [
        (8, 4, 4, 12, 6, 6),
        (8, 8, 4, 12, 12, 6),
        (12, 6, 4, 18, 9, 6),
        (16, 8, 4, 16, 8, 4),
    ];
    let (d_qk, rq, kq, d_v, rv, kvv) = LAYOUTS[r.random_range(0..LAYOUTS.len())];
    let d_hidden = [6, 8, 12][r.random_range(0..3)];
    let mut cfg = LayerConfig {
        d_qk,
        d_v,
        rnn_qk_head: rq,
        rnn_v_head: rv,
        kv_qk_head: kq,
        kv_v_head: kvv,
        chunk: [1, 2, 3, 4, 8][r.random_range(0..5)],
        d_conv: r.random_range(1..=4),
        ..LayerConfig::small(d_hidden)
    };
    cfg.router.kind = [RouterKind::PredictionError, RouterKind::InputLinear, RouterKind::InputMlp][r.random_range(0..3)];
    cfg.router.aggregation = if r.random_bool(0.5) { Aggregation::Min } else { Aggregation::Max };
    cfg.threshold = ThresholdParam::for_kind(cfg.router.kind);
    cfg.rope_base = ROPE_BASE;
    cfg.validate().unwrap();
    cfg
}

pub fn random_input(r: &mut ChaCha8Rng, t: usize, d: usize, docs: usize) -> SequenceInput {
    let per = t.div_ceil(docs.max(1));
    SequenceInput {
        x: (0..t).map(|_| gauss(r, d)).collect(),
        doc_ids: (0..t).map(|i| (i / per) as i64 + 10).collect(),
        padding: vec![false; t],
    }
}

pub fn random_layer(seed: u64) -> (LayerConfig, LayerWeights, ChaCha8Rng) {
    let mut r = rng(seed);
    let cfg = random_config(&mut r);
    let w = init_weights(&cfg, seed).unwrap();
    (cfg, w, r)
}

/// Outputs at rows `≤ t` are bit-identical after rewriting every row `> t`.
pub fn causality_holds(seed: u64) -> bool {
    let (cfg, w, mut r) = random_layer(seed);
    let t_len = r.random_range(4..=20);
    let docs = r.random_range(1..=3);
    let input = random_input(&mut r, t_len, cfg.d_hidden, docs);
    let tau = r.random_range(0.0..cfg.router.kind.scale());
    let cut = r.random_range(0..t_len - 1);
    let mut perturbed = input.clone();
    for row in perturbed.x.iter_mut().skip(cut + 1) {
        *row = gauss(&mut r, cfg.d_hidden);
    }
    let a = forward(&input, &w, &cfg, tau, None).unwrap();
    let b = forward(&perturbed, &w, &cfg, tau, None).unwrap();
    a.outputs[..=cut] == b.outputs[..=cut] && a.decisions[..=cut] == b.decisions[..=cut]
}

/// Rewriting one document leaves another document's outputs bit-identical,
/// and running that document alone reproduces them within `1e-10`.
pub fn isolation_gap(seed: u64) -> Option<f64> {
    let (cfg, w, mut r) = random_layer(seed);
    let (la, lb) = (r.random_range(2..=10), r.random_range(2..=10));
    let mut input = random_input(&mut r, la + lb, cfg.d_hidden, 1);
    for (i, id) in input.doc_ids.iter_mut().enumerate() {
        *id = if i < la { 1 } else { 2 };
    }
    let tau = r.random_range(0.0..cfg.router.kind.scale());
    let base = forward(&input, &w, &cfg, tau, None).unwrap();
    let mut other = input.clone();
    for row in other.x.iter_mut().take(la) {
        *row = gauss(&mut r, cfg.d_hidden);
    }
    let changed = forward(&other, &w, &cfg, tau, None).unwrap();
    if base.outputs[la..] != changed.outputs[la..] {
        return None;
    }
    let alone = SequenceInput {
        x: input.x[la..].to_vec(),
        doc_ids: vec![2; lb],
        padding: vec![false; lb],
    };
    let solo = forward(&alone, &w, &cfg, tau, None).unwrap();
    let mut gap: f64 = 0.0;
    for (a, b) in base.outputs[la..].iter().zip(&solo.outputs) {
        gap = gap.max(ham_core::math::max_abs_diff(a, b));
    }
    Some(gap)
}

/// `|rope(q, m)·rope(k, n) − rope(q, m + s)·rope(k, n + s)|`.
pub fn rope_relative_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = 2 * r.random_range(1..=8);
    let (q, k) = (gauss(&mut r, d), gauss(&mut r, d));
    let (m, n, s) = (r.random_range(0..200), r.random_range(0..200), r.random_range(0..5000));
    let a = dot(&rope_apply(&q, m, ROPE_BASE).unwrap(), &rope_apply(&k, n, ROPE_BASE).unwrap());
    let b = dot(&rope_apply(&q, m + s, ROPE_BASE).unwrap(), &rope_apply(&k, n + s, ROPE_BASE).unwrap());
    (a - b).abs()
}

pub const EPS: f64 = COSINE_EPS;
