//! Matrix-valued associative memory: linear attention, the delta rule and the
//! gated delta rule, plus sequential and chunk-parallel drivers.
//!
//! A head state is stored as a `d_k × d_v` matrix `M` so that a query reads
//! out `Σ_i (q·k_i) v_i = Mᵀq` as a plain row-vector product `q · M`. The
//! gated delta rule in this orientation is
//!
//! ```text
//! M' = α (I − β k kᵀ) M + β k vᵀ
//!    = α M + k δᵀ,   δ = β (v − α Mᵀk)
//! ```
//!
//! and the routing score of step `t` is the cosine distance between the
//! state's prediction `M_{t−1}ᵀ k_t` and the true value `v_t`, taken before
//! the step-`t` write.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, HamError, Result};
use crate::math::{cosine_distance, dot, softplus, sigmoid, Matrix, COSINE_EPS};

/// One head's associative state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    mat: Matrix,
}

impl HeadState {
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self {
            mat: Matrix::zeros(d_k, d_v),
        }
    }

    pub fn from_matrix(mat: Matrix) -> Self {
        Self { mat }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn d_k(&self) -> usize {
        self.mat.rows()
    }

    pub fn d_v(&self) -> usize {
        self.mat.cols()
    }

    fn check_kv(&self, k: &[f64], v: &[f64]) -> Result<()> {
        check_len("state key", self.d_k(), k.len())?;
        check_len("state value", self.d_v(), v.len())
    }
}

/// Decay gate `alpha` and write strength `beta` of one head at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScalars {
    pub alpha: f64,
    pub beta: f64,
}

impl StepScalars {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }
}

/// Projections producing per-head `alpha` and `beta` from the layer input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarParams {
    /// `d_hidden × heads`
    pub a_proj: Matrix,
    /// `d_hidden × heads`
    pub b_proj: Matrix,
    pub a_log: Vec<f64>,
    pub dt_bias: Vec<f64>,
}

impl ScalarParams {
    pub fn zeros(d_hidden: usize, heads: usize) -> Self {
        Self {
            a_proj: Matrix::zeros(d_hidden, heads),
            b_proj: Matrix::zeros(d_hidden, heads),
            a_log: vec![0.0; heads],
            dt_bias: vec![0.0; heads],
        }
    }

    pub fn heads(&self) -> usize {
        self.a_log.len()
    }

    pub fn param_count(&self) -> usize {
        self.a_proj.as_slice().len()
            + self.b_proj.as_slice().len()
            + self.a_log.len()
            + self.dt_bias.len()
    }
}

/// `β_h = σ(x·b_h)`, `α_h = exp(−exp(A_log_h) · softplus(x·a_h + dt_bias_h))`.
pub fn gdn_scalars(x: &[f64], params: &ScalarParams) -> Result<Vec<StepScalars>> {
    let a = params.a_proj.left_mul(x)?;
    let b = params.b_proj.left_mul(x)?;
    check_len("A_log", a.len(), params.a_log.len())?;
    check_len("dt_bias", a.len(), params.dt_bias.len())?;
    Ok((0..a.len())
        .map(|h| {
            let decay = params.a_log[h].exp() * softplus(a[h] + params.dt_bias[h]);
            StepScalars::new((-decay).exp(), sigmoid(b[h]))
        })
        .collect())
}

/// Linear-attention write `M' = M + k vᵀ`.
pub fn la_update(state: &HeadState, k: &[f64], v: &[f64]) -> Result<HeadState> {
    state.check_kv(k, v)?;
    let mut mat = state.mat.clone();
    for (i, &ki) in k.iter().enumerate() {
        for (m, &vj) in mat.row_mut(i).iter_mut().zip(v) {
            *m += ki * vj;
        }
    }
    Ok(HeadState { mat })
}

/// `Mᵀq = Σ_i (q·k_i) v_i`.
pub fn readout(state: &HeadState, q: &[f64]) -> Result<Vec<f64>> {
    state.mat.left_mul(q)
}

/// One gradient step of size `beta` on `½‖Mᵀk − v‖²`.
pub fn delta_update(state: &HeadState, k: &[f64], v: &[f64], beta: f64) -> Result<HeadState> {
    gdn_update(state, k, v, StepScalars::new(1.0, beta))
}

/// Gated delta rule `M' = α M + k δᵀ`, `δ = β (v − α Mᵀk)`.
pub fn gdn_update(state: &HeadState, k: &[f64], v: &[f64], s: StepScalars) -> Result<HeadState> {
    state.check_kv(k, v)?;
    let pred = state.mat.left_mul(k)?;
    let delta: Vec<f64> = v
        .iter()
        .zip(&pred)
        .map(|(vj, pj)| s.beta * (vj - s.alpha * pj))
        .collect();
    let mut mat = state.mat.clone();
    for (i, &ki) in k.iter().enumerate() {
        for (m, &dj) in mat.row_mut(i).iter_mut().zip(&delta) {
            *m = s.alpha * *m + ki * dj;
        }
    }
    Ok(HeadState { mat })
}

/// Cosine distance between the state's prediction for `k` and the true `v`.
pub fn prediction_error(state: &HeadState, k: &[f64], v: &[f64]) -> Result<f64> {
    state.check_kv(k, v)?;
    let pred = state.mat.left_mul(k)?;
    Ok(cosine_distance(&pred, v, COSINE_EPS))
}

/// Inputs of one head over `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs {
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub scalars: Vec<StepScalars>,
}

impl HeadInputs {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn validate(&self, state: &HeadState) -> Result<()> {
        let t = self.keys.len();
        check_len("values per step", t, self.values.len())?;
        check_len("queries per step", t, self.queries.len())?;
        check_len("scalars per step", t, self.scalars.len())?;
        for step in 0..t {
            check_len("query", state.d_k(), self.queries[step].len())?;
            state.check_kv(&self.keys[step], &self.values[step])?;
        }
        Ok(())
    }
}

/// Per-step outputs and routing scores of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRun {
    pub outputs: Vec<Vec<f64>>,
    /// Cosine prediction error of each step, computed from the previous state.
    pub errors: Vec<f64>,
    pub final_state: HeadState,
}

/// Step-by-step recurrence: score from `M_{t−1}`, then write, then read.
pub fn run_sequential(inputs: &HeadInputs, initial: &HeadState) -> Result<HeadRun> {
    inputs.validate(initial)?;
    let mut state = initial.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut errors = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let (k, v) = (&inputs.keys[t], &inputs.values[t]);
        errors.push(prediction_error(&state, k, v)?);
        state = gdn_update(&state, k, v, inputs.scalars[t])?;
        outputs.push(readout(&state, &inputs.queries[t])?);
    }
    Ok(HeadRun {
        outputs,
        errors,
        final_state: state,
    })
}

/// Chunk-parallel form of [`run_sequential`].
///
/// Within each chunk the delta-rule writes are collected in WY form: with
/// cumulative decays `γ_r` and `A[r][j] = β_r (γ_r/γ_j) (k_r·k_j)` for `j < r`,
/// the write vectors solve `(I + A) Δ = diag(β) V − diag(βγ) K M₀`, i.e.
/// `Δ = u − w M₀` with `u = (I+A)⁻¹ diag(β) V` and `w = (I+A)⁻¹ diag(βγ) K`.
/// Outputs, prediction errors and the carried state then follow from `M₀`
/// and `Δ` with intra-chunk causal masks. `chunk == 1` degenerates to the
/// sequential kernel.
pub fn run_chunked(inputs: &HeadInputs, initial: &HeadState, chunk: usize) -> Result<HeadRun> {
    if chunk == 0 {
        return Err(HamError::Config("chunk size must be ≥ 1".into()));
    }
    inputs.validate(initial)?;
    if chunk == 1 {
        return run_sequential(inputs, initial);
    }
    let t_total = inputs.len();
    let mut state = initial.clone();
    let mut outputs = Vec::with_capacity(t_total);
    let mut errors = Vec::with_capacity(t_total);
    let mut start = 0;
    while start < t_total {
        let end = (start + chunk).min(t_total);
        let (outs, errs, next) = chunk_pass(inputs, start, end, &state)?;
        outputs.extend(outs);
        errors.extend(errs);
        state = next;
        start = end;
    }
    Ok(HeadRun {
        outputs,
        errors,
        final_state: state,
    })
}

type ChunkResult = (Vec<Vec<f64>>, Vec<f64>, HeadState);

fn chunk_pass(inputs: &HeadInputs, start: usize, end: usize, m0: &HeadState) -> Result<ChunkResult> {
    let c = end - start;
    let d_k = m0.d_k();
    let d_v = m0.d_v();
    let keys = &inputs.keys[start..end];
    let values = &inputs.values[start..end];
    let queries = &inputs.queries[start..end];
    let alpha: Vec<f64> = inputs.scalars[start..end].iter().map(|s| s.alpha).collect();
    let beta: Vec<f64> = inputs.scalars[start..end].iter().map(|s| s.beta).collect();

    // decay[r][j] = Π_{i=j+1..=r} α_i for j ≤ r (1 on the diagonal); gamma[r] = Π_{i≤r} α_i
    let mut decay = vec![vec![0.0; c]; c];
    let mut gamma = vec![0.0; c];
    for r in 0..c {
        let mut acc = 1.0;
        for j in (0..=r).rev() {
            decay[r][j] = acc;
            acc *= alpha[j];
        }
        gamma[r] = acc;
    }

    let kk: Vec<Vec<f64>> = (0..c)
        .map(|r| (0..c).map(|j| dot(&keys[r], &keys[j])).collect())
        .collect();

    // Unit lower-triangular inverse of (I + A) by forward substitution.
    let mut tinv = vec![vec![0.0; c]; c];
    for r in 0..c {
        tinv[r][r] = 1.0;
        for j in 0..r {
            let mut acc = 0.0;
            for (i, row) in tinv.iter().enumerate().take(r).skip(j) {
                acc += beta[r] * decay[r][i] * kk[r][i] * row[j];
            }
            tinv[r][j] = -acc;
        }
    }

    // u = T diag(β) V,  w = T diag(βγ) K
    let mut u = vec![vec![0.0; d_v]; c];
    let mut w = vec![vec![0.0; d_k]; c];
    for r in 0..c {
        for j in 0..=r {
            let t = tinv[r][j];
            if t == 0.0 {
                continue;
            }
            let bv = t * beta[j];
            let bk = t * beta[j] * gamma[j];
            for (ur, vj) in u[r].iter_mut().zip(&values[j]) {
                *ur += bv * vj;
            }
            for (wr, kj) in w[r].iter_mut().zip(&keys[j]) {
                *wr += bk * kj;
            }
        }
    }

    // Δ = u − w M₀
    let delta: Vec<Vec<f64>> = (0..c)
        .map(|r| {
            let wm = m0.mat.left_mul(&w[r])?;
            Ok(u[r].iter().zip(&wm).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;

    let mut outs = Vec::with_capacity(c);
    let mut errs = Vec::with_capacity(c);
    for r in 0..c {
        // prediction M_{r−1}ᵀ k_r
        let prev_gamma = if r == 0 { 1.0 } else { gamma[r - 1] };
        let mut pred: Vec<f64> = m0.mat.left_mul(&keys[r])?.iter().map(|x| prev_gamma * x).collect();
        for j in 0..r {
            let coef = decay[r - 1][j] * kk[r][j];
            for (p, dj) in pred.iter_mut().zip(&delta[j]) {
                *p += coef * dj;
            }
        }
        errs.push(cosine_distance(&pred, &values[r], COSINE_EPS));

        let mut o: Vec<f64> = m0.mat.left_mul(&queries[r])?.iter().map(|x| gamma[r] * x).collect();
        for j in 0..=r {
            let coef = decay[r][j] * dot(&queries[r], &keys[j]);
            for (oi, dj) in o.iter_mut().zip(&delta[j]) {
                *oi += coef * dj;
            }
        }
        outs.push(o);
    }

    let last = c - 1;
    let mut mat = m0.mat.clone();
    mat.scale(gamma[last]);
    for j in 0..c {
        let coef = decay[last][j];
        for (i, &ki) in keys[j].iter().enumerate() {
            let scaled = coef * ki;
            for (m, dj) in mat.row_mut(i).iter_mut().zip(&delta[j]) {
                *m += scaled * dj;
            }
        }
    }
    Ok((outs, errs, HeadState { mat }))
}

/// Splits the linear-attention readout for `q` into the term carried by pair
/// `j` and the cross-talk from every other stored pair.
pub fn interference_decompose(
    pairs: &[(Vec<f64>, Vec<f64>)],
    q: &[f64],
    j: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if j >= pairs.len() {
        return Err(HamError::IndexOutOfRange {
            index: j,
            len: pairs.len(),
        });
    }
    let d_v = pairs[j].1.len();
    let signal: Vec<f64> = pairs[j].1.iter().map(|v| dot(q, &pairs[j].0) * v).collect();
    let mut noise = vec![0.0; d_v];
    for (i, (k, v)) in pairs.iter().enumerate() {
        if i == j {
            continue;
        }
        check_len("interference key", q.len(), k.len())?;
        check_len("interference value", d_v, v.len())?;
        let w = dot(q, k);
        for (n, vi) in noise.iter_mut().zip(v) {
            *n += w * vi;
        }
    }
    Ok((signal, noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{l2_normalize, max_abs_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rstate(rng: &mut ChaCha8Rng, dk: usize, dv: usize) -> HeadState {
        HeadState::from_matrix(Matrix::from_fn(dk, dv, |_, _| rng.random_range(-1.0..1.0)))
    }

    // independent dense oracle: S is d_v × d_k (column-vector orientation), S' = α S (I − β k kᵀ) + β v kᵀ
    fn oracle_gdn(m: &Matrix, k: &[f64], v: &[f64], alpha: f64, beta: f64) -> Matrix {
        let (dk, dv) = m.shape();
        let s = Matrix::from_fn(dv, dk, |r, c| m.get(c, r));
        let proj = Matrix::from_fn(dk, dk, |r, c| f64::from(u8::from(r == c)) - beta * k[r] * k[c]);
        let mut next = Matrix::zeros(dv, dk);
        for r in 0..dv {
            for c in 0..dk {
                let mut acc = 0.0;
                for i in 0..dk {
                    acc += s.get(r, i) * proj.get(i, c);
                }
                next.set(r, c, alpha * acc + beta * v[r] * k[c]);
            }
        }
        Matrix::from_fn(dk, dv, |r, c| next.get(c, r))
    }

    #[test]
    fn la_single_pair_recall() {
        let k = l2_normalize(&[1.0, 2.0, -1.0]);
        let v = vec![0.5, -3.0];
        let s = la_update(&HeadState::zeros(3, 2), &k, &v).unwrap();
        let out = readout(&s, &k).unwrap();
        assert!(max_abs_diff(&out, &v) < 1e-15);
    }

    #[test]
    fn la_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..3).map(|_| (rvec(&mut rng, 2), rvec(&mut rng, 2))).collect();
        let mut s = HeadState::zeros(2, 2);
        for (k, v) in &pairs {
            s = la_update(&s, k, v).unwrap();
        }
        let q = rvec(&mut rng, 2);
        let mut brute = vec![0.0; 2];
        for (k, v) in &pairs {
            let w = dot(&q, k);
            brute[0] += w * v[0];
            brute[1] += w * v[1];
        }
        assert!(max_abs_diff(&readout(&s, &q).unwrap(), &brute) < 1e-12);
    }

    #[test]
    fn readout_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(readout(&HeadState::zeros(3, 2), &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 2]);
        let s = rstate(&mut rng, 3, 2);
        assert_eq!(readout(&s, &[0.0; 3]).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn readout_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = rstate(&mut rng, 4, 3);
        let q = rvec(&mut rng, 4);
        let expected: Vec<f64> = (0..3)
            .map(|c| (0..4).map(|r| s.matrix().get(r, c) * q[r]).sum())
            .collect();
        assert!(max_abs_diff(&readout(&s, &q).unwrap(), &expected) < 1e-12);
    }

    #[test]
    fn readout_dimension_mismatch() {
        assert!(readout(&HeadState::zeros(3, 2), &[1.0]).is_err());
    }

    #[test]
    fn delta_beta_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = rstate(&mut rng, 3, 3);
        let out = delta_update(&s, &rvec(&mut rng, 3), &rvec(&mut rng, 3), 0.0).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn delta_fixed_point() {
        // the eps guard floors the distance at about eps/|v|^2, so use |v|^2 = 500
        let k = l2_normalize(&[0.3, -0.4, 1.2]);
        let v = vec![10.0, -20.0];
        let s1 = delta_update(&HeadState::zeros(3, 2), &k, &v, 1.0).unwrap();
        let s2 = delta_update(&s1, &k, &v, 1.0).unwrap();
        assert!(s1.matrix().max_abs_diff(s2.matrix()) < 1e-15);
        assert!(prediction_error(&s1, &k, &v).unwrap() < 1e-10);
    }

    #[test]
    fn gdn_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = rstate(&mut rng, 4, 3);
        let k = l2_normalize(&rvec(&mut rng, 4));
        let v = rvec(&mut rng, 3);
        assert_eq!(
            gdn_update(&s, &k, &v, StepScalars::new(1.0, 0.4)).unwrap(),
            delta_update(&s, &k, &v, 0.4).unwrap()
        );
        let reset = gdn_update(&s, &k, &v, StepScalars::new(0.0, 1.0)).unwrap();
        let stored = la_update(&HeadState::zeros(4, 3), &k, &v).unwrap();
        assert!(reset.matrix().max_abs_diff(stored.matrix()) < 1e-15);
    }

    #[test]
    fn gdn_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let s = rstate(&mut rng, 5, 4);
            let k = rvec(&mut rng, 5);
            let v = rvec(&mut rng, 4);
            let (a, b) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
            let got = gdn_update(&s, &k, &v, StepScalars::new(a, b)).unwrap();
            let want = oracle_gdn(s.matrix(), &k, &v, a, b);
            assert!(got.matrix().max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn scalars_hand_values() {
        let mut p = ScalarParams::zeros(3, 2);
        let x = [0.4, -1.0, 2.0];
        let s = gdn_scalars(&x, &p).unwrap();
        assert_eq!(s[0].beta, 0.5);
        assert!((s[0].alpha - 0.5).abs() < 1e-15);
        p.dt_bias = vec![-60.0, -60.0];
        let s = gdn_scalars(&x, &p).unwrap();
        assert!(s[1].alpha >= 1.0 - 1e-20);
    }

    #[test]
    fn prediction_error_cases() {
        let k = [1.0, 0.0];
        let v = [0.5, 0.5];
        assert_eq!(prediction_error(&HeadState::zeros(2, 2), &k, &v).unwrap(), 1.0);
        let s = la_update(&HeadState::zeros(2, 2), &k, &v).unwrap();
        let floor = COSINE_EPS / dot(&v, &v);
        assert!((prediction_error(&s, &k, &v).unwrap() - floor).abs() < 1e-14);
    }

    fn random_inputs(rng: &mut ChaCha8Rng, t: usize, dk: usize, dv: usize) -> HeadInputs {
        HeadInputs {
            queries: (0..t).map(|_| l2_normalize(&rvec(rng, dk))).collect(),
            keys: (0..t).map(|_| l2_normalize(&rvec(rng, dk))).collect(),
            values: (0..t).map(|_| rvec(rng, dv)).collect(),
            scalars: (0..t)
                .map(|_| StepScalars::new(rng.random_range(0.05..0.999), rng.random_range(0.01..0.99)))
                .collect(),
        }
    }

    #[test]
    fn sequential_single_step() {
        let k = l2_normalize(&[1.0, 1.0]);
        let q = [0.3, 0.9];
        let v = vec![2.0, -1.0];
        let inputs = HeadInputs {
            queries: vec![q.to_vec()],
            keys: vec![k.clone()],
            values: vec![v.clone()],
            scalars: vec![StepScalars::new(0.7, 0.25)],
        };
        let run = run_sequential(&inputs, &HeadState::zeros(2, 2)).unwrap();
        assert_eq!(run.errors, vec![1.0]);
        let w = 0.25 * dot(&q, &k);
        assert!(max_abs_diff(&run.outputs[0], &[w * 2.0, -w]) < 1e-15);
    }

    #[test]
    fn sequential_repeated_pair_converges() {
        let k = l2_normalize(&[0.2, 0.9, -0.3]);
        let v = vec![10.0, -25.0];
        let t = 5;
        let inputs = HeadInputs {
            queries: vec![k.clone(); t],
            keys: vec![k.clone(); t],
            values: vec![v.clone(); t],
            scalars: vec![StepScalars::new(1.0, 1.0); t],
        };
        let run = run_sequential(&inputs, &HeadState::zeros(3, 2)).unwrap();
        for e in &run.errors[1..] {
            assert!(*e < 1e-10);
        }
    }

    #[test]
    fn sequential_is_composition_of_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = random_inputs(&mut rng, 6, 4, 3);
        let s0 = rstate(&mut rng, 4, 3);
        let run = run_sequential(&inputs, &s0).unwrap();
        let mut s = s0;
        for t in 0..6 {
            assert_eq!(run.errors[t], prediction_error(&s, &inputs.keys[t], &inputs.values[t]).unwrap());
            s = gdn_update(&s, &inputs.keys[t], &inputs.values[t], inputs.scalars[t]).unwrap();
            assert_eq!(run.outputs[t], readout(&s, &inputs.queries[t]).unwrap());
        }
        assert_eq!(run.final_state, s);
    }

    #[test]
    fn chunked_c1_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = random_inputs(&mut rng, 9, 4, 3);
        let s0 = rstate(&mut rng, 4, 3);
        assert_eq!(run_chunked(&inputs, &s0, 1).unwrap(), run_sequential(&inputs, &s0).unwrap());
    }

    fn assert_runs_close(a: &HeadRun, b: &HeadRun, tol: f64) {
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            assert!(max_abs_diff(x, y) < tol);
        }
        assert!(max_abs_diff(&a.errors, &b.errors) < tol);
        assert!(a.final_state.matrix().max_abs_diff(b.final_state.matrix()) < tol);
    }

    #[test]
    fn chunked_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (t, c) in [(8, 4), (8, 8), (8, 20), (13, 4), (7, 3)] {
            let inputs = random_inputs(&mut rng, t, 4, 3);
            let s0 = rstate(&mut rng, 4, 3);
            let seq = run_sequential(&inputs, &s0).unwrap();
            let chk = run_chunked(&inputs, &s0, c).unwrap();
            assert_runs_close(&seq, &chk, 1e-10);
        }
    }

    #[test]
    fn chunk_zero_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = random_inputs(&mut rng, 3, 2, 2);
        assert!(run_chunked(&inputs, &HeadState::zeros(2, 2), 0).is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut inputs = random_inputs(&mut rng, 3, 2, 2);
        inputs.values.pop();
        assert!(run_sequential(&inputs, &HeadState::zeros(2, 2)).is_err());
    }

    #[test]
    fn interference_cases() {
        let pairs = vec![(vec![1.0, 0.0], vec![3.0, 4.0])];
        let (sig, noise) = interference_decompose(&pairs, &[1.0, 0.0], 0).unwrap();
        assert_eq!(sig, vec![3.0, 4.0]);
        assert_eq!(noise, vec![0.0, 0.0]);

        let pairs = vec![
            (vec![1.0, 0.0], vec![3.0, 4.0]),
            (vec![0.0, 1.0], vec![-1.0, 2.0]),
        ];
        let (sig, noise) = interference_decompose(&pairs, &[0.0, 1.0], 1).unwrap();
        assert_eq!(sig, vec![-1.0, 2.0]);
        assert_eq!(noise, vec![0.0, 0.0]);
        assert!(interference_decompose(&pairs, &[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn interference_sums_to_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pairs: Vec<_> = (0..7).map(|_| (rvec(&mut rng, 5), rvec(&mut rng, 3))).collect();
        let mut s = HeadState::zeros(5, 3);
        for (k, v) in &pairs {
            s = la_update(&s, k, v).unwrap();
        }
        let q = rvec(&mut rng, 5);
        for j in 0..pairs.len() {
            let (sig, noise) = interference_decompose(&pairs, &q, j).unwrap();
            let sum: Vec<f64> = sig.iter().zip(&noise).map(|(a, b)| a + b).collect();
            assert!(max_abs_diff(&sum, &readout(&s, &q).unwrap()) < 1e-12);
        }
    }
}
