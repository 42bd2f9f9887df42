//! Retention: decayed linear attention with one `d x d` state per head.
//!
//! `S_t = γ S_{t-1} + k_t v_tᵀ`, `o_t = q_tᵀ S_t`. The recurrent form is used
//! for streaming and, as a fused op, for training. The parallel double-sum
//! form `o_t = Σ_{s≤t} γ^{t-s} (q_t·k_s) v_s` is an independent route with
//! its own backward.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{config, contract, shape_err, Result};
use crate::tensor::{cast, gemm_strided, Float, MatRef, Tensor};

/// Per-head decays `1 - 2^-4, 1 - 2^-5, 1 - 2^-9, 1 - 2^-10`.
pub const DEFAULT_GAMMAS: [f64; 4] = [
    1.0 - 1.0 / 16.0,
    1.0 - 1.0 / 32.0,
    1.0 - 1.0 / 512.0,
    1.0 - 1.0 / 1024.0,
];

pub fn check_gammas(gammas: &[f64]) -> Result<()> {
    if gammas.is_empty() {
        return Err(config("retention needs at least one head"));
    }
    for &g in gammas {
        if !(0.0..=1.0).contains(&g) {
            return Err(config(format!("retention decay {} outside [0, 1]", g)));
        }
    }
    Ok(())
}

/// Recurrent state of one sequence: `heads` matrices of `d x d`, row index
/// over key features and column index over value features.
#[derive(Clone, Debug, PartialEq)]
pub struct RetState<T> {
    heads: usize,
    head_dim: usize,
    gammas: Vec<T>,
    s: Vec<T>,
}

impl<T: Float> RetState<T> {
    pub fn new(head_dim: usize, gammas: &[f64]) -> Result<Self> {
        check_gammas(gammas)?;
        Ok(RetState {
            heads: gammas.len(),
            head_dim,
            gammas: gammas.iter().map(|&g| cast(g)).collect(),
            s: vec![T::zero(); gammas.len() * head_dim * head_dim],
        })
    }

    pub fn reset(&mut self) {
        self.s.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Number of stored scalars; independent of how many steps were taken.
    pub fn state_len(&self) -> usize {
        self.s.len()
    }

    pub fn head(&self, h: usize) -> &[T] {
        let dd = self.head_dim * self.head_dim;
        &self.s[h * dd..(h + 1) * dd]
    }

    /// Frobenius norm of head `h`'s state.
    pub fn norm(&self, h: usize) -> T {
        self.head(h).iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Applies one recurrence step to every head and writes `qᵀ S` per head.
pub fn retention_step<T: Float>(q: &[T], k: &[T], v: &[T], state: &mut RetState<T>, out: &mut [T]) -> Result<()> {
    let width = state.heads * state.head_dim;
    if q.len() != width || k.len() != width || v.len() != width || out.len() != width {
        return Err(contract(format!(
            "retention_step expects vectors of {} ({} heads x {}), got q {} k {} v {} out {}",
            width,
            state.heads,
            state.head_dim,
            q.len(),
            k.len(),
            v.len(),
            out.len()
        )));
    }
    let d = state.head_dim;
    for h in 0..state.heads {
        let r = h * d..(h + 1) * d;
        let s = &mut state.s[h * d * d..(h + 1) * d * d];
        step_head(
            &q[r.clone()],
            &k[r.clone()],
            &v[r.clone()],
            state.gammas[h],
            s,
            &mut out[r],
        );
    }
    Ok(())
}

#[inline]
fn step_head<T: Float>(q: &[T], k: &[T], v: &[T], gamma: T, s: &mut [T], o: &mut [T]) {
    let d = q.len();
    o.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..d {
        let row = &mut s[i * d..(i + 1) * d];
        let (ki, qi) = (k[i], q[i]);
        for ((sv, &vj), oj) in row.iter_mut().zip(v).zip(o.iter_mut()) {
            *sv = gamma * *sv + ki * vj;
            *oj += qi * *sv;
        }
    }
}

/// Single-head parallel form over a whole sequence, `q, k, v: [T, d]`.
pub fn retention_parallel<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    check_gammas(&[gamma])?;
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(shape_err("retention_parallel", q.shape(), k.shape()));
    }
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let mut out = vec![T::zero(); t * d];
    parallel_seq(q.data(), k.data(), v.data(), t, d, d, &[cast(gamma)], &mut out);
    Tensor::new(vec![t, d], out)
}

fn check_qkv<T: Float>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(shape_err(op, q.shape(), k.shape()));
    }
    let sh = q.shape();
    if sh.len() < 2 {
        return Err(contract(format!("{} expects [.., T, D], got {:?}", op, sh)));
    }
    let (t, dm) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    if heads == 0 || dm % heads != 0 {
        return Err(contract(format!(
            "{}: width {} not divisible by {} heads",
            op, dm, heads
        )));
    }
    Ok((q.value().numel() / (t * dm).max(1), t, dm))
}

fn gammas_t<T: Float>(gammas: &[f64]) -> Result<Vec<T>> {
    check_gammas(gammas)?;
    Ok(gammas.iter().map(|&g| cast(g)).collect())
}

/// Multi-head recurrent retention over `[.., T, D]` inputs; one head per
/// entry of `gammas`.
pub fn retention_recurrent<T: Float>(q: &Var<T>, k: &Var<T>, v: &Var<T>, gammas: &[f64]) -> Result<Var<T>> {
    let g = gammas_t::<T>(gammas)?;
    let heads = g.len();
    let (_, t, dm) = check_qkv(q, k, v, heads, "retention_recurrent")?;
    let d = dm / heads;
    let seq = t * dm;
    let (qa, ka, va) = (q.value_arc(), k.value_arc(), v.value_arc());
    let mut out = vec![T::zero(); qa.numel()];
    if seq > 0 {
        out.par_chunks_mut(seq).enumerate().for_each(|(n, o)| {
            let r = n * seq..(n + 1) * seq;
            let (qs, ks, vs) = (&qa.data()[r.clone()], &ka.data()[r.clone()], &va.data()[r]);
            let mut s = vec![T::zero(); d * d];
            for (h, &gh) in g.iter().enumerate() {
                s.iter_mut().for_each(|x| *x = T::zero());
                for ti in 0..t {
                    let c = ti * dm + h * d..ti * dm + (h + 1) * d;
                    step_head(&qs[c.clone()], &ks[c.clone()], &vs[c.clone()], gh, &mut s, &mut o[c]);
                }
            }
        });
    }
    let (iq, ik, iv) = (q.id(), k.id(), v.id());
    Ok(Var::custom(
        &[q, k, v],
        Tensor::new(q.shape().to_vec(), out)?,
        move |go, sink| {
            if seq == 0 {
                return;
            }
            let n = qa.numel();
            let mut dq = vec![T::zero(); n];
            let mut dk = vec![T::zero(); n];
            let mut dv = vec![T::zero(); n];
            dq.par_chunks_mut(seq)
                .zip(dk.par_chunks_mut(seq).zip(dv.par_chunks_mut(seq)))
                .enumerate()
                .for_each(|(ni, (dqs, (dks, dvs)))| {
                    let r = ni * seq..(ni + 1) * seq;
                    let (qs, ks, vs, gs) = (
                        &qa.data()[r.clone()],
                        &ka.data()[r.clone()],
                        &va.data()[r.clone()],
                        &go[r],
                    );
                    let mut s = vec![T::zero(); d * d];
                    for (h, &gh) in g.iter().enumerate() {
                        // dq_t = S_t dO_t, replaying the forward recurrence
                        s.iter_mut().for_each(|x| *x = T::zero());
                        for ti in 0..t {
                            let c = ti * dm + h * d;
                            for i in 0..d {
                                let row = &mut s[i * d..(i + 1) * d];
                                let ki = ks[c + i];
                                let mut acc = T::zero();
                                for j in 0..d {
                                    row[j] = gh * row[j] + ki * vs[c + j];
                                    acc += row[j] * gs[c + j];
                                }
                                dqs[c + i] = acc;
                            }
                        }
                        // G_t = q_t dO_tᵀ + γ G_{t+1}; dk_t = G_t v_t, dv_t = G_tᵀ k_t
                        s.iter_mut().for_each(|x| *x = T::zero());
                        for ti in (0..t).rev() {
                            let c = ti * dm + h * d;
                            for j in 0..d {
                                dvs[c + j] = T::zero();
                            }
                            for i in 0..d {
                                let row = &mut s[i * d..(i + 1) * d];
                                let (qi, ki) = (qs[c + i], ks[c + i]);
                                let mut acc = T::zero();
                                for j in 0..d {
                                    row[j] = gh * row[j] + qi * gs[c + j];
                                    acc += row[j] * vs[c + j];
                                    dvs[c + j] += row[j] * ki;
                                }
                                dks[c + i] = acc;
                            }
                        }
                    }
                });
            sink.add_owned(iq, dq);
            sink.add_owned(ik, dk);
            sink.add_owned(iv, dv);
        },
    ))
}

/// Columns `off..off+d` of a `[t, dm]` row-major sequence.
fn head_view<T>(x: &[T], off: usize, t: usize, d: usize, dm: usize) -> MatRef<'_, T> {
    MatRef::strided(&x[off..], t, d, dm as isize, 1)
}

fn decay_table<T: Float>(gamma: T, t: usize) -> Vec<T> {
    let mut p = vec![T::one(); t.max(1)];
    for i in 1..t {
        p[i] = p[i - 1] * gamma;
    }
    p
}

/// Decay-masked score matrix `A[t, s] = γ^{t-s} (q_t·k_s)` for `s ≤ t`.
fn masked_scores<T: Float>(q: &[T], k: &[T], t: usize, d: usize, rs: usize, decay: &[T], a: &mut [T]) {
    gemm_strided(
        T::one(),
        MatRef::strided(q, t, d, rs as isize, 1),
        MatRef::strided(k, t, d, rs as isize, 1).t(),
        T::zero(),
        a,
        t,
        1,
    );
    for i in 0..t {
        for j in 0..t {
            let w = if j <= i { decay[i - j] } else { T::zero() };
            a[i * t + j] *= w;
        }
    }
}

/// Parallel form for one sequence with all heads; rows of `q, k, v, out`
/// have stride `rs`.
#[allow(clippy::too_many_arguments)]
fn parallel_seq<T: Float>(q: &[T], k: &[T], v: &[T], t: usize, d: usize, rs: usize, gammas: &[T], out: &mut [T]) {
    if t == 0 {
        return;
    }
    let mut a = vec![T::zero(); t * t];
    for (h, &gh) in gammas.iter().enumerate() {
        let decay = decay_table(gh, t);
        let off = h * d;
        masked_scores(&q[off..], &k[off..], t, d, rs, &decay, &mut a);
        gemm_strided(
            T::one(),
            MatRef::new(&a, t, t),
            MatRef::strided(&v[off..], t, d, rs as isize, 1),
            T::zero(),
            &mut out[off..],
            rs,
            1,
        );
    }
}

/// Multi-head parallel retention over `[.., T, D]`, `O(T²)` per sequence.
pub fn retention_parallel_var<T: Float>(q: &Var<T>, k: &Var<T>, v: &Var<T>, gammas: &[f64]) -> Result<Var<T>> {
    let g = gammas_t::<T>(gammas)?;
    let heads = g.len();
    let (_, t, dm) = check_qkv(q, k, v, heads, "retention_parallel")?;
    let d = dm / heads;
    let seq = t * dm;
    let (qa, ka, va) = (q.value_arc(), k.value_arc(), v.value_arc());
    let mut out = vec![T::zero(); qa.numel()];
    if seq > 0 {
        out.par_chunks_mut(seq).enumerate().for_each(|(n, o)| {
            let r = n * seq..(n + 1) * seq;
            parallel_seq(
                &qa.data()[r.clone()],
                &ka.data()[r.clone()],
                &va.data()[r],
                t,
                d,
                dm,
                &g,
                o,
            );
        });
    }
    let (iq, ik, iv) = (q.id(), k.id(), v.id());
    Ok(Var::custom(
        &[q, k, v],
        Tensor::new(q.shape().to_vec(), out)?,
        move |go, sink| {
            if seq == 0 {
                return;
            }
            let n = qa.numel();
            let mut dq = vec![T::zero(); n];
            let mut dk = vec![T::zero(); n];
            let mut dv = vec![T::zero(); n];
            dq.par_chunks_mut(seq)
                .zip(dk.par_chunks_mut(seq).zip(dv.par_chunks_mut(seq)))
                .enumerate()
                .for_each(|(ni, (dqs, (dks, dvs)))| {
                    let r = ni * seq..(ni + 1) * seq;
                    let (qs, ks, vs, gs) = (
                        &qa.data()[r.clone()],
                        &ka.data()[r.clone()],
                        &va.data()[r.clone()],
                        &go[r],
                    );
                    let mut a = vec![T::zero(); t * t];
                    let mut da = vec![T::zero(); t * t];
                    for (h, &gh) in g.iter().enumerate() {
                        let decay = decay_table(gh, t);
                        let off = h * d;
                        masked_scores(&qs[off..], &ks[off..], t, d, dm, &decay, &mut a);
                        // dV = Aᵀ dO
                        gemm_strided(
                            T::one(),
                            MatRef::new(&a, t, t).t(),
                            head_view(gs, off, t, d, dm),
                            T::zero(),
                            &mut dvs[off..],
                            dm,
                            1,
                        );
                        // dA = (dO Vᵀ) masked by the decay
                        gemm_strided(
                            T::one(),
                            head_view(gs, off, t, d, dm),
                            head_view(vs, off, t, d, dm).t(),
                            T::zero(),
                            &mut da,
                            t,
                            1,
                        );
                        for i in 0..t {
                            for j in 0..t {
                                let w = if j <= i { decay[i - j] } else { T::zero() };
                                da[i * t + j] *= w;
                            }
                        }
                        gemm_strided(
                            T::one(),
                            MatRef::new(&da, t, t),
                            head_view(ks, off, t, d, dm),
                            T::zero(),
                            &mut dqs[off..],
                            dm,
                            1,
                        );
                        gemm_strided(
                            T::one(),
                            MatRef::new(&da, t, t).t(),
                            head_view(qs, off, t, d, dm),
                            T::zero(),
                            &mut dks[off..],
                            dm,
                            1,
                        );
                    }
                });
            sink.add_owned(iq, dq);
            sink.add_owned(ik, dk);
            sink.add_owned(iv, dv);
        },
    ))
}
