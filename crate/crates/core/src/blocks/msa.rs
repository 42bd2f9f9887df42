//! Masked self-attention restricted to the last `l` frames.
//!
//! Frame `t` attends to keys `max(0, t-l)..=t`: up to `l` past frames plus
//! itself. Streaming keeps the last `l` keys and values in a ring buffer.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{contract, shape_err, Result};
use crate::tensor::{cast, Float, Tensor};

/// Default window: 250 frames, 4 s at a 16 ms hop.
pub const DEFAULT_WINDOW: usize = 250;

/// Key/value ring buffer of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaState<T> {
    window: usize,
    heads: usize,
    width: usize,
    keys: Vec<T>,
    values: Vec<T>,
    start: usize,
    len: usize,
}

impl<T: Float> MsaState<T> {
    pub fn new(window: usize, heads: usize, width: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(contract(format!("width {} not divisible by {} heads", width, heads)));
        }
        Ok(MsaState {
            window,
            heads,
            width,
            keys: vec![T::zero(); window * width],
            values: vec![T::zero(); window * width],
            start: 0,
            len: 0,
        })
    }

    pub fn reset(&mut self) {
        self.start = 0;
        self.len = 0;
        self.keys.iter_mut().for_each(|v| *v = T::zero());
        self.values.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Buffered frames, at most `window`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Allocated scalars (keys plus values).
    pub fn capacity_scalars(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// Buffered key `i` in chronological order.
    pub fn key(&self, i: usize) -> &[T] {
        let slot = (self.start + i) % self.window;
        &self.keys[slot * self.width..(slot + 1) * self.width]
    }

    pub fn value(&self, i: usize) -> &[T] {
        let slot = (self.start + i) % self.window;
        &self.values[slot * self.width..(slot + 1) * self.width]
    }

    fn push(&mut self, k: &[T], v: &[T]) {
        if self.window == 0 {
            return;
        }
        let slot = if self.len < self.window {
            self.len += 1;
            (self.start + self.len - 1) % self.window
        } else {
            let s = self.start;
            self.start = (self.start + 1) % self.window;
            s
        };
        self.keys[slot * self.width..(slot + 1) * self.width].copy_from_slice(k);
        self.values[slot * self.width..(slot + 1) * self.width].copy_from_slice(v);
    }
}

/// Attends the current frame to the buffered frames and itself, then
/// appends `(k, v)` to the buffer, evicting the oldest entry when full.
pub fn msa_step<T: Float>(q: &[T], k: &[T], v: &[T], state: &mut MsaState<T>, out: &mut [T]) -> Result<()> {
    let w = state.width;
    if q.len() != w || k.len() != w || v.len() != w || out.len() != w {
        return Err(contract(format!(
            "msa_step expects vectors of {}, got q {} k {} v {} out {}",
            w,
            q.len(),
            k.len(),
            v.len(),
            out.len()
        )));
    }
    let d = w / state.heads;
    let scale: T = T::one() / cast::<T>(d as f64).sqrt();
    let n = state.len + 1;
    let mut p = vec![T::zero(); n];
    for h in 0..state.heads {
        let r = h * d..(h + 1) * d;
        let key = |i: usize| {
            if i < state.len {
                &state.key(i)[r.clone()]
            } else {
                &k[r.clone()]
            }
        };
        let val = |i: usize| {
            if i < state.len {
                &state.value(i)[r.clone()]
            } else {
                &v[r.clone()]
            }
        };
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = scale * dot(&q[r.clone()], key(i));
        }
        softmax_in_place(&mut p);
        let o = &mut out[r.clone()];
        o.iter_mut().for_each(|x| *x = T::zero());
        for (i, &pi) in p.iter().enumerate() {
            for (oj, &vj) in o.iter_mut().zip(val(i)) {
                *oj += pi * vj;
            }
        }
    }
    state.push(k, v);
    Ok(())
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn softmax_in_place<T: Float>(p: &mut [T]) {
    let m = p.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in p.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in p.iter_mut() {
        *v /= z;
    }
}

/// Windowed causal attention over `[.., T, D]` with `heads` heads.
pub fn msa_window<T: Float>(q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize, window: usize) -> Result<Var<T>> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(shape_err("msa", q.shape(), k.shape()));
    }
    let sh = q.shape().to_vec();
    if sh.len() < 2 {
        return Err(contract(format!("msa expects [.., T, D], got {:?}", sh)));
    }
    let (t, dm) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    if heads == 0 || dm % heads != 0 {
        return Err(contract(format!("msa: width {} not divisible by {} heads", dm, heads)));
    }
    let d = dm / heads;
    let seq = t * dm;
    let scale: T = T::one() / cast::<T>(d as f64).sqrt();
    let (qa, ka, va) = (q.value_arc(), k.value_arc(), v.value_arc());
    let mut out = vec![T::zero(); qa.numel()];
    // probabilities of frame ti over keys lo..=ti for head at column c
    let probs = move |qs: &[T], ks: &[T], ti: usize, c: usize, p: &mut Vec<T>| -> usize {
        let lo = ti.saturating_sub(window);
        p.clear();
        for s in lo..=ti {
            p.push(scale * dot(&qs[ti * dm + c..ti * dm + c + d], &ks[s * dm + c..s * dm + c + d]));
        }
        softmax_in_place(p);
        lo
    };
    if seq > 0 {
        out.par_chunks_mut(seq).enumerate().for_each(|(n, o)| {
            let r = n * seq..(n + 1) * seq;
            let (qs, ks, vs) = (&qa.data()[r.clone()], &ka.data()[r.clone()], &va.data()[r]);
            let mut p = Vec::with_capacity(window + 1);
            for h in 0..heads {
                let c = h * d;
                for ti in 0..t {
                    let lo = probs(qs, ks, ti, c, &mut p);
                    let orow = &mut o[ti * dm + c..ti * dm + c + d];
                    for (i, &pi) in p.iter().enumerate() {
                        let s = lo + i;
                        for (oj, &vj) in orow.iter_mut().zip(&vs[s * dm + c..s * dm + c + d]) {
                            *oj += pi * vj;
                        }
                    }
                }
            }
        });
    }
    let (iq, ik, iv) = (q.id(), k.id(), v.id());
    Ok(Var::custom(&[q, k, v], Tensor::new(sh, out)?, move |go, sink| {
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
                let mut p = Vec::with_capacity(window + 1);
                let mut dp = Vec::with_capacity(window + 1);
                for h in 0..heads {
                    let c = h * d;
                    for ti in 0..t {
                        let lo = probs(qs, ks, ti, c, &mut p);
                        let g = &gs[ti * dm + c..ti * dm + c + d];
                        dp.clear();
                        for (i, &pi) in p.iter().enumerate() {
                            let s = lo + i;
                            dp.push(dot(g, &vs[s * dm + c..s * dm + c + d]));
                            for (dvj, &gj) in dvs[s * dm + c..s * dm + c + d].iter_mut().zip(g) {
                                *dvj += pi * gj;
                            }
                        }
                        let mean: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                        for (i, (&pi, &dpi)) in p.iter().zip(&dp).enumerate() {
                            let ds = pi * (dpi - mean) * scale;
                            let s = lo + i;
                            for j in 0..d {
                                dqs[ti * dm + c + j] += ds * ks[s * dm + c + j];
                                dks[s * dm + c + j] += ds * qs[ti * dm + c + j];
                            }
                        }
                    }
                }
            });
        sink.add_owned(iq, dq);
        sink.add_owned(ik, dk);
        sink.add_owned(iv, dv);
    }))
}
