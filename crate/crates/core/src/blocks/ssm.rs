//! Selective state-space recurrence with zero-order-hold discretization.
//!
//! For each inner channel `e` and state index `n`, with `z = Δ A[e, n]`:
//! `Ā = exp(z)`, `B̄ = (exp(z) - 1) / A · B = Δ φ(z) B` where
//! `φ(z) = (e^z - 1) / z`, `φ(0) = 1`. The state update is
//! `s ← Ā s + B̄ x` and the output is `y = C·s`.

use rayon::prelude::*;

use super::ConvTail;
use crate::autodiff::Var;
use crate::error::{contract, shape_err, Result};
use crate::tensor::{cast, Float, Tensor};

const INV: [f64; 15] = [
    1.0,
    1.0,
    0.5,
    1.0 / 3.0,
    0.25,
    0.2,
    1.0 / 6.0,
    1.0 / 7.0,
    0.125,
    1.0 / 9.0,
    0.1,
    1.0 / 11.0,
    1.0 / 12.0,
    1.0 / 13.0,
    1.0 / 14.0,
];

/// Discretized `(Ā, Δφ(ΔA))` for one diagonal entry. `A = 0` yields the
/// integrator limit `(1, Δ)`.
pub fn zoh<T: Float>(delta: T, a: T) -> (T, T) {
    let (mut ab, mut u) = ([T::zero()], [T::zero()]);
    zoh_row(delta, &[a], &mut ab, &mut u);
    (ab[0], u[0])
}

/// [`zoh`] for one `Δ` and a row of `A` entries.
///
/// `exp_m1` is much slower than `exp` and does not vectorize, so `e^z - 1`
/// comes from a Taylor series for `|z| <= 0.5` (8 terms in single, 14 in
/// double precision) and from `exp` elsewhere.
#[inline]
pub(crate) fn zoh_row<T: Float>(delta: T, a: &[T], ab: &mut [T], u: &mut [T]) {
    let single = std::mem::size_of::<T>() <= 4;
    let inv: [T; 15] = INV.map(|v| T::from(v).unwrap_or_else(T::zero));
    let coef = if single { &inv[2..=8] } else { &inv[2..=14] };
    let half: T = cast(0.5);
    for ((&an, abv), uv) in a.iter().zip(ab.iter_mut()).zip(u.iter_mut()) {
        let z = delta * an;
        let mut acc = T::one();
        for &c in coef.iter().rev() {
            acc = T::one() + z * acc * c;
        }
        *uv = z * acc;
        *abv = *uv + T::one();
    }
    for ((&an, abv), uv) in a.iter().zip(ab.iter_mut()).zip(u.iter_mut()) {
        let z = delta * an;
        if z.abs() > half {
            *abv = z.exp();
            *uv = *abv - T::one();
        }
    }
    for (&an, uv) in a.iter().zip(u.iter_mut()) {
        *uv = if an == T::zero() { delta } else { *uv / an };
    }
}

/// Taylor coefficients of `φ'(z)` around zero.
const PHI_PRIME: [f64; 7] = [
    0.5,
    1.0 / 3.0,
    0.125,
    1.0 / 30.0,
    1.0 / 144.0,
    1.0 / 840.0,
    1.0 / 5760.0,
];

/// `φ'(z)` given `e^z` and `φ(z)`, with a series near zero where the
/// closed form cancels. Branch-free so the caller's loop vectorizes.
#[inline]
fn phi_prime<T: Float>(z: T, ez: T, phi: T, coef: &[T; 7], small: T) -> T {
    let mut series = coef[6];
    for &c in coef[..6].iter().rev() {
        series = c + z * series;
    }
    let closed = (ez - phi) / z;
    if z.abs() < small {
        series
    } else {
        closed
    }
}

/// Recurrent state of one sequence: `inner x n` SSM states plus the last
/// `kernel - 1` inputs of the causal depthwise convolution in front of it.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState<T> {
    inner: usize,
    n: usize,
    s: Vec<T>,
    tail: ConvTail<T>,
}

impl<T: Float> SsmState<T> {
    pub fn new(inner: usize, n: usize, kernel: usize) -> Self {
        SsmState {
            inner,
            n,
            s: vec![T::zero(); inner * n],
            tail: ConvTail::new(inner, kernel),
        }
    }

    pub fn reset(&mut self) {
        self.s.iter_mut().for_each(|v| *v = T::zero());
        self.tail.reset();
    }

    /// Allocated state scalars, SSM state plus convolution tail.
    pub fn scalars(&self) -> usize {
        self.s.len() + self.tail.len()
    }

    pub fn inner(&self) -> usize {
        self.inner
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// SSM state, row-major `[inner, n]`.
    pub fn state(&self) -> &[T] {
        &self.s
    }

    /// Stored scalars: `inner * n` states plus the convolution tail.
    pub fn state_len(&self) -> usize {
        self.s.len() + self.tail.len()
    }

    pub(crate) fn conv_step(&mut self, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
        self.tail.step(x, w, b, out);
    }

    pub(crate) fn scan(&mut self, x: &[T], delta: &[T], a: &[T], b: &[T], c: &[T], y: &mut [T]) {
        scan_step(x, delta, a, b, c, &mut self.s, y);
    }
}

/// One SSM step for every inner channel. `x, delta, y: [inner]`,
/// `a: [inner, n]`, `b, c: [n]`. Rejects non-positive `Δ`.
pub fn ssm_step<T: Float>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    state: &mut SsmState<T>,
    y: &mut [T],
) -> Result<()> {
    let (e, n) = (state.inner, state.n);
    if x.len() != e || delta.len() != e || y.len() != e || a.len() != e * n || b.len() != n || c.len() != n {
        return Err(contract(format!(
            "ssm_step expects inner {} and state {}, got x {} delta {} a {} b {} c {}",
            e,
            n,
            x.len(),
            delta.len(),
            a.len(),
            b.len(),
            c.len()
        )));
    }
    if let Some(d) = delta.iter().find(|d| !(**d > T::zero())) {
        return Err(contract(format!("ssm step size must be positive, got {}", d)));
    }
    scan_step(x, delta, a, b, c, &mut state.s, y);
    Ok(())
}

/// Unchecked step shared by the streaming and offline paths.
#[inline]
pub(crate) fn scan_step<T: Float>(x: &[T], delta: &[T], a: &[T], b: &[T], c: &[T], s: &mut [T], y: &mut [T]) {
    let n = b.len();
    let (mut abr, mut ur) = (vec![T::zero(); n], vec![T::zero(); n]);
    for (ei, ((&xe, &de), ye)) in x.iter().zip(delta).zip(y.iter_mut()).enumerate() {
        zoh_row(de, &a[ei * n..(ei + 1) * n], &mut abr, &mut ur);
        let mut acc = T::zero();
        let row = &mut s[ei * n..(ei + 1) * n];
        for ((((sv, &ab), &u), &bn), &cn) in row.iter_mut().zip(&abr).zip(&ur).zip(b).zip(c) {
            *sv = ab * *sv + u * bn * xe;
            acc += cn * *sv;
        }
        *ye = acc;
    }
}

/// Fused selective scan over `[.., T, E]` inputs.
///
/// `x, delta: [.., T, E]`, `a: [E, N]`, `b, c: [.., T, N]`; returns
/// `y: [.., T, E]`. The backward pass replays the forward states of each
/// sequence.
pub fn selective_scan<T: Float>(x: &Var<T>, delta: &Var<T>, a: &Var<T>, b: &Var<T>, c: &Var<T>) -> Result<Var<T>> {
    let sh = x.shape().to_vec();
    if sh.len() < 2 || delta.shape() != sh.as_slice() {
        return Err(shape_err("selective_scan", &sh, delta.shape()));
    }
    let (t, e) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    if a.shape().len() != 2 || a.shape()[0] != e {
        return Err(shape_err("selective_scan A", &sh, a.shape()));
    }
    let n = a.shape()[1];
    let mut bsh = sh.clone();
    *bsh.last_mut().unwrap() = n;
    if b.shape() != bsh.as_slice() || c.shape() != bsh.as_slice() {
        return Err(shape_err("selective_scan B/C", &bsh, b.shape()));
    }
    let (xs, ds, aa, bs, cs) = (
        x.value_arc(),
        delta.value_arc(),
        a.value_arc(),
        b.value_arc(),
        c.value_arc(),
    );
    let (seq, seqn) = (t * e, t * n);
    let mut out = vec![T::zero(); xs.numel()];
    if seq > 0 {
        out.par_chunks_mut(seq).enumerate().for_each_init(
            || vec![T::zero(); e * n],
            |s, (k, o)| {
                s.iter_mut().for_each(|v| *v = T::zero());
                for ti in 0..t {
                    let r = k * seq + ti * e..k * seq + (ti + 1) * e;
                    let rn = k * seqn + ti * n..k * seqn + (ti + 1) * n;
                    scan_step(
                        &xs.data()[r.clone()],
                        &ds.data()[r],
                        aa.data(),
                        &bs.data()[rn.clone()],
                        &cs.data()[rn],
                        s,
                        &mut o[ti * e..(ti + 1) * e],
                    );
                }
            },
        );
    }
    let ids = [x.id(), delta.id(), a.id(), b.id(), c.id()];
    Ok(Var::custom(
        &[x, delta, a, b, c],
        Tensor::new(sh, out)?,
        move |gy, sink| {
            if seq == 0 || n == 0 {
                return;
            }
            let pcoef: [T; 7] = PHI_PRIME.map(|v| cast(v));
            let small: T = cast(0.05);
            let total = xs.numel();
            let mut dx = vec![T::zero(); total];
            let mut dd = vec![T::zero(); total];
            let mut db = vec![T::zero(); bs.numel()];
            let mut dc = vec![T::zero(); cs.numel()];
            let partial_a: Vec<Vec<T>> = dx
                .par_chunks_mut(seq)
                .zip(dd.par_chunks_mut(seq))
                .zip(db.par_chunks_mut(seqn).zip(dc.par_chunks_mut(seqn)))
                .enumerate()
                .map_init(
                    || {
                        (
                            vec![T::zero(); t * e * n],
                            vec![T::zero(); t * e * n],
                            vec![T::zero(); t * e * n],
                        )
                    },
                    |(states, abs, us), (k, ((dxs, dds), (dbs, dcs)))| {
                        let xk = &xs.data()[k * seq..(k + 1) * seq];
                        let dk = &ds.data()[k * seq..(k + 1) * seq];
                        let bk = &bs.data()[k * seqn..(k + 1) * seqn];
                        let ck = &cs.data()[k * seqn..(k + 1) * seqn];
                        let gk = &gy[k * seq..(k + 1) * seq];
                        let a = aa.data();
                        // replay the forward states, keeping the discretized
                        // coefficients for the reverse sweep
                        for ti in 0..t {
                            let base = ti * e * n;
                            for ei in 0..e {
                                let (xe, de) = (xk[ti * e + ei], dk[ti * e + ei]);
                                let r = base + ei * n..base + (ei + 1) * n;
                                zoh_row(de, &a[ei * n..(ei + 1) * n], &mut abs[r.clone()], &mut us[r]);
                                for ni in 0..n {
                                    let idx = ei * n + ni;
                                    let sp = if ti > 0 { states[base - e * n + idx] } else { T::zero() };
                                    states[base + idx] = abs[base + idx] * sp + us[base + idx] * bk[ti * n + ni] * xe;
                                }
                            }
                        }
                        let mut da = vec![T::zero(); e * n];
                        let mut dsn = vec![T::zero(); e * n];
                        let (mut gxv, mut gdv) = (vec![T::zero(); n], vec![T::zero(); n]);
                        let zeros = vec![T::zero(); e * n];
                        for ti in (0..t).rev() {
                            let base = ti * e * n;
                            let prev = if ti > 0 {
                                &states[base - e * n..base]
                            } else {
                                &zeros[..]
                            };
                            let (bt, ct) = (&bk[ti * n..(ti + 1) * n], &ck[ti * n..(ti + 1) * n]);
                            let (dbt, dct) = (&mut dbs[ti * n..(ti + 1) * n], &mut dcs[ti * n..(ti + 1) * n]);
                            for ei in 0..e {
                                let (xe, de, ge) = (xk[ti * e + ei], dk[ti * e + ei], gk[ti * e + ei]);
                                let r = ei * n..(ei + 1) * n;
                                let (st, sp) = (&states[base + r.start..base + r.end], &prev[r.clone()]);
                                let (abr, ur) = (&abs[base + r.start..base + r.end], &us[base + r.start..base + r.end]);
                                let (ar, dar, dsr) = (&a[r.clone()], &mut da[r.clone()], &mut dsn[r]);
                                for ni in 0..n {
                                    let (ab, u, an, bn) = (abr[ni], ur[ni], ar[ni], bt[ni]);
                                    let g = dsr[ni] + ge * ct[ni];
                                    dct[ni] += ge * st[ni];
                                    let g_ab = g * sp[ni];
                                    let g_u = g * bn * xe;
                                    dbt[ni] += g * u * xe;
                                    gxv[ni] = g * u * bn;
                                    gdv[ni] = g_ab * ab * an + g_u * ab;
                                    let dphi = phi_prime(de * an, ab, u / de, &pcoef, small);
                                    dar[ni] += g_ab * ab * de + g_u * de * de * dphi;
                                    dsr[ni] = g * ab;
                                }
                                dxs[ti * e + ei] = gxv.iter().fold(T::zero(), |s, &v| s + v);
                                dds[ti * e + ei] = gdv.iter().fold(T::zero(), |s, &v| s + v);
                            }
                        }
                        da
                    },
                )
                .collect();
            let mut da = vec![T::zero(); e * n];
            for p in partial_a {
                for (d, v) in da.iter_mut().zip(p) {
                    *d += v;
                }
            }
            let [ix, id, ia, ib, ic] = ids;
            sink.add_owned(ix, dx);
            sink.add_owned(id, dd);
            sink.add_owned(ia, da);
            sink.add_owned(ib, db);
            sink.add_owned(ic, dc);
        },
    ))
}
