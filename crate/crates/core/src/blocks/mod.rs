//! Narrow-band sequence blocks: windowed attention, Retention, the mamba
//! block and the time-convolutional feed-forward network.
//!
//! Every block has an offline forward over `[.., T, H]` (one causal
//! sequence per leading index) for training, and a step function that
//! advances one frame for `rows` independent sequences with explicit state.

pub mod msa;
pub mod retention;
pub mod ssm;

use serde::{Deserialize, Serialize};

use crate::autodiff::{silu, softplus, ConvPadding, Var};
use crate::error::{contract, Result};
use crate::params::{Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{cast, Float};

pub use msa::{msa_step, msa_window, MsaState};
pub use retention::{retention_parallel, retention_parallel_var, retention_recurrent, retention_step, RetState};
pub use ssm::{selective_scan, ssm_step, zoh, SsmState};

/// Causal depthwise convolution over time with weights `[width, kernel]`.
#[derive(Clone, Copy, Debug)]
pub struct TimeConv {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
    pub kernel: usize,
}

impl TimeConv {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, width: usize, kernel: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(TimeConv {
                w: init.fan_in("w", &[width, kernel], kernel)?,
                b: init.fan_in("b", &[width], kernel)?,
                width,
                kernel,
            })
        })
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let axis = x.shape().len().saturating_sub(2);
        x.dwconv(&p[self.w], &p[self.b], axis, ConvPadding::Causal)
    }

    /// Convolves one frame of `rows` sequences, `x, out: [rows, width]`,
    /// with one tail per row.
    pub fn rows<T: Float>(&self, p: &ParamStore<T>, x: &[T], tails: &mut [ConvTail<T>], out: &mut [T]) {
        let (w, b) = (p.get(self.w).data(), p.get(self.b).data());
        for ((xr, tail), o) in x
            .chunks_exact(self.width)
            .zip(tails)
            .zip(out.chunks_exact_mut(self.width))
        {
            tail.step(xr, w, b, o);
        }
    }
}

/// The last `kernel - 1` input frames of a causal convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTail<T> {
    width: usize,
    kernel: usize,
    frames: Vec<T>,
}

impl<T: Float> ConvTail<T> {
    pub fn new(width: usize, kernel: usize) -> Self {
        ConvTail {
            width,
            kernel,
            frames: vec![T::zero(); kernel.saturating_sub(1) * width],
        }
    }

    pub fn reset(&mut self) {
        self.frames.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `out = b + Σ_j w[:, j] * frame(t - kernel + 1 + j)`, then pushes `x`.
    pub fn step(&mut self, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
        let (e, k) = (self.width, self.kernel);
        out.copy_from_slice(b);
        for j in 0..k {
            let src = if j + 1 == k {
                x
            } else {
                &self.frames[j * e..(j + 1) * e]
            };
            for c in 0..e {
                out[c] += w[c * k + j] * src[c];
            }
        }
        if k > 1 {
            self.frames.copy_within(e.., 0);
            self.frames[(k - 2) * e..].copy_from_slice(x);
        }
    }
}

/// Sequence kernel of an attention-style block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqKernel {
    Msa { window: usize },
    Retention { gammas: Vec<f64> },
}

/// `x + O(kernel(Q, K, V))` on layer-normalized input, with optional
/// per-head normalization of the kernel output.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub head_norm: Option<LayerNorm>,
    pub heads: usize,
    pub kernel: SeqKernel,
}

/// Per-sequence streaming state of an [`AttentionBlock`].
#[derive(Clone, Debug, PartialEq)]
pub enum AttnState<T> {
    Msa(MsaState<T>),
    Retention(RetState<T>),
}

impl<T: Float> AttnState<T> {
    pub fn reset(&mut self) {
        match self {
            AttnState::Msa(s) => s.reset(),
            AttnState::Retention(s) => s.reset(),
        }
    }

    /// Allocated state scalars.
    pub fn scalars(&self) -> usize {
        match self {
            AttnState::Msa(s) => s.capacity_scalars(),
            AttnState::Retention(s) => s.state_len(),
        }
    }
}

impl AttentionBlock {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        h: usize,
        heads: usize,
        kernel: SeqKernel,
        head_norm: bool,
    ) -> Result<Self> {
        if heads == 0 || h % heads != 0 {
            return Err(crate::error::config(format!(
                "hidden size {} not divisible by {} heads",
                h, heads
            )));
        }
        if let SeqKernel::Retention { gammas } = &kernel {
            retention::check_gammas(gammas)?;
            if gammas.len() != heads {
                return Err(crate::error::config(format!(
                    "{} decays for {} heads",
                    gammas.len(),
                    heads
                )));
            }
        }
        init.scope(name, |init| {
            Ok(AttentionBlock {
                ln: LayerNorm::new(init, "ln", h)?,
                q: Linear::new(init, "q", h, h, true)?,
                k: Linear::new(init, "k", h, h, true)?,
                v: Linear::new(init, "v", h, h, true)?,
                o: Linear::new(init, "o", h, h, true)?,
                head_norm: if head_norm {
                    Some(LayerNorm::new(init, "head_norm", h / heads)?)
                } else {
                    None
                },
                heads,
                kernel,
            })
        })
    }

    fn width(&self) -> usize {
        self.q.din
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.ln.forward(p, x)?;
        let (q, k, v) = (self.q.forward(p, &h)?, self.k.forward(p, &h)?, self.v.forward(p, &h)?);
        let mut a = match &self.kernel {
            SeqKernel::Msa { window } => msa_window(&q, &k, &v, self.heads, *window)?,
            SeqKernel::Retention { gammas } => retention_recurrent(&q, &k, &v, gammas)?,
        };
        if let Some(norm) = &self.head_norm {
            let shape = a.shape().to_vec();
            let mut split = shape.clone();
            split.pop();
            split.extend([self.heads, self.width() / self.heads]);
            a = norm.forward(p, &a.reshape(split)?)?.reshape(shape)?;
        }
        x.add(&self.o.forward(p, &a)?)
    }

    pub fn new_state<T: Float>(&self) -> Result<AttnState<T>> {
        Ok(match &self.kernel {
            SeqKernel::Msa { window } => AttnState::Msa(MsaState::new(*window, self.heads, self.width())?),
            SeqKernel::Retention { gammas } => AttnState::Retention(RetState::new(self.width() / self.heads, gammas)?),
        })
    }

    /// Advances one frame for `states.len()` sequences; `x: [rows, H]` in place.
    pub fn step<T: Float>(&self, p: &ParamStore<T>, x: &mut [T], states: &mut [AttnState<T>]) -> Result<()> {
        let hd = self.width();
        let rows = check_rows(x, hd, states.len())?;
        let mut h = x.to_vec();
        self.ln.rows(p, &mut h);
        let mut q = vec![T::zero(); rows * hd];
        let mut k = q.clone();
        let mut v = q.clone();
        self.q.rows(p, &h, &mut q);
        self.k.rows(p, &h, &mut k);
        self.v.rows(p, &h, &mut v);
        let mut a = vec![T::zero(); rows * hd];
        for (r, st) in states.iter_mut().enumerate() {
            let s = r * hd..(r + 1) * hd;
            let (qr, kr, vr) = (&q[s.clone()], &k[s.clone()], &v[s.clone()]);
            match st {
                AttnState::Msa(m) => msa_step(qr, kr, vr, m, &mut a[s])?,
                AttnState::Retention(rs) => retention_step(qr, kr, vr, rs, &mut a[s])?,
            }
        }
        if let Some(norm) = &self.head_norm {
            norm.rows(p, &mut a);
        }
        self.o.rows(p, &a, &mut h);
        for (xv, &hv) in x.iter_mut().zip(&h) {
            *xv += hv;
        }
        Ok(())
    }
}

fn check_rows<T>(x: &[T], width: usize, states: usize) -> Result<usize> {
    if width == 0 || x.len() % width != 0 || x.len() / width != states {
        return Err(contract(format!(
            "step input of {} values does not match {} states of width {}",
            x.len(),
            states,
            width
        )));
    }
    Ok(states)
}

/// Time-convolutional feed-forward network:
/// `x + Down(SiLU(CausalConv(Up(LN(x)))))`.
#[derive(Clone, Debug)]
pub struct TConvFfn {
    pub ln: LayerNorm,
    pub up: Linear,
    pub conv: TimeConv,
    pub down: Linear,
}

impl TConvFfn {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        h: usize,
        expansion: usize,
        kernel: usize,
    ) -> Result<Self> {
        init.scope(name, |init| {
            let e = h * expansion;
            Ok(TConvFfn {
                ln: LayerNorm::new(init, "ln", h)?,
                up: Linear::new(init, "up", h, e, true)?,
                conv: TimeConv::new(init, "conv", e, kernel)?,
                down: Linear::new(init, "down", e, h, true)?,
            })
        })
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.up.forward(p, &self.ln.forward(p, x)?)?;
        let h = self.conv.forward(p, &h)?.silu();
        x.add(&self.down.forward(p, &h)?)
    }

    pub fn new_state<T: Float>(&self) -> ConvTail<T> {
        ConvTail::new(self.conv.width, self.conv.kernel)
    }

    pub fn step<T: Float>(&self, p: &ParamStore<T>, x: &mut [T], tails: &mut [ConvTail<T>]) -> Result<()> {
        let rows = check_rows(x, self.ln.dim, tails.len())?;
        let e = self.conv.width;
        let mut h = x.to_vec();
        self.ln.rows(p, &mut h);
        let mut u = vec![T::zero(); rows * e];
        self.up.rows(p, &h, &mut u);
        let mut c = vec![T::zero(); rows * e];
        self.conv.rows(p, &u, tails, &mut c);
        c.iter_mut().for_each(|v| *v = silu(*v));
        self.down.rows(p, &c, &mut h);
        for (xv, &hv) in x.iter_mut().zip(&h) {
            *xv += hv;
        }
        Ok(())
    }
}

/// Mamba block with residual:
/// `x + Out(SSM(SiLU(Conv(In_x(LN(x))))) ⊙ SiLU(In_z(LN(x))))`, where the
/// SSM parameters Δ, B, C are projected from the convolved input and a
/// skip `D ⊙ x` is added to the SSM output.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub ln: LayerNorm,
    pub in_proj: Linear,
    pub conv: TimeConv,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
    pub inner: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
}

impl MambaBlock {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        h: usize,
        state_dim: usize,
        kernel: usize,
    ) -> Result<Self> {
        let inner = 2 * h;
        let dt_rank = h.div_ceil(16);
        init.scope(name, |init| {
            let ln = LayerNorm::new(init, "ln", h)?;
            let in_proj = Linear::new(init, "in_proj", h, 2 * inner, false)?;
            let conv = TimeConv::new(init, "conv", inner, kernel)?;
            let x_proj = Linear::new(init, "x_proj", inner, dt_rank + 2 * state_dim, false)?;
            let dt_proj = init.scope("dt_proj", |init| {
                let w = init.uniform("w", &[dt_rank, inner], 1.0 / (dt_rank as f64).sqrt())?;
                // bias = softplus⁻¹(dt), dt log-uniform in [1e-3, 1e-1]
                let mut bias = Vec::with_capacity(inner);
                for _ in 0..inner {
                    let u: f64 = rand::Rng::gen_range(init.rng(), 0.0..1.0);
                    let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                    bias.push(cast::<T>(dt + (-(-dt).exp_m1()).ln()));
                }
                let b = init.tensor("b", crate::tensor::Tensor::new(vec![inner], bias)?)?;
                Ok(Linear {
                    w,
                    b: Some(b),
                    din: dt_rank,
                    dout: inner,
                })
            })?;
            let a: Vec<T> = (0..inner)
                .flat_map(|_| (1..=state_dim).map(|n| cast::<T>((n as f64).ln())))
                .collect();
            let a_log = init.tensor("a_log", crate::tensor::Tensor::new(vec![inner, state_dim], a)?)?;
            let d_skip = init.constant("d", &[inner], 1.0)?;
            let out_proj = Linear::new(init, "out_proj", inner, h, false)?;
            Ok(MambaBlock {
                ln,
                in_proj,
                conv,
                x_proj,
                dt_proj,
                a_log,
                d_skip,
                out_proj,
                inner,
                state_dim,
                dt_rank,
            })
        })
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let (e, n, r) = (self.inner, self.state_dim, self.dt_rank);
        let xz = self.in_proj.forward(p, &self.ln.forward(p, x)?)?;
        let xi = xz.slice_last(0, e)?;
        let z = xz.slice_last(e, e)?;
        let xc = self.conv.forward(p, &xi)?.silu();
        let dbc = self.x_proj.forward(p, &xc)?;
        let delta = self.dt_proj.forward(p, &dbc.slice_last(0, r)?)?.softplus();
        let b = dbc.slice_last(r, n)?;
        let c = dbc.slice_last(r + n, n)?;
        let a = p[self.a_log].exp().neg();
        let y = selective_scan(&xc, &delta, &a, &b, &c)?;
        let y = xc.mul_last(&p[self.d_skip])?.add(&y)?;
        let y = y.mul(&z.silu())?;
        x.add(&self.out_proj.forward(p, &y)?)
    }

    pub fn new_state<T: Float>(&self) -> SsmState<T> {
        SsmState::new(self.inner, self.state_dim, self.conv.kernel)
    }

    pub fn step<T: Float>(&self, p: &ParamStore<T>, x: &mut [T], states: &mut [SsmState<T>]) -> Result<()> {
        let hd = self.ln.dim;
        let rows = check_rows(x, hd, states.len())?;
        let (e, n, r) = (self.inner, self.state_dim, self.dt_rank);
        let mut h = x.to_vec();
        self.ln.rows(p, &mut h);
        let mut xz = vec![T::zero(); rows * 2 * e];
        self.in_proj.rows(p, &h, &mut xz);
        let (cw, cb) = (p.get(self.conv.w).data(), p.get(self.conv.b).data());
        let a: Vec<T> = p.get(self.a_log).data().iter().map(|&v| -v.exp()).collect();
        let dsk = p.get(self.d_skip).data();
        let w = r + 2 * n;
        let mut xc = vec![T::zero(); rows * e];
        for (ri, st) in states.iter_mut().enumerate() {
            st.conv_step(&xz[ri * 2 * e..ri * 2 * e + e], cw, cb, &mut xc[ri * e..(ri + 1) * e]);
        }
        xc.iter_mut().for_each(|v| *v = silu(*v));
        let mut dbc = vec![T::zero(); rows * w];
        self.x_proj.rows(p, &xc, &mut dbc);
        let dt_in: Vec<T> = dbc.chunks(w).flat_map(|c| c[..r].iter().copied()).collect();
        let mut delta = vec![T::zero(); rows * e];
        self.dt_proj.rows(p, &dt_in, &mut delta);
        delta.iter_mut().for_each(|v| *v = softplus(*v));
        let mut y = vec![T::zero(); rows * e];
        for (ri, st) in states.iter_mut().enumerate() {
            let (xr, dr, bc) = (
                &xc[ri * e..(ri + 1) * e],
                &delta[ri * e..(ri + 1) * e],
                &dbc[ri * w + r..(ri + 1) * w],
            );
            let yr = &mut y[ri * e..(ri + 1) * e];
            st.scan(xr, dr, &a, &bc[..n], &bc[n..], yr);
            let zr = &xz[ri * 2 * e + e..(ri + 1) * 2 * e];
            for (((yv, &xv), &dv), &zv) in yr.iter_mut().zip(xr).zip(dsk).zip(zr) {
                *yv = (xv * dv + *yv) * silu(zv);
            }
        }
        self.out_proj.rows(p, &y, &mut h);
        for (xv, &hv) in x.iter_mut().zip(&h) {
            *xv += hv;
        }
        Ok(())
    }
}
