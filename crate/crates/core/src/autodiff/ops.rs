use rayon::prelude::*;

use super::{GradSink, Var};
use crate::error::{contract, shape_err, Result};
use crate::tensor::{cast, gemm, gemm_strided, rows_matmul, rows_outer_acc, Float, MatRef, Tensor, ROW_BLOCK};

const CHUNK: usize = 1 << 15;

fn map_unary<T: Float>(x: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(CHUNK).zip(x.par_chunks(CHUNK)).for_each(|(o, i)| {
        for (a, &b) in o.iter_mut().zip(i) {
            *a = f(b);
        }
    });
    out
}

fn map_binary<T: Float>(x: &[T], y: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK).zip(y.par_chunks(CHUNK)))
        .for_each(|(o, (a, b))| {
            for ((o, &a), &b) in o.iter_mut().zip(a).zip(b) {
                *o = f(a, b);
            }
        });
    out
}

fn map_ternary<T: Float>(x: &[T], y: &[T], z: &[T], f: impl Fn(T, T, T) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK).zip(y.par_chunks(CHUNK).zip(z.par_chunks(CHUNK))))
        .for_each(|(o, (a, (b, c)))| {
            for (((o, &a), &b), &c) in o.iter_mut().zip(a).zip(b).zip(c) {
                *o = f(a, b, c);
            }
        });
    out
}

/// Column sums of a row-major `[rows, n]` buffer, reduced in fixed block order.
fn column_sums<T: Float>(g: &[T], n: usize) -> Vec<T> {
    let partials: Vec<Vec<T>> = g
        .par_chunks(ROW_BLOCK * n)
        .map(|blk| {
            let mut p = vec![T::zero(); n];
            for row in blk.chunks_exact(n) {
                for (a, &b) in p.iter_mut().zip(row) {
                    *a += b;
                }
            }
            p
        })
        .collect();
    let mut out = vec![T::zero(); n];
    for p in partials {
        for (a, b) in out.iter_mut().zip(p) {
            *a += b;
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    if x > cast(20.0) {
        x
    } else if x < cast(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Float>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Normalizes one row into `out`; returns `(mean, 1/std)`.
fn norm_row<T: Float>(x: &[T], out: &mut [T], gamma: &[T], beta: &[T], eps: T) -> (T, T) {
    let inv_d = T::one() / cast(x.len() as f64);
    let mu = x.iter().copied().sum::<T>() * inv_d;
    let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
    let rstd = T::one() / (var + eps).sqrt();
    for (((o, &xv), &gv), &bv) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (xv - mu) * rstd * gv + bv;
    }
    (mu, rstd)
}

/// In-place layer normalization of contiguous rows of `gamma.len()` values,
/// bit-identical to [`Var::layer_norm`].
pub fn layer_norm_rows<T: Float>(x: &mut [T], gamma: &[T], beta: &[T], eps: T) {
    let d = gamma.len();
    let mut tmp = vec![T::zero(); d];
    for row in x.chunks_exact_mut(d) {
        norm_row(row, &mut tmp, gamma, beta, eps);
        row.copy_from_slice(&tmp);
    }
}

/// Padding rule of a depthwise convolution along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// `kernel - 1` zeros on the left: output `t` sees inputs `t-k+1..=t`.
    Causal,
    /// Symmetric zero padding for odd kernels: output length equals input length.
    Same,
}

impl ConvPadding {
    fn left(self, kernel: usize) -> usize {
        match self {
            ConvPadding::Causal => kernel - 1,
            ConvPadding::Same => (kernel - 1) / 2,
        }
    }
}

impl<T: Float> Var<T> {
    fn same_shape(&self, other: &Var<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    fn unary(&self, value: Vec<T>, backward: impl FnOnce(&[T], &mut GradSink<T>) + 'static) -> Var<T> {
        let t = Tensor::new(self.shape().to_vec(), value).expect("unary shape");
        Var::custom(&[self], t, backward)
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "add")?;
        let out = map_binary(self.data(), other.data(), |a, b| a + b);
        let (ia, ib) = (self.id(), other.id());
        Ok(Var::custom(
            &[self, other],
            Tensor::new(self.shape().to_vec(), out)?,
            move |g, s| {
                s.add(ia, g);
                s.add(ib, g);
            },
        ))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "sub")?;
        let out = map_binary(self.data(), other.data(), |a, b| a - b);
        let (ia, ib) = (self.id(), other.id());
        Ok(Var::custom(
            &[self, other],
            Tensor::new(self.shape().to_vec(), out)?,
            move |g, s| {
                s.add(ia, g);
                if s.wants(ib) {
                    s.add_owned(ib, g.iter().map(|&v| -v).collect());
                }
            },
        ))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "mul")?;
        let out = map_binary(self.data(), other.data(), |a, b| a * b);
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (self.value_arc(), other.value_arc());
        Ok(Var::custom(
            &[self, other],
            Tensor::new(self.shape().to_vec(), out)?,
            move |g, s| {
                if s.wants(ia) {
                    s.add_owned(ia, map_binary(g, vb.data(), |g, b| g * b));
                }
                if s.wants(ib) {
                    s.add_owned(ib, map_binary(g, va.data(), |g, a| g * a));
                }
            },
        ))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let id = self.id();
        self.unary(map_unary(self.data(), |v| v * c), move |g, s| {
            s.add_owned(id, g.iter().map(|&v| v * c).collect());
        })
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let id = self.id();
        self.unary(map_unary(self.data(), |v| v + c), move |g, s| s.add(id, g))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn exp(&self) -> Var<T> {
        let out = map_unary(self.data(), |v| v.exp());
        let saved = out.clone();
        let id = self.id();
        self.unary(out, move |g, s| {
            s.add_owned(id, map_binary(g, &saved, |g, y| g * y));
        })
    }

    pub fn ln(&self) -> Var<T> {
        let x = self.value_arc();
        let id = self.id();
        self.unary(map_unary(self.data(), |v| v.ln()), move |g, s| {
            s.add_owned(id, map_binary(g, x.data(), |g, x| g / x));
        })
    }

    pub fn square(&self) -> Var<T> {
        let x = self.value_arc();
        let id = self.id();
        self.unary(map_unary(self.data(), |v| v * v), move |g, s| {
            s.add_owned(id, map_binary(g, x.data(), |g, x| cast::<T>(2.0) * g * x));
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let out = map_unary(self.data(), sigmoid);
        let saved = out.clone();
        let id = self.id();
        self.unary(out, move |g, s| {
            s.add_owned(id, map_binary(g, &saved, |g, y| g * y * (T::one() - y)));
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Var<T> {
        let x = self.value_arc();
        let id = self.id();
        self.unary(map_unary(self.data(), silu), move |g, s| {
            s.add_owned(id, map_binary(g, x.data(), |g, x| g * silu_grad(x)));
        })
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&self) -> Var<T> {
        let x = self.value_arc();
        let id = self.id();
        self.unary(map_unary(self.data(), softplus), move |g, s| {
            s.add_owned(id, map_binary(g, x.data(), |g, x| g * sigmoid(x)));
        })
    }

    pub fn sum(&self) -> Var<T> {
        let total: T = self.data().iter().copied().sum();
        let (id, n) = (self.id(), self.value().numel());
        Var::custom(&[self], Tensor::scalar(total), move |g, s| {
            s.add_owned(id, vec![g[0]; n]);
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / cast(n as f64))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value().numel() {
            return Err(shape_err("reshape", self.shape(), &shape));
        }
        let id = self.id();
        Ok(Var::custom(
            &[self],
            Tensor::new(shape, self.data().to_vec())?,
            move |g, s| s.add(id, g),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<T> {
        let d = self.value().last_dim();
        let mut out = self.data().to_vec();
        out.par_chunks_mut(d).for_each(|row| {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        });
        let saved = out.clone();
        let id = self.id();
        self.unary(out, move |g, s| {
            let mut gx = vec![T::zero(); g.len()];
            gx.par_chunks_mut(d)
                .zip(g.par_chunks(d).zip(saved.par_chunks(d)))
                .for_each(|(o, (g, y))| {
                    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for ((o, &g), &y) in o.iter_mut().zip(g).zip(y) {
                        *o = y * (g - dot);
                    }
                });
            s.add_owned(id, gx);
        })
    }

    /// Layer normalization over the last axis with learnable `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let d = self.value().last_dim();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.value().numel() / d.max(1);
        let x = self.value_arc();
        let (gm, bt) = (gamma.value_arc(), beta.value_arc());
        let mut out = vec![T::zero(); x.numel()];
        let mut stats = vec![T::zero(); 2 * rows];
        out.par_chunks_mut(d)
            .zip(x.data().par_chunks(d).zip(stats.par_chunks_mut(2)))
            .for_each(|(o, (xr, st))| {
                let (mu, rstd) = norm_row(xr, o, gm.data(), bt.data(), eps);
                st[0] = mu;
                st[1] = rstd;
            });
        let (ix, ig, ib) = (self.id(), gamma.id(), beta.id());
        let inv_d = T::one() / cast(d as f64);
        Ok(Var::custom(
            &[self, gamma, beta],
            Tensor::new(self.shape().to_vec(), out)?,
            move |g, s| {
                let need_x = s.wants(ix);
                let xhat: Vec<T> = {
                    let mut xh = vec![T::zero(); x.numel()];
                    xh.par_chunks_mut(d)
                        .zip(x.data().par_chunks(d).zip(stats.par_chunks(2)))
                        .for_each(|(o, (xr, st))| {
                            for (o, &v) in o.iter_mut().zip(xr) {
                                *o = (v - st[0]) * st[1];
                            }
                        });
                    xh
                };
                if s.wants(ig) {
                    let prod = map_binary(g, &xhat, |a, b| a * b);
                    s.add_owned(ig, column_sums(&prod, d));
                }
                if s.wants(ib) {
                    s.add_owned(ib, column_sums(g, d));
                }
                if need_x {
                    let mut gx = vec![T::zero(); g.len()];
                    gx.par_chunks_mut(d)
                        .zip(g.par_chunks(d).zip(xhat.par_chunks(d).zip(stats.par_chunks(2))))
                        .for_each(|(o, (gr, (xh, st)))| {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for ((&gv, &gmv), &xv) in gr.iter().zip(gm.data()).zip(xh) {
                                let gg = gv * gmv;
                                m1 += gg;
                                m2 += gg * xv;
                            }
                            m1 *= inv_d;
                            m2 *= inv_d;
                            for (((o, &gv), &gmv), &xv) in o.iter_mut().zip(gr).zip(gm.data()).zip(xh) {
                                *o = st[1] * (gv * gmv - m1 - xv * m2);
                            }
                        });
                    s.add_owned(ix, gx);
                }
            },
        ))
    }

    /// Affine map over the last axis: `x W + b` with `W: [in, out]`.
    pub fn linear(&self, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let din = self.value().last_dim();
        if w.shape().len() != 2 || w.shape()[0] != din {
            return Err(shape_err("linear", self.shape(), w.shape()));
        }
        let dout = w.shape()[1];
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(shape_err("linear bias", w.shape(), b.shape()));
            }
        }
        let rows = self.value().numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        rows_matmul(
            self.data(),
            rows,
            MatRef::new(w.data(), din, dout),
            b.map(|b| b.data()),
            &mut out,
        );
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let x = self.value_arc();
        let wv = w.value_arc();
        let (ix, iw) = (self.id(), w.id());
        let ib = b.map(|b| b.id());
        let mut inputs = vec![self, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        Ok(Var::custom(&inputs, Tensor::new(shape, out)?, move |g, s| {
            if s.wants(ix) {
                let mut gx = vec![T::zero(); rows * din];
                rows_matmul(g, rows, MatRef::new(wv.data(), din, dout).t(), None, &mut gx);
                s.add_owned(ix, gx);
            }
            if let Some(slot) = s.slot(iw) {
                rows_outer_acc(x.data(), rows, din, g, dout, slot);
            }
            if let Some(ib) = ib {
                if s.wants(ib) {
                    s.add_owned(ib, column_sums(g, dout));
                }
            }
        }))
    }

    /// Batched matrix product `[.., i, k] x [.., k, j]`. The right operand may
    /// also be a plain `[k, j]` matrix shared across the batch.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (i, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, j) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.iter().product::<usize>() == 1;
        if k != k2 || (!shared_b && batch_a != batch_b) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let nb: usize = batch_a.iter().product();
        let mut out = vec![T::zero(); nb * i * j];
        let (a, b) = (self.value_arc(), other.value_arc());
        let boff = move |bi: usize| if shared_b { 0 } else { bi * k * j };
        out.par_chunks_mut((i * j).max(1)).enumerate().for_each(|(bi, o)| {
            gemm(
                T::one(),
                MatRef::new(&a.data()[bi * i * k..(bi + 1) * i * k], i, k),
                MatRef::new(&b.data()[boff(bi)..boff(bi) + k * j], k, j),
                T::zero(),
                o,
                j,
            );
        });
        let mut shape = batch_a.to_vec();
        shape.extend([i, j]);
        let (ia, ib) = (self.id(), other.id());
        Ok(Var::custom(&[self, other], Tensor::new(shape, out)?, move |g, s| {
            if s.wants(ia) {
                let mut ga = vec![T::zero(); nb * i * k];
                ga.par_chunks_mut((i * k).max(1)).enumerate().for_each(|(bi, o)| {
                    gemm(
                        T::one(),
                        MatRef::new(&g[bi * i * j..(bi + 1) * i * j], i, j),
                        MatRef::new(&b.data()[boff(bi)..boff(bi) + k * j], k, j).t(),
                        T::zero(),
                        o,
                        k,
                    );
                });
                s.add_owned(ia, ga);
            }
            if let Some(slot) = s.slot(ib) {
                for bi in 0..nb {
                    let o = &mut slot[boff(bi)..boff(bi) + k * j];
                    gemm(
                        T::one(),
                        MatRef::new(&a.data()[bi * i * k..(bi + 1) * i * k], i, k).t(),
                        MatRef::new(&g[bi * i * j..(bi + 1) * i * j], i, j),
                        T::one(),
                        o,
                        j,
                    );
                }
            }
        }))
    }

    /// `x * v` with `v: [D]` broadcast over the last axis.
    pub fn mul_last(&self, v: &Var<T>) -> Result<Var<T>> {
        let d = self.value().last_dim();
        if v.shape() != [d] {
            return Err(shape_err("mul_last", self.shape(), v.shape()));
        }
        let (x, vv) = (self.value_arc(), v.value_arc());
        let mut out = x.data().to_vec();
        out.par_chunks_mut(d).for_each(|row| {
            for (a, &b) in row.iter_mut().zip(vv.data()) {
                *a *= b;
            }
        });
        let (ix, iv) = (self.id(), v.id());
        Ok(Var::custom(
            &[self, v],
            Tensor::new(self.shape().to_vec(), out)?,
            move |g, s| {
                if s.wants(ix) {
                    let mut gx = g.to_vec();
                    gx.par_chunks_mut(d).for_each(|row| {
                        for (a, &b) in row.iter_mut().zip(vv.data()) {
                            *a *= b;
                        }
                    });
                    s.add_owned(ix, gx);
                }
                if s.wants(iv) {
                    s.add_owned(iv, column_sums(&map_binary(g, x.data(), |a, b| a * b), d));
                }
            },
        ))
    }

    /// `x + v` with `v: [D]` broadcast over the last axis.
    pub fn add_last(&self, v: &Var<T>) -> Result<Var<T>> {
        let d = self.value().last_dim();
        if v.shape() != [d] {
            return Err(shape_err("add_last", self.shape(), v.shape()));
        }
        let mut out = self.data().to_vec();
        let vv = v.value_arc();
        out.par_chunks_mut(d).for_each(|row| {
            for (a, &b) in row.iter_mut().zip(vv.data()) {
                *a += b;
            }
        });
        let (ix, iv) = (self.id(), v.id());
        Ok(Var::custom(
            &[self, v],
            Tensor::new(self.shape().to_vec(), out)?,
            move |g, s| {
                s.add(ix, g);
                if s.wants(iv) {
                    s.add_owned(iv, column_sums(g, d));
                }
            },
        ))
    }

    /// Features `start..start+len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<T>> {
        let d = self.value().last_dim();
        if start + len > d {
            return Err(contract(format!(
                "slice {}..{} out of last axis {}",
                start,
                start + len,
                d
            )));
        }
        let rows = self.value().numel() / d.max(1);
        let mut out = vec![T::zero(); rows * len];
        out.par_chunks_mut(len.max(1))
            .zip(self.data().par_chunks(d))
            .for_each(|(o, x)| o.copy_from_slice(&x[start..start + len]));
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let id = self.id();
        Ok(Var::custom(&[self], Tensor::new(shape, out)?, move |g, s| {
            if let Some(slot) = s.slot(id) {
                slot.par_chunks_mut(d).zip(g.par_chunks(len.max(1))).for_each(|(o, g)| {
                    for (a, &b) in o[start..start + len].iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
        }))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return Err(shape_err("concat_last", first.shape(), p.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.value().last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for (o, x) in out.chunks_mut(total).zip(p.data().chunks(w)) {
                o[off..off + w].copy_from_slice(x);
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(Var::custom(parts, Tensor::new(shape, out)?, move |g, s| {
            let mut off = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                if s.wants(id) {
                    let mut gp = vec![T::zero(); rows * w];
                    for (o, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                        o.copy_from_slice(&gr[off..off + w]);
                    }
                    s.add_owned(id, gp);
                }
                off += w;
            }
        }))
    }

    /// Depthwise convolution along `axis`; channels are the last axis.
    /// `w: [C, K]`, `b: [C]`.
    pub fn dwconv(&self, w: &Var<T>, b: &Var<T>, axis: usize, padding: ConvPadding) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis + 1 >= shape.len() {
            return Err(contract(format!("dwconv axis {} invalid for shape {:?}", axis, shape)));
        }
        let c = shape[shape.len() - 1];
        if w.shape().len() != 2 || w.shape()[0] != c || b.shape() != [c] {
            return Err(shape_err("dwconv", &shape, w.shape()));
        }
        let k = w.shape()[1];
        if padding == ConvPadding::Same && k % 2 == 0 {
            return Err(contract("same-padded convolution needs an odd kernel"));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let left = padding.left(k);
        // taps[j] is the per-channel weight column j, tiled to `inner`.
        let tiled = |wd: &[T]| -> Vec<Vec<T>> {
            (0..k)
                .map(|j| (0..inner).map(|i| wd[(i % c) * k + j]).collect())
                .collect()
        };
        let taps = tiled(w.data());
        let bias_tiled: Vec<T> = (0..inner).map(|i| b.data()[i % c]).collect();
        let x = self.value_arc();
        let mut out = vec![T::zero(); x.numel()];
        out.par_chunks_mut(len * inner)
            .zip(x.data().par_chunks(len * inner))
            .for_each(|(o, xs)| {
                for a in 0..len {
                    let orow = &mut o[a * inner..(a + 1) * inner];
                    orow.copy_from_slice(&bias_tiled);
                    for (j, tap) in taps.iter().enumerate() {
                        let src = a as isize + j as isize - left as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let xr = &xs[src as usize * inner..(src as usize + 1) * inner];
                        for ((o, &xv), &wv) in orow.iter_mut().zip(xr).zip(tap) {
                            *o += wv * xv;
                        }
                    }
                }
            });
        let (ix, iw, ib) = (self.id(), w.id(), b.id());
        Ok(Var::custom(&[self, w, b], Tensor::new(shape, out)?, move |g, s| {
            if s.wants(ix) {
                let mut gx = vec![T::zero(); x.numel()];
                gx.par_chunks_mut(len * inner)
                    .zip(g.par_chunks(len * inner))
                    .for_each(|(gxs, gs)| {
                        for a in 0..len {
                            let grow = &gs[a * inner..(a + 1) * inner];
                            for (j, tap) in taps.iter().enumerate() {
                                let src = a as isize + j as isize - left as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let dst = &mut gxs[src as usize * inner..(src as usize + 1) * inner];
                                for ((d, &gv), &wv) in dst.iter_mut().zip(grow).zip(tap) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    });
                s.add_owned(ix, gx);
            }
            if s.wants(iw) || s.wants(ib) {
                // per-outer partial sums over the tiled layout, folded by channel
                let partials: Vec<(Vec<T>, Vec<T>)> = g
                    .par_chunks(len * inner)
                    .zip(x.data().par_chunks(len * inner))
                    .map(|(gs, xs)| {
                        let mut pw = vec![T::zero(); k * inner];
                        let mut pb = vec![T::zero(); inner];
                        for a in 0..len {
                            let grow = &gs[a * inner..(a + 1) * inner];
                            for (p, &gv) in pb.iter_mut().zip(grow) {
                                *p += gv;
                            }
                            for j in 0..k {
                                let src = a as isize + j as isize - left as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let xr = &xs[src as usize * inner..(src as usize + 1) * inner];
                                let pwj = &mut pw[j * inner..(j + 1) * inner];
                                for ((p, &gv), &xv) in pwj.iter_mut().zip(grow).zip(xr) {
                                    *p += gv * xv;
                                }
                            }
                        }
                        (pw, pb)
                    })
                    .collect();
                let mut gw = vec![T::zero(); c * k];
                let mut gb = vec![T::zero(); c];
                for (pw, pb) in partials {
                    for j in 0..k {
                        for i in 0..inner {
                            gw[(i % c) * k + j] += pw[j * inner + i];
                        }
                    }
                    for i in 0..inner {
                        gb[i % c] += pb[i];
                    }
                }
                s.add_owned(iw, gw);
                s.add_owned(ib, gb);
            }
        }))
    }

    /// Causal unfolding along the second-to-last (time) axis:
    /// `[.., T, C] -> [.., T, K*C]`, where block `j` of frame `t` holds frame
    /// `t - (K-1) + j` (zeros before the start).
    pub fn unfold_time(&self, k: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || k == 0 {
            return Err(contract(format!("unfold_time on shape {:?} with kernel {}", shape, k)));
        }
        let c = shape[shape.len() - 1];
        let t = shape[shape.len() - 2];
        let seqs = self.value().numel() / (t * c).max(1);
        let mut out = vec![T::zero(); seqs * t * k * c];
        out.par_chunks_mut((t * k * c).max(1))
            .zip(self.data().par_chunks((t * c).max(1)))
            .for_each(|(o, x)| {
                for ti in 0..t {
                    for j in 0..k {
                        let src = ti as isize + j as isize - (k as isize - 1);
                        if src >= 0 {
                            let s = src as usize;
                            o[(ti * k + j) * c..(ti * k + j + 1) * c].copy_from_slice(&x[s * c..(s + 1) * c]);
                        }
                    }
                }
            });
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = k * c;
        let id = self.id();
        Ok(Var::custom(&[self], Tensor::new(oshape, out)?, move |g, s| {
            if let Some(slot) = s.slot(id) {
                slot.par_chunks_mut((t * c).max(1))
                    .zip(g.par_chunks((t * k * c).max(1)))
                    .for_each(|(gx, go)| {
                        for ti in 0..t {
                            for j in 0..k {
                                let src = ti as isize + j as isize - (k as isize - 1);
                                if src >= 0 {
                                    let s = src as usize;
                                    for (a, &b) in gx[s * c..(s + 1) * c]
                                        .iter_mut()
                                        .zip(&go[(ti * k + j) * c..(ti * k + j + 1) * c])
                                    {
                                        *a += b;
                                    }
                                }
                            }
                        }
                    });
            }
        }))
    }

    /// Full-band linear mixing across frequencies, one `[F, F]` matrix per
    /// feature group: `x: [B, F, T, G]`, `w: [G, F, F]` (output, input),
    /// `b: [G, F]`.
    pub fn band_mix(&self, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let sh = self.shape().to_vec();
        if sh.len() != 4 {
            return Err(contract(format!("band_mix expects [B, F, T, G], got {:?}", sh)));
        }
        let (nb, f, t, gr) = (sh[0], sh[1], sh[2], sh[3]);
        if w.shape() != [gr, f, f] || b.shape() != [gr, f] {
            return Err(shape_err("band_mix", &sh, w.shape()));
        }
        let x = self.value_arc();
        let wv = w.value_arc();
        let bv = b.value_arc();
        let mut out = vec![T::zero(); x.numel()];
        let bstride = f * t * gr;
        // view of one (batch, group) slab as an [F, T] matrix
        let rs = t * gr;
        let cs = gr;
        for bi in 0..nb {
            for g in 0..gr {
                let off = bi * bstride + g;
                for fi in 0..f {
                    let bias = bv.data()[g * f + fi];
                    for ti in 0..t {
                        out[off + fi * rs + ti * cs] = bias;
                    }
                }
                let span = (f - 1) * rs + (t - 1) * cs + 1;
                gemm_strided(
                    T::one(),
                    MatRef::new(&wv.data()[g * f * f..(g + 1) * f * f], f, f),
                    MatRef::strided(&x.data()[off..off + span], f, t, rs as isize, cs as isize),
                    T::one(),
                    &mut out[off..off + span],
                    rs,
                    cs,
                );
            }
        }
        let (ix, iw, ib) = (self.id(), w.id(), b.id());
        Ok(Var::custom(&[self, w, b], Tensor::new(sh, out)?, move |g, s| {
            let span = (f - 1) * rs + (t - 1) * cs + 1;
            if let Some(gx) = s.slot(ix) {
                for bi in 0..nb {
                    for gi in 0..gr {
                        let off = bi * bstride + gi;
                        gemm_strided(
                            T::one(),
                            MatRef::new(&wv.data()[gi * f * f..(gi + 1) * f * f], f, f).t(),
                            MatRef::strided(&g[off..off + span], f, t, rs as isize, cs as isize),
                            T::one(),
                            &mut gx[off..off + span],
                            rs,
                            cs,
                        );
                    }
                }
            }
            if let Some(gw) = s.slot(iw) {
                for bi in 0..nb {
                    for gi in 0..gr {
                        let off = bi * bstride + gi;
                        gemm(
                            T::one(),
                            MatRef::strided(&g[off..off + span], f, t, rs as isize, cs as isize),
                            MatRef::strided(&x.data()[off..off + span], f, t, rs as isize, cs as isize).t(),
                            T::one(),
                            &mut gw[gi * f * f..(gi + 1) * f * f],
                            f,
                        );
                    }
                }
            }
            if let Some(gb) = s.slot(ib) {
                for bi in 0..nb {
                    for fi in 0..f {
                        for ti in 0..t {
                            let row = &g[bi * bstride + fi * rs + ti * cs..][..gr];
                            for gi in 0..gr {
                                gb[gi * f + fi] += row[gi];
                            }
                        }
                    }
                }
            }
        }))
    }

    /// `a * b + c` elementwise, used by gated residual paths.
    pub fn mul_add(&self, b: &Var<T>, c: &Var<T>) -> Result<Var<T>> {
        self.same_shape(b, "mul_add")?;
        self.same_shape(c, "mul_add")?;
        let out = map_ternary(self.data(), b.data(), c.data(), |a, b, c| a * b + c);
        let (ia, ib, ic) = (self.id(), b.id(), c.id());
        let (va, vb) = (self.value_arc(), b.value_arc());
        Ok(Var::custom(
            &[self, b, c],
            Tensor::new(self.shape().to_vec(), out)?,
            move |g, s| {
                if s.wants(ia) {
                    s.add_owned(ia, map_binary(g, vb.data(), |g, b| g * b));
                }
                if s.wants(ib) {
                    s.add_owned(ib, map_binary(g, va.data(), |g, a| g * a));
                }
                s.add(ic, g);
            },
        ))
    }
}
