//! Differentiable ops on [`Var`]. Each op computes its value eagerly and
//! records a closure producing the parents' gradients.

use super::graph::Var;
use super::kernels::{gemm, inverse_axes, permute, split_axis};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Coefficient of the cubic term in the tanh form of GeLU used by the encoder.
pub const GELU_CUBIC: f64 = 0.045;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    /// rhs is repeated with the given period
    Rhs(usize),
    /// lhs is repeated with the given period
    Lhs(usize),
}

/// Broadcasting is limited to scalars and shapes that are a suffix of the other.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    if nb == 1 {
        return Ok((a.to_vec(), Bcast::Rhs(1)));
    }
    if na == 1 {
        return Ok((b.to_vec(), Bcast::Lhs(1)));
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Bcast::Rhs(nb)));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Bcast::Lhs(na)));
    }
    Err(Error::shape(op, a, b))
}

/// Applies `f` elementwise with broadcasting.
fn zip_with<T: Real>(a: &[T], b: &[T], mode: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
    match mode {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Rhs(p) => {
            let mut out = Vec::with_capacity(a.len());
            for chunk in a.chunks(p) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        Bcast::Lhs(p) => {
            let mut out = Vec::with_capacity(b.len());
            for chunk in b.chunks(p) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            out
        }
    }
}

/// Sums a full-size gradient down to a repeated operand of length `period`.
fn fold<T: Real>(g: &[T], period: usize) -> Vec<T> {
    let mut out = vec![T::zero(); period];
    for chunk in g.chunks(period) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o = *o + x;
        }
    }
    out
}

fn gelu_value<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, &[axis]));
    }
    Ok(())
}

fn softmax_rows<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| x[at(i)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for i in 0..len {
                let e = (x[at(i)] - max).exp();
                y[at(i)] = e;
                sum = sum + e;
            }
            for i in 0..len {
                y[at(i)] = y[at(i)] / sum;
            }
        }
    }
    y
}

impl<'g, T: Real> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        backward: impl FnOnce(&Tensor<T>, &[bool], Bcast) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (shape, mode) = broadcast(op, a.shape(), b.shape())?;
        let out = Tensor::new(&shape, zip_with(a.data(), b.data(), mode, f))?;
        self.graph.record(
            op,
            out,
            &[self, other],
            Box::new(move |g, needs| backward(g, needs, mode)),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        self.binary(other, "add", |x, y| x + y, move |g, needs, mode| {
            vec![
                needs[0].then(|| reduce_to(g, &sa, mode, true)),
                needs[1].then(|| reduce_to(g, &sb, mode, false)),
            ]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        self.binary(other, "sub", |x, y| x - y, move |g, needs, mode| {
            vec![
                needs[0].then(|| reduce_to(g, &sa, mode, true)),
                needs[1].then(|| reduce_to(g, &sb, mode, false).map(|x| -x)),
            ]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        self.binary(other, "mul", |x, y| x * y, move |g, needs, mode| {
            let ga = needs[0].then(|| {
                let full = Tensor::new(g.shape(), zip_with(g.data(), b.data(), rhs_mode(mode), |x, y| x * y))
                    .expect("shape");
                reduce_to(&full, a.shape(), mode, true)
            });
            let gb = needs[1].then(|| {
                let full = Tensor::new(g.shape(), zip_with(g.data(), a.data(), lhs_as_rhs(mode), |x, y| x * y))
                    .expect("shape");
                reduce_to(&full, b.shape(), mode, false)
            });
            vec![ga, gb]
        })
    }

    fn unary(
        self,
        op: &'static str,
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Result<Var<'g, T>> {
        self.graph
            .record(op, value, &[self], Box::new(move |g, _| vec![Some(backward(g))]))
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>> {
        let y = self.value().map(|x| x * c);
        self.unary("scale", y, move |g| g.map(|x| x * c))
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.scale(-T::one())
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        let y = self.value().map(|x| x.exp());
        let yc = y.clone();
        self.unary("exp", y, move |g| elementwise(g, &yc, |g, y| g * y))
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let y = x.map(|v| v.ln());
        self.unary("log", y, move |g| elementwise(g, &x, |g, x| g / x))
    }

    /// `0.5x(1 + tanh(√(2/π)(x + 0.045x³)))`.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = x.map(gelu_value);
        self.unary("gelu", y, move |g| elementwise(g, &x, |g, x| g * gelu_grad(x)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let shape = x.shape().to_vec();
        let y = Tensor::new(&shape, softmax_rows(x.data(), &shape, axis))?;
        let yc = y.clone();
        self.unary("softmax", y, move |g| {
            let (outer, len, inner) = split_axis(&shape, axis);
            let (gd, yd) = (g.data(), yc.data());
            let mut gx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let dot: T = (0..len).map(|i| gd[at(i)] * yd[at(i)]).sum();
                    for i in 0..len {
                        gx[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                    }
                }
            }
            Tensor::new(&shape, gx).expect("shape")
        })
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let shape = x.shape().to_vec();
        let p = softmax_rows(x.data(), &shape, axis);
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| xd[at(i)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..len).map(|i| (xd[at(i)] - max).exp()).sum::<T>().ln();
                for i in 0..len {
                    y[at(i)] = xd[at(i)] - lse;
                }
            }
        }
        let y = Tensor::new(&shape, y)?;
        self.unary("log_softmax", y, move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let total: T = (0..len).map(|i| gd[at(i)]).sum();
                    for i in 0..len {
                        gx[at(i)] = gd[at(i)] - p[at(i)] * total;
                    }
                }
            }
            Tensor::new(&shape, gx).expect("shape")
        })
    }

    /// `(x − mean)/√(var + eps) · gain + bias`, statistics over the last axis.
    /// Row statistics and the backward reductions accumulate in 64-bit.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let shape = x.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", &shape, gv.shape()));
        }
        let wide = |v: T| v.to_f64().expect("finite");
        let narrow = |v: f64| T::from_f64(v).expect("finite");
        let gain64: Vec<f64> = gv.data().iter().map(|&v| wide(v)).collect();
        let rows = x.numel() / d.max(1);
        let (dn, eps) = (d as f64, wide(eps));
        let mut xhat = vec![0.0f64; x.numel()];
        let mut rstd = vec![0.0f64; rows];
        let mut y = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row: Vec<f64> = x.data()[r * d..(r + 1) * d].iter().map(|&v| wide(v)).collect();
            let mean = row.iter().sum::<f64>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dn;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                y[r * d + i] = narrow(h * gain64[i] + wide(bv.data()[i]));
            }
        }
        let y = Tensor::new(&shape, y)?;
        self.graph.record(
            "layer_norm",
            y,
            &[self, gain, bias],
            Box::new(move |g, needs| {
                let gd: Vec<f64> = g.data().iter().map(|&v| wide(v)).collect();
                let mut gx = needs[0].then(|| vec![T::zero(); gd.len()]);
                let mut ggain = vec![0.0f64; d];
                let mut gbias = vec![0.0f64; d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for i in 0..d {
                        ggain[i] += gr[i] * hr[i];
                        gbias[i] += gr[i];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for i in 0..d {
                            let gh = gr[i] * gain64[i];
                            mean_gh += gh;
                            mean_ghh += gh * hr[i];
                        }
                        mean_gh /= dn;
                        mean_ghh /= dn;
                        for i in 0..d {
                            let gh = gr[i] * gain64[i];
                            gx[r * d + i] = narrow(rstd[r] * (gh - mean_gh - hr[i] * mean_ghh));
                        }
                    }
                }
                let cast = |v: Vec<f64>| v.into_iter().map(narrow).collect::<Vec<T>>();
                vec![
                    gx.map(|v| Tensor::new(&shape, v).expect("shape")),
                    needs[1].then(|| Tensor::new(&[d], cast(ggain)).expect("shape")),
                    needs[2].then(|| Tensor::new(&[d], cast(gbias)).expect("shape")),
                ]
            }),
        )
    }

    /// Divides each last-axis row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(self, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize", &shape, &[]))?;
        let rows = x.numel() / d.max(1);
        let mut norms = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = n;
            let denom = n.max(eps);
            for i in 0..d {
                y[r * d + i] = row[i] / denom;
            }
        }
        let y = Tensor::new(&shape, y)?;
        let yc = y.clone();
        self.unary("l2_normalize", y, move |g| {
            let gd = g.data();
            let yd = yc.data();
            let mut gx = vec![T::zero(); gd.len()];
            for r in 0..rows {
                let range = r * d..(r + 1) * d;
                if norms[r] > eps {
                    let dot: T = range.clone().map(|i| gd[i] * yd[i]).sum();
                    for i in range {
                        gx[i] = (gd[i] - yd[i] * dot) / norms[r];
                    }
                } else {
                    for i in range {
                        gx[i] = gd[i] / eps;
                    }
                }
            }
            Tensor::new(&shape, gx).expect("shape")
        })
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Batch dims must
    /// match, or one operand must be a plain matrix broadcast over the other.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch_shape = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        let batches: usize = batch_shape.iter().product();
        let (a_step, b_step) = (
            if ba.is_empty() { 0 } else { m * k },
            if bb.is_empty() { 0 } else { k * n },
        );
        let mut out = vec![T::zero(); batches * m * n];
        for bi in 0..batches {
            gemm(
                m,
                k,
                n,
                &a.data()[bi * a_step..],
                false,
                &b.data()[bi * b_step..],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let out = Tensor::new(&shape, out)?;
        self.graph.record(
            "matmul",
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    for bi in 0..batches {
                        let dst = &mut ga[bi * a_step..bi * a_step + m * k];
                        // dA = dC · Bᵀ
                        gemm(m, n, k, &gd[bi * m * n..], false, &b.data()[bi * b_step..], true, dst, a_step == 0);
                    }
                    Tensor::new(&sa, ga).expect("shape")
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    for bi in 0..batches {
                        let dst = &mut gb[bi * b_step..bi * b_step + k * n];
                        // dB = Aᵀ · dC
                        gemm(k, m, n, &a.data()[bi * a_step..], true, &gd[bi * m * n..], false, dst, b_step == 0);
                    }
                    Tensor::new(&sb, gb).expect("shape")
                });
                vec![ga, gb]
            }),
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let y = Tensor::new(&out_shape, permute(x.data(), &shape, axes))?;
        let inv = inverse_axes(axes);
        self.unary("permute", y, move |g| {
            Tensor::new(&shape, permute(g.data(), &out_shape, &inv)).expect("shape")
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.as_ref().clone().reshaped(shape)?;
        self.unary("reshape", y, move |g| g.clone().reshaped(&old).expect("shape"))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let y = Tensor::new(&shape, out)?;
        first.graph.record(
            "concat",
            y,
            parts,
            Box::new(move |g, needs| {
                let mut grads: Vec<Vec<T>> =
                    lens.iter().map(|&len| Vec::with_capacity(outer * len * inner)).collect();
                for o in 0..outer {
                    let mut at = o * total * inner;
                    for (buf, &len) in grads.iter_mut().zip(&lens) {
                        buf.extend_from_slice(&g.data()[at..at + len * inner]);
                        at += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&lens)
                    .zip(needs)
                    .map(|((buf, &len), &need)| {
                        need.then(|| {
                            let mut s = base.clone();
                            s[axis] = len;
                            Tensor::new(&s, buf).expect("shape")
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("slice", &shape, axis)?;
        if start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let y = Tensor::new(&out_shape, out)?;
        self.unary("slice", y, move |g| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                gx[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
            }
            Tensor::new(&shape, gx).expect("shape")
        })
    }

    /// Tiles the value over new leading dims `lead`.
    pub fn expand(self, lead: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let reps: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(x.shape());
        let mut out = Vec::with_capacity(reps * x.numel());
        for _ in 0..reps {
            out.extend_from_slice(x.data());
        }
        let y = Tensor::new(&shape, out)?;
        let (inner_shape, period) = (x.shape().to_vec(), x.numel());
        self.unary("expand", y, move |g| {
            Tensor::new(&inner_shape, fold(g.data(), period)).expect("shape")
        })
    }

    /// Sum over `axis`, or over everything into a scalar when `None`.
    pub fn reduce_sum(self, axis: Option<usize>) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        match axis {
            None => {
                let y = Tensor::scalar(x.sum());
                self.unary("reduce_sum", y, move |g| {
                    let gv = g.data()[0];
                    Tensor::full(&shape, gv)
                })
            }
            Some(axis) => {
                check_axis("reduce_sum", &shape, axis)?;
                let (outer, len, inner) = split_axis(&shape, axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..len {
                        let src = &x.data()[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                let mut out_shape = shape.clone();
                out_shape.remove(axis);
                let y = Tensor::new(&out_shape, out)?;
                self.unary("reduce_sum", y, move |g| {
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        for _ in 0..len {
                            gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    Tensor::new(&shape, gx).expect("shape")
                })
            }
        }
    }

    pub fn reduce_mean(self, axis: Option<usize>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let count = match axis {
            None => shape.iter().product(),
            Some(a) => *shape.get(a).ok_or_else(|| Error::shape("reduce_mean", &shape, &[a]))?,
        };
        let count = T::from_usize(count.max(1)).expect("count");
        self.reduce_sum(axis)?.scale(T::one() / count)
    }
}

fn elementwise<T: Real>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape(), data).expect("shape")
}

/// Mode for combining the full-size gradient with the original rhs operand.
fn rhs_mode(mode: Bcast) -> Bcast {
    match mode {
        Bcast::Same => Bcast::Same,
        Bcast::Rhs(p) => Bcast::Rhs(p),
        // rhs is full size; zip directly
        Bcast::Lhs(_) => Bcast::Same,
    }
}

/// Mode for combining the full-size gradient with the original lhs operand.
fn lhs_as_rhs(mode: Bcast) -> Bcast {
    match mode {
        Bcast::Same => Bcast::Same,
        Bcast::Rhs(_) => Bcast::Same,
        Bcast::Lhs(p) => Bcast::Rhs(p),
    }
}

/// Reduces a full-size gradient to the shape of the lhs (`is_lhs`) or rhs operand.
fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize], mode: Bcast, is_lhs: bool) -> Tensor<T> {
    let data = match (mode, is_lhs) {
        (Bcast::Rhs(p), false) | (Bcast::Lhs(p), true) => fold(g.data(), p),
        _ => g.data().to_vec(),
    };
    Tensor::new(shape, data).expect("shape")
}
