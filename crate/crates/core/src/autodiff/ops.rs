//! Elementwise, reduction and structural operations.

use std::rc::Rc;

use super::gemm::{gemm, MatRef};
use super::Var;
use crate::tensor::Tensor;

/// Gather index that produces a zero (used for padding).
pub const PAD: usize = usize::MAX;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'t> Var<'t> {
    /// Elementwise unary map with derivative `df(x)`.
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let out = x.map(f);
        let id = self.id;
        self.tape.push(out, &[self], move |g, sink| {
            sink.accumulate(id, |gx| {
                for ((acc, &gi), &xi) in gx.iter_mut().zip(g).zip(x.data()) {
                    *acc += gi * df(xi);
                }
            });
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(a.shape(), data);
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, sink| {
            sink.accumulate(ia, |ga| add_into(ga, g));
            sink.accumulate(ib, |gb| add_into(gb, g));
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(a.shape(), data);
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, sink| {
            sink.accumulate(ia, |ga| add_into(ga, g));
            sink.accumulate(ib, |gb| {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(a.shape(), data);
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, sink| {
            sink.accumulate(ia, |ga| {
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(b.data()) {
                    *d += gi * bi;
                }
            });
            sink.accumulate(ib, |gb| {
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(a.data()) {
                    *d += gi * ai;
                }
            });
        })
    }

    /// `self[.., j] + row[j]`, broadcasting a vector over the leading axes.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        let n = r.numel();
        assert!(
            a.rank() >= 1 && *a.shape().last().unwrap() == n,
            "add_row: {:?} + [{n}]",
            a.shape()
        );
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            add_into(chunk, r.data());
        }
        let out = Tensor::from_vec(a.shape(), data);
        let (ia, ir) = (self.id, row.id);
        self.tape.push(out, &[self, row], move |g, sink| {
            sink.accumulate(ia, |ga| add_into(ga, g));
            sink.accumulate(ir, |gr| {
                for chunk in g.chunks(n) {
                    add_into(gr, chunk);
                }
            });
        })
    }

    /// `self[.., j] * row[j]`.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        let n = r.numel();
        assert!(
            a.rank() >= 1 && *a.shape().last().unwrap() == n,
            "mul_row: {:?} * [{n}]",
            a.shape()
        );
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, s) in chunk.iter_mut().zip(r.data()) {
                *d *= s;
            }
        }
        let out = Tensor::from_vec(a.shape(), data);
        let (ia, ir) = (self.id, row.id);
        self.tape.push(out, &[self, row], move |g, sink| {
            sink.accumulate(ia, |ga| {
                for (gc, dc) in g.chunks(n).zip(ga.chunks_mut(n)) {
                    for ((d, gi), ri) in dc.iter_mut().zip(gc).zip(r.data()) {
                        *d += gi * ri;
                    }
                }
            });
            sink.accumulate(ir, |gr| {
                for (gc, ac) in g.chunks(n).zip(a.data().chunks(n)) {
                    for ((d, gi), ai) in gr.iter_mut().zip(gc).zip(ac) {
                        *d += gi * ai;
                    }
                }
            });
        })
    }

    /// `self[i, ..] * col[i]` for a `[m, n]` tensor and a length-`m` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (a, c) = (self.value(), col.value());
        assert_eq!(a.rank(), 2, "mul_col expects a matrix");
        let (m, n) = (a.dim(0), a.dim(1));
        assert_eq!(c.numel(), m, "mul_col: column length");
        let mut data = a.data().to_vec();
        for (chunk, s) in data.chunks_mut(n).zip(c.data()) {
            chunk.iter_mut().for_each(|d| *d *= s);
        }
        let out = Tensor::from_vec(a.shape(), data);
        let (ia, ic) = (self.id, col.id);
        self.tape.push(out, &[self, col], move |g, sink| {
            sink.accumulate(ia, |ga| {
                for ((dc, gc), s) in ga.chunks_mut(n).zip(g.chunks(n)).zip(c.data()) {
                    for (d, gi) in dc.iter_mut().zip(gc) {
                        *d += gi * s;
                    }
                }
            });
            sink.accumulate(ic, |gcol| {
                for ((d, gc), ac) in gcol.iter_mut().zip(g.chunks(n)).zip(a.data().chunks(n)) {
                    *d += gc.iter().zip(ac).map(|(x, y)| x * y).sum::<f64>();
                }
            });
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, gelu_grad)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x| 1.0 / x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(move |x| x.powf(p), move |x| if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        self.select_by(other, |a, b| a <= b, "minimum")
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Var<'t> {
        self.select_by(other, |a, b| a >= b, "maximum")
    }

    fn select_by(self, other: Var<'t>, pick_self: fn(f64, f64) -> bool, op: &str) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, op);
        let mask: Vec<bool> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| pick_self(x, y))
            .collect();
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .zip(&mask)
            .map(|((&x, &y), &m)| if m { x } else { y })
            .collect();
        let out = Tensor::from_vec(a.shape(), data);
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, sink| {
            sink.accumulate(ia, |ga| {
                for ((d, gi), &m) in ga.iter_mut().zip(g).zip(&mask) {
                    if m {
                        *d += gi;
                    }
                }
            });
            sink.accumulate(ib, |gb| {
                for ((d, gi), &m) in gb.iter_mut().zip(g).zip(&mask) {
                    if !m {
                        *d += gi;
                    }
                }
            });
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let id = self.id;
        self.tape.push(out, &[self], move |g, sink| {
            let g0 = g[0];
            sink.accumulate(id, |gx| gx.iter_mut().for_each(|d| *d += g0));
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel();
        assert!(n > 0, "mean of empty tensor");
        self.sum().scale(1.0 / n as f64)
    }

    /// Column sums of a `[m, n]` matrix, shape `[n]`.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "sum_rows expects a matrix");
        let n = x.dim(1);
        let mut out = vec![0.0; n];
        for chunk in x.data().chunks(n) {
            add_into(&mut out, chunk);
        }
        let id = self.id;
        self.tape.push(Tensor::from_vec([n], out), &[self], move |g, sink| {
            sink.accumulate(id, |gx| {
                for chunk in gx.chunks_mut(n) {
                    add_into(chunk, g);
                }
            });
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        assert_eq!(b.dim(0), k, "matmul: {:?} @ {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), MatRef::rows(0, k), b.data(), MatRef::rows(0, n), 0.0, &mut out, MatRef::rows(0, n));
        let (ia, ib) = (self.id, other.id);
        self.tape.push(Tensor::from_vec([m, n], out), &[self, other], move |g, sink| {
            // dA = G B^T, dB = A^T G
            sink.accumulate(ia, |ga| {
                gemm(m, n, k, 1.0, g, MatRef::rows(0, n), b.data(), MatRef::transposed(0, n), 1.0, ga, MatRef::rows(0, k));
            });
            sink.accumulate(ib, |gb| {
                gemm(k, m, n, 1.0, a.data(), MatRef::transposed(0, k), g, MatRef::rows(0, n), 1.0, gb, MatRef::rows(0, n));
            });
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let out = (*x).clone().reshape(shape).expect("reshape");
        let id = self.id;
        self.tape.push(out, &[self], move |g, sink| {
            sink.accumulate(id, |gx| add_into(gx, g));
        })
    }

    /// `out[i] = self.flat[index[i]]`, or `0` where `index[i] == PAD`.
    pub fn gather(self, index: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather: index/shape");
        let x = self.value();
        let src = x.data();
        let data = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { src[i] })
            .collect();
        let id = self.id;
        self.tape.push(Tensor::from_vec(shape, data), &[self], move |g, sink| {
            sink.accumulate(id, |gx| {
                for (&i, &gi) in index.iter().zip(g) {
                    if i != PAD {
                        gx[i] += gi;
                    }
                }
            });
        })
    }

    /// Concatenates `[m, n_i]` matrices along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let m = values[0].dim(0);
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert!(v.rank() == 2 && v.dim(0) == m, "concat_cols: row mismatch");
                v.dim(1)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].tape.push(Tensor::from_vec([m, total], out), parts, move |g, sink| {
            let mut start = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                sink.accumulate(id, |gp| {
                    for r in 0..m {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + start..r * total + start + w]);
                    }
                });
                start += w;
            }
        })
    }

    /// Concatenates tensors along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &values {
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows: trailing shape mismatch");
            rows += v.dim(0);
            data.extend_from_slice(v.data());
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].tape.push(Tensor::from_vec(shape, data), parts, move |g, sink| {
            let mut start = 0;
            for (&id, &n) in ids.iter().zip(&sizes) {
                sink.accumulate(id, |gp| add_into(gp, &g[start..start + n]));
                start += n;
            }
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
