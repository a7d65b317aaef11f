//! Fused operations with hand-written reverse passes.

use std::rc::Rc;

use super::gemm::{gemm, MatRef};
use super::ops::sigmoid;
use super::Var;
use crate::tensor::Tensor;

/// Output of [`Var::attention`].
pub struct AttentionOutput<'t> {
    /// `[batch, queries, channels]`.
    pub output: Var<'t>,
    /// Attention weights `[batch, heads, queries, keys]`; each row sums to 1.
    pub weights: Rc<Tensor>,
}

impl<'t> Var<'t> {
    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("layer_norm on scalar");
        assert_eq!(gamma.numel(), n, "layer_norm gamma");
        assert_eq!(beta.numel(), n, "layer_norm beta");
        let gv = gamma.value();
        let bv = beta.value();
        let rows = x.numel() / n;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * n..(r + 1) * n];
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (xr[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        self.tape.push(Tensor::from_vec(x.shape(), out), &[self, gamma, beta], move |g, sink| {
            sink.accumulate(ig, |gg| {
                for r in 0..rows {
                    for j in 0..n {
                        gg[j] += g[r * n + j] * xhat[r * n + j];
                    }
                }
            });
            sink.accumulate(ib, |gb| {
                for r in 0..rows {
                    for j in 0..n {
                        gb[j] += g[r * n + j];
                    }
                }
            });
            sink.accumulate(ix, |gx| {
                let gam = gv.data();
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let d = g[r * n + j] * gam[j];
                        m1 += d;
                        m2 += d * xhat[r * n + j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        let d = g[r * n + j] * gam[j];
                        gx[r * n + j] += inv_std[r] * (d - m1 - xhat[r * n + j] * m2);
                    }
                }
            });
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("softmax on scalar");
        let mut p = x.data().to_vec();
        for row in p.chunks_mut(n) {
            softmax_in_place(row);
        }
        let probs = Rc::new(Tensor::from_vec(x.shape(), p));
        let saved = probs.clone();
        let id = self.id;
        self.tape.push((*probs).clone(), &[self], move |g, sink| {
            sink.accumulate(id, |gx| {
                for ((gr, pr), dr) in g.chunks(n).zip(saved.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for ((d, gi), pi) in dr.iter_mut().zip(gr).zip(pr) {
                        *d += pi * (gi - dot);
                    }
                }
            });
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("log_softmax on scalar");
        let mut out = x.data().to_vec();
        let mut probs = vec![0.0; out.len()];
        for (row, pr) in out.chunks_mut(n).zip(probs.chunks_mut(n)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (v, p) in row.iter_mut().zip(pr.iter_mut()) {
                *v -= lse;
                *p = v.exp();
            }
        }
        let id = self.id;
        self.tape.push(Tensor::from_vec(x.shape(), out), &[self], move |g, sink| {
            sink.accumulate(id, |gx| {
                for ((gr, pr), dr) in g.chunks(n).zip(probs.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, gi), pi) in dr.iter_mut().zip(gr).zip(pr) {
                        *d += gi - pi * s;
                    }
                }
            });
        })
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and `targets`.
    pub fn bce_with_logits_mean(self, targets: &Tensor) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "bce target shape");
        let n = x.numel() as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let t = targets.clone();
        let id = self.id;
        self.tape.push(Tensor::scalar(loss), &[self], move |g, sink| {
            let s = g[0] / n;
            sink.accumulate(id, |gx| {
                for ((d, &z), &ti) in gx.iter_mut().zip(x.data()).zip(t.data()) {
                    *d += s * (sigmoid(z) - ti);
                }
            });
        })
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `self` holds queries `[b, tq, c]`, `keys` and `values` are `[b, tk, c]`.
    /// `mask`, when given, is an additive `[bm, tq, tk]` term applied to batch
    /// entry `i` as `mask[i % bm]`; use `-inf` to forbid a pair. Every query
    /// row must keep at least one finite entry.
    pub fn attention(
        self,
        keys: Var<'t>,
        values: Var<'t>,
        heads: usize,
        mask: Option<Rc<Tensor>>,
    ) -> AttentionOutput<'t> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        assert!(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention expects [b, t, c]");
        let (b, tq, c) = (q.dim(0), q.dim(1), q.dim(2));
        let tk = k.dim(1);
        assert_eq!(k.shape(), &[b, tk, c], "attention keys shape");
        assert_eq!(v.shape(), &[b, tk, c], "attention values shape");
        assert!(heads > 0 && c % heads == 0, "channels {c} not divisible by heads {heads}");
        if let Some(m) = &mask {
            assert!(
                m.rank() == 3 && m.dim(1) == tq && m.dim(2) == tk && b % m.dim(0) == 0,
                "attention mask shape {:?}",
                m.shape()
            );
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; b * heads * tq * tk];
        let mut out = vec![0.0; b * tq * c];
        for bi in 0..b {
            for h in 0..heads {
                let pofs = (bi * heads + h) * tq * tk;
                let qofs = bi * tq * c + h * d;
                let kofs = bi * tk * c + h * d;
                gemm(
                    tq, d, tk, scale,
                    q.data(), MatRef::rows(qofs, c),
                    k.data(), MatRef::transposed(kofs, c),
                    0.0, &mut probs, MatRef::rows(pofs, tk),
                );
                let scores = &mut probs[pofs..pofs + tq * tk];
                if let Some(m) = &mask {
                    let mi = bi % m.dim(0);
                    let mrow = &m.data()[mi * tq * tk..(mi + 1) * tq * tk];
                    scores.iter_mut().zip(mrow).for_each(|(s, mv)| *s += mv);
                }
                for row in scores.chunks_mut(tk) {
                    softmax_in_place(row);
                }
                gemm(
                    tq, tk, d, 1.0,
                    &probs, MatRef::rows(pofs, tk),
                    v.data(), MatRef::rows(kofs, c),
                    0.0, &mut out, MatRef::rows(qofs, c),
                );
            }
        }
        let weights = Rc::new(Tensor::from_vec([b, heads, tq, tk], probs));
        let saved = weights.clone();
        let (iq, ik, iv) = (self.id, keys.id, values.id);
        let output = self.tape.push(Tensor::from_vec([b, tq, c], out), &[self, keys, values], move |g, sink| {
            let p = saved.data();
            let need_qk = sink.wants(iq) || sink.wants(ik);
            let mut dq = vec![0.0; if sink.wants(iq) { b * tq * c } else { 0 }];
            let mut dk = vec![0.0; if sink.wants(ik) { b * tk * c } else { 0 }];
            let mut dv = vec![0.0; if sink.wants(iv) { b * tk * c } else { 0 }];
            let mut ds = vec![0.0; tq * tk];
            for bi in 0..b {
                for h in 0..heads {
                    let pofs = (bi * heads + h) * tq * tk;
                    let qofs = bi * tq * c + h * d;
                    let kofs = bi * tk * c + h * d;
                    if !dv.is_empty() {
                        // dV += P^T dO
                        gemm(tk, tq, d, 1.0, p, MatRef::transposed(pofs, tk), g, MatRef::rows(qofs, c), 1.0, &mut dv, MatRef::rows(kofs, c));
                    }
                    if !need_qk {
                        continue;
                    }
                    // dP = dO V^T
                    gemm(tq, d, tk, 1.0, g, MatRef::rows(qofs, c), v.data(), MatRef::transposed(kofs, c), 0.0, &mut ds, MatRef::rows(0, tk));
                    for (dr, pr) in ds.chunks_mut(tk).zip(p[pofs..pofs + tq * tk].chunks(tk)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, &pi) in dr.iter_mut().zip(pr) {
                            *x = pi * (*x - dot);
                        }
                    }
                    if !dq.is_empty() {
                        gemm(tq, tk, d, scale, &ds, MatRef::rows(0, tk), k.data(), MatRef::rows(kofs, c), 1.0, &mut dq, MatRef::rows(qofs, c));
                    }
                    if !dk.is_empty() {
                        gemm(tk, tq, d, scale, &ds, MatRef::transposed(0, tk), q.data(), MatRef::rows(qofs, c), 1.0, &mut dk, MatRef::rows(kofs, c));
                    }
                }
            }
            sink.accumulate(iq, |gq| add(gq, &dq));
            sink.accumulate(ik, |gk| add(gk, &dk));
            sink.accumulate(iv, |gv| add(gv, &dv));
        });
        AttentionOutput { output, weights }
    }

    /// Bilinear region sampling of a token-major `[h * w, c]` feature map.
    ///
    /// `bbox` holds `(x_min, y_min, x_max, y_max)` in image pixels; the map's
    /// pixel `(y, x)` is centred at image point `((x + 0.5) * stride,
    /// (y + 0.5) * stride)`. Output cell `(i, j)` samples the box point
    /// `(x_min + (j + 0.5) / out_w * width, y_min + (i + 0.5) / out_h * height)`.
    /// Sample coordinates are clamped to the map border. The result is
    /// `[out_h * out_w, c]` and is differentiable in both the map and the box.
    pub fn roi_align(
        self,
        map_hw: (usize, usize),
        bbox: Var<'t>,
        out_hw: (usize, usize),
        stride: f64,
    ) -> Var<'t> {
        let f = self.value();
        let (h, w) = map_hw;
        let (oh, ow) = out_hw;
        assert_eq!(f.rank(), 2, "roi_align expects a token-major map");
        assert_eq!(f.dim(0), h * w, "roi_align map size");
        let c = f.dim(1);
        let bx = bbox.value();
        assert_eq!(bx.numel(), 4, "roi_align box");
        let [x0, y0, x1, y1] = [bx.data()[0], bx.data()[1], bx.data()[2], bx.data()[3]];
        let xs: Vec<Axis1> = (0..ow).map(|j| Axis1::new(x0, x1, (j as f64 + 0.5) / ow as f64, stride, w)).collect();
        let ys: Vec<Axis1> = (0..oh).map(|i| Axis1::new(y0, y1, (i as f64 + 0.5) / oh as f64, stride, h)).collect();
        let fd = f.data();
        let mut out = vec![0.0; oh * ow * c];
        for (i, ya) in ys.iter().enumerate() {
            for (j, xa) in xs.iter().enumerate() {
                let o = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
                for (yi, wy) in [(ya.lo, 1.0 - ya.frac), (ya.hi, ya.frac)] {
                    for (xi, wx) in [(xa.lo, 1.0 - xa.frac), (xa.hi, xa.frac)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let src = &fd[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                        o.iter_mut().zip(src).for_each(|(a, s)| *a += wgt * s);
                    }
                }
            }
        }
        let (ifeat, ibox) = (self.id, bbox.id);
        self.tape.push(Tensor::from_vec([oh * ow, c], out), &[self, bbox], move |g, sink| {
            sink.accumulate(ifeat, |gf| {
                for (i, ya) in ys.iter().enumerate() {
                    for (j, xa) in xs.iter().enumerate() {
                        let gr = &g[(i * ow + j) * c..(i * ow + j + 1) * c];
                        for (yi, wy) in [(ya.lo, 1.0 - ya.frac), (ya.hi, ya.frac)] {
                            for (xi, wx) in [(xa.lo, 1.0 - xa.frac), (xa.hi, xa.frac)] {
                                let wgt = wy * wx;
                                if wgt == 0.0 {
                                    continue;
                                }
                                let dst = &mut gf[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                                dst.iter_mut().zip(gr).for_each(|(a, s)| *a += wgt * s);
                            }
                        }
                    }
                }
            });
            sink.accumulate(ibox, |gb| {
                let fd = f.data();
                let row = |yi: usize, xi: usize| &fd[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                for (i, ya) in ys.iter().enumerate() {
                    for (j, xa) in xs.iter().enumerate() {
                        let gr = &g[(i * ow + j) * c..(i * ow + j + 1) * c];
                        let dot = |r: &[f64]| gr.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
                        let v00 = dot(row(ya.lo, xa.lo));
                        let v01 = dot(row(ya.lo, xa.hi));
                        let v10 = dot(row(ya.hi, xa.lo));
                        let v11 = dot(row(ya.hi, xa.hi));
                        // d(out)/d(grid x) and d(out)/d(grid y)
                        let dgx = (1.0 - ya.frac) * (v01 - v00) + ya.frac * (v11 - v10);
                        let dgy = (1.0 - xa.frac) * (v10 - v00) + xa.frac * (v11 - v01);
                        gb[0] += dgx * xa.d_lo;
                        gb[2] += dgx * xa.d_hi;
                        gb[1] += dgy * ya.d_lo;
                        gb[3] += dgy * ya.d_hi;
                    }
                }
            });
        })
    }
}

/// Sampling geometry along one axis of [`Var::roi_align`].
struct Axis1 {
    lo: usize,
    hi: usize,
    frac: f64,
    /// d(grid coordinate)/d(box start), zero when clamped.
    d_lo: f64,
    /// d(grid coordinate)/d(box end), zero when clamped.
    d_hi: f64,
}

impl Axis1 {
    fn new(start: f64, end: f64, t: f64, stride: f64, len: usize) -> Self {
        let raw = (start + t * (end - start)) / stride - 0.5;
        let max = (len - 1) as f64;
        let clamped = raw < 0.0 || raw > max;
        let g = raw.clamp(0.0, max);
        let lo = (g.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        let frac = if hi == lo { 0.0 } else { g - lo as f64 };
        let (d_lo, d_hi) = if clamped {
            (0.0, 0.0)
        } else {
            ((1.0 - t) / stride, t / stride)
        };
        Self {
            lo,
            hi,
            frac,
            d_lo,
            d_hi,
        }
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
