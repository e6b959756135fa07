//! Operation implementations for [`Tensor`].
//!
//! Shapes are checked with assertions: every caller inside the crate
//! validates user-facing dimensions first and converts violations into
//! `Error::Dimension` before reaching these kernels.

use super::Tensor;
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for a[m,n], b[k,n] -> [m,k].
fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * k + kk] = acc;
        }
    }
    out
}

/// `aᵀ · b` for a[m,k], b[m,n] -> [k,n].
fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

impl Tensor {
    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let vals = self.with_values(|a| {
            other.with_values(|b| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>())
        });
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let vals = self.with_values(|a| {
            other.with_values(|b| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
        });
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                parents[0].accumulate_grad(g);
                if parents[1].requires_grad() {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    parents[1].accumulate_grad(&neg);
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let vals = self.with_values(|a| {
            other.with_values(|b| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>())
        });
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                if parents[0].requires_grad() {
                    let d: Vec<f32> =
                        parents[1].with_values(|b| g.iter().zip(b).map(|(gi, bi)| gi * bi).collect());
                    parents[0].accumulate_grad(&d);
                }
                if parents[1].requires_grad() {
                    let d: Vec<f32> =
                        parents[0].with_values(|a| g.iter().zip(a).map(|(gi, ai)| gi * ai).collect());
                    parents[1].accumulate_grad(&d);
                }
            }),
        )
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let vals = self.with_values(|a| a.iter().map(|x| x * factor).collect::<Vec<_>>());
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let d: Vec<f32> = g.iter().map(|gi| gi * factor).collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let vals = self.with_values(|a| a.iter().map(|x| x + c).collect::<Vec<_>>());
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accumulate_grad(g)),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        let vals = self.with_values(|a| a.iter().map(|&x| x.max(0.0)).collect::<Vec<_>>());
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone()],
            Box::new(|g, parents| {
                let d: Vec<f32> = parents[0].with_values(|x| {
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect()
                });
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn silu(&self) -> Tensor {
        let vals =
            self.with_values(|a| a.iter().map(|&x| x * sigmoid(x)).collect::<Vec<_>>());
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone()],
            Box::new(|g, parents| {
                let d: Vec<f32> = parents[0].with_values(|x| {
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * (s * (1.0 + xi * (1.0 - s)))
                        })
                        .collect()
                });
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Elementwise absolute value; subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor {
        let vals = self.with_values(|a| a.iter().map(|&x| x.abs()).collect::<Vec<_>>());
        Tensor::op(
            self.shape().to_vec(),
            vals,
            vec![self.clone()],
            Box::new(|g, parents| {
                let d: Vec<f32> = parents[0].with_values(|x| {
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| {
                            if xi > 0.0 {
                                *gi
                            } else if xi < 0.0 {
                                -*gi
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f32 = self.with_values(|a| a.iter().sum());
        let n = self.numel();
        Tensor::op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let d = vec![g[0]; n];
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// 2-D matrix product: `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let vals = self.with_values(|a| other.with_values(|b| matmul_raw(a, b, m, k, n)));
        Tensor::op(
            vec![m, n],
            vals,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    let da = parents[1].with_values(|b| matmul_nt(g, b, m, n, k));
                    parents[0].accumulate_grad(&da);
                }
                if parents[1].requires_grad() {
                    let db = parents[0].with_values(|a| matmul_tn(a, g, m, k, n));
                    parents[1].accumulate_grad(&db);
                }
            }),
        )
    }

    pub fn transpose2d(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let vals = self.with_values(|a| {
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            out
        });
        Tensor::op(
            vec![c, r],
            vals,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut d = vec![0.0f32; r * c];
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Row-wise softmax on a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let vals = self.with_values(|a| {
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                let row = &a[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    let e = libm::expf(x - max);
                    *o = e;
                    denom += e;
                }
                for o in &mut out[i * c..(i + 1) * c] {
                    *o /= denom;
                }
            }
            out
        });
        let saved = vals.clone();
        Tensor::op(
            vec![r, c],
            vals,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut d = vec![0.0f32; r * c];
                for i in 0..r {
                    let y = &saved[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f32 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for ((di, yi), gi) in d[i * c..(i + 1) * c].iter_mut().zip(y).zip(gr) {
                        *di = yi * (gi - dot);
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Layer normalization over each row with affine parameters.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(gamma.shape(), &[c], "layer_norm gamma shape");
        assert_eq!(beta.shape(), &[c], "layer_norm beta shape");
        let mut xhat = vec![0.0f32; r * c];
        let mut inv_std = vec![0.0f32; r];
        let vals = self.with_values(|a| {
            gamma.with_values(|gm| {
                beta.with_values(|bt| {
                    let mut out = vec![0.0f32; r * c];
                    for i in 0..r {
                        let row = &a[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f32>() / c as f32;
                        let var =
                            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / c as f32;
                        let w = 1.0 / libm::sqrtf(var + eps);
                        inv_std[i] = w;
                        for j in 0..c {
                            let xh = (row[j] - mean) * w;
                            xhat[i * c + j] = xh;
                            out[i * c + j] = gm[j] * xh + bt[j];
                        }
                    }
                    out
                })
            })
        });
        Tensor::op(
            vec![r, c],
            vals,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let cf = c as f32;
                if parents[0].requires_grad() {
                    let d = parents[1].with_values(|gm| {
                        let mut d = vec![0.0f32; r * c];
                        for i in 0..r {
                            let gr = &g[i * c..(i + 1) * c];
                            let xh = &xhat[i * c..(i + 1) * c];
                            let mut sum_gh = 0.0f32;
                            let mut sum_ghx = 0.0f32;
                            for j in 0..c {
                                let gh = gr[j] * gm[j];
                                sum_gh += gh;
                                sum_ghx += gh * xh[j];
                            }
                            for j in 0..c {
                                let gh = gr[j] * gm[j];
                                d[i * c + j] =
                                    inv_std[i] * (gh - sum_gh / cf - xh[j] * sum_ghx / cf);
                            }
                        }
                        d
                    });
                    parents[0].accumulate_grad(&d);
                }
                if parents[1].requires_grad() {
                    let mut dg = vec![0.0f32; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    parents[1].accumulate_grad(&dg);
                }
                if parents[2].requires_grad() {
                    let mut db = vec![0.0f32; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    parents[2].accumulate_grad(&db);
                }
            }),
        )
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let r = parts[0].shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.shape().len(), 2);
                assert_eq!(p.shape()[0], r, "concat_cols row mismatch");
                p.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut vals = vec![0.0f32; r * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            p.with_values(|v| {
                for i in 0..r {
                    vals[i * total + offset..i * total + offset + w]
                        .copy_from_slice(&v[i * w..(i + 1) * w]);
                }
            });
            offset += w;
        }
        Tensor::op(
            vec![r, total],
            vals,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut offset = 0;
                for (p, &w) in parents.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut d = vec![0.0f32; r * w];
                        for i in 0..r {
                            d[i * w..(i + 1) * w].copy_from_slice(
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                        p.accumulate_grad(&d);
                    }
                    offset += w;
                }
            }),
        )
    }

    /// Column slice of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(start + len <= c, "slice_cols out of range");
        let vals = self.with_values(|a| {
            let mut out = vec![0.0f32; r * len];
            for i in 0..r {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&a[i * c + start..i * c + start + len]);
            }
            out
        });
        Tensor::op(
            vec![r, len],
            vals,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut d = vec![0.0f32; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Broadcast-add a bias vector to every row of a 2-D tensor.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(bias.shape(), &[c], "bias shape");
        let vals = self.with_values(|a| {
            bias.with_values(|b| {
                let mut out = a.to_vec();
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] += b[j];
                    }
                }
                out
            })
        });
        Tensor::op(
            vec![r, c],
            vals,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g);
                if parents[1].requires_grad() {
                    let mut db = vec![0.0f32; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    parents[1].accumulate_grad(&db);
                }
            }),
        )
    }

    /// Multiply each row `i` of a 2-D tensor by `s[i]`.
    pub fn scale_rows(&self, s: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(s.shape(), &[r], "scale_rows factor shape");
        let vals = self.with_values(|a| {
            s.with_values(|sv| {
                let mut out = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = a[i * c + j] * sv[i];
                    }
                }
                out
            })
        });
        Tensor::op(
            vec![r, c],
            vals,
            vec![self.clone(), s.clone()],
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    let d = parents[1].with_values(|sv| {
                        let mut d = vec![0.0f32; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] = g[i * c + j] * sv[i];
                            }
                        }
                        d
                    });
                    parents[0].accumulate_grad(&d);
                }
                if parents[1].requires_grad() {
                    let d = parents[0].with_values(|a| {
                        let mut d = vec![0.0f32; r];
                        for i in 0..r {
                            for j in 0..c {
                                d[i] += g[i * c + j] * a[i * c + j];
                            }
                        }
                        d
                    });
                    parents[1].accumulate_grad(&d);
                }
            }),
        )
    }

    /// Channel concatenation of two `[C,H,W]` tensors.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 3);
        assert_eq!(other.shape().len(), 3);
        assert_eq!(self.shape()[1..], other.shape()[1..], "spatial mismatch");
        let (c1, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let c2 = other.shape()[0];
        let mut vals = self.values();
        other.with_values(|b| vals.extend_from_slice(b));
        let split = c1 * h * w;
        Tensor::op(
            vec![c1 + c2, h, w],
            vals,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(&g[..split]);
                parents[1].accumulate_grad(&g[split..]);
            }),
        )
    }

    /// `[C,H,W]` -> `[H·W, C]` token layout.
    pub fn chw_to_tokens(&self) -> Tensor {
        assert_eq!(self.shape().len(), 3);
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let t = h * w;
        let vals = self.with_values(|a| {
            let mut out = vec![0.0f32; t * c];
            for ch in 0..c {
                for p in 0..t {
                    out[p * c + ch] = a[ch * t + p];
                }
            }
            out
        });
        Tensor::op(
            vec![t, c],
            vals,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut d = vec![0.0f32; c * t];
                for ch in 0..c {
                    for p in 0..t {
                        d[ch * t + p] = g[p * c + ch];
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// `[H·W, C]` tokens back to `[C,H,W]`.
    pub fn tokens_to_chw(&self, h: usize, w: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (t, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(t, h * w, "token count does not match spatial dims");
        let vals = self.with_values(|a| {
            let mut out = vec![0.0f32; c * t];
            for ch in 0..c {
                for p in 0..t {
                    out[ch * t + p] = a[p * c + ch];
                }
            }
            out
        });
        Tensor::op(
            vec![c, h, w],
            vals,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut d = vec![0.0f32; t * c];
                for ch in 0..c {
                    for p in 0..t {
                        d[p * c + ch] = g[ch * t + p];
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// 2-D convolution over `[Cin,H,W]` with kernel `[Cout,Cin,Kh,Kw]`,
    /// zero padding, and square stride.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.shape().len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(weight.shape().len(), 4, "conv2d weight must be 4-D");
        let (ci, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (co, ci2, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert_eq!(bias.shape(), &[co], "conv2d bias shape");
        assert!(stride >= 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let k = ci * kh * kw;
        let p = oh * ow;
        let geom = ConvGeom {
            ci,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = self.with_values(|x| im2col(x, &geom));
        let vals = weight.with_values(|wv| {
            bias.with_values(|bv| {
                let mut out = matmul_raw(wv, &cols, co, k, p);
                for o in 0..co {
                    let b = bv[o];
                    for v in &mut out[o * p..(o + 1) * p] {
                        *v += b;
                    }
                }
                out
            })
        });
        Tensor::op(
            vec![co, oh, ow],
            vals,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, parents| {
                if parents[1].requires_grad() || parents[0].requires_grad() {
                    let cols = parents[0].with_values(|x| im2col(x, &geom));
                    if parents[1].requires_grad() {
                        let dw = matmul_nt(g, &cols, co, p, k);
                        parents[1].accumulate_grad(&dw);
                    }
                    if parents[0].requires_grad() {
                        let dcols = parents[1].with_values(|wv| matmul_tn(wv, g, co, k, p));
                        let dx = col2im(&dcols, &geom);
                        parents[0].accumulate_grad(&dx);
                    }
                }
                if parents[2].requires_grad() {
                    let mut db = vec![0.0f32; co];
                    for o in 0..co {
                        db[o] = g[o * p..(o + 1) * p].iter().sum();
                    }
                    parents[2].accumulate_grad(&db);
                }
            }),
        )
    }

    /// Bilinear interpolation of a `[C,H,W]` tensor to a new spatial size
    /// (align-corners off).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Tensor {
        assert_eq!(self.shape().len(), 3);
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let map_y = interp_axis(h, oh);
        let map_x = interp_axis(w, ow);
        let vals = self.with_values(|a| {
            let mut out = vec![0.0f32; c * oh * ow];
            for ch in 0..c {
                let plane = &a[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, wy)) in map_y.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in map_x.iter().enumerate() {
                        let v00 = plane[y0 * w + x0];
                        let v01 = plane[y0 * w + x1];
                        let v10 = plane[y1 * w + x0];
                        let v11 = plane[y1 * w + x1];
                        let top = v00 + (v01 - v00) * wx;
                        let bot = v10 + (v11 - v10) * wx;
                        out[ch * oh * ow + oy * ow + ox] = top + (bot - top) * wy;
                    }
                }
            }
            out
        });
        Tensor::op(
            vec![c, oh, ow],
            vals,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut d = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    let dst = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in map_y.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in map_x.iter().enumerate() {
                            let go = g[ch * oh * ow + oy * ow + ox];
                            dst[y0 * w + x0] += go * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += go * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += go * wy * (1.0 - wx);
                            dst[y1 * w + x1] += go * wy * wx;
                        }
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Per-token cosine similarity between rows of `[T,D]` and a vector `[D]`.
    ///
    /// Tokens (or a reference vector) with zero norm yield similarity 0 with
    /// zero gradient, keeping the map well-defined everywhere.
    pub fn cosine_map(&self, reference: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (t, d) = (self.shape()[0], self.shape()[1]);
        assert_eq!(reference.shape(), &[d], "cosine reference shape");
        let (vals, norms, ref_norm) = self.with_values(|v| {
            reference.with_values(|c| {
                let ref_norm = libm::sqrtf(c.iter().map(|x| x * x).sum::<f32>());
                let mut out = vec![0.0f32; t];
                let mut norms = vec![0.0f32; t];
                for p in 0..t {
                    let row = &v[p * d..(p + 1) * d];
                    let n = libm::sqrtf(row.iter().map(|x| x * x).sum::<f32>());
                    norms[p] = n;
                    if n > 0.0 && ref_norm > 0.0 {
                        let dot: f32 = row.iter().zip(c).map(|(a, b)| a * b).sum();
                        out[p] = (dot / (n * ref_norm)).clamp(-1.0, 1.0);
                    }
                }
                (out, norms, ref_norm)
            })
        });
        let saved = vals.clone();
        Tensor::op(
            vec![t],
            vals,
            vec![self.clone(), reference.clone()],
            Box::new(move |g, parents| {
                parents[0].with_values(|v| {
                    parents[1].with_values(|c| {
                        if parents[0].requires_grad() {
                            let mut dv = vec![0.0f32; t * d];
                            for p in 0..t {
                                let n = norms[p];
                                if n == 0.0 || ref_norm == 0.0 {
                                    continue;
                                }
                                let s = saved[p];
                                let gp = g[p];
                                let row = &v[p * d..(p + 1) * d];
                                for j in 0..d {
                                    dv[p * d + j] =
                                        gp * (c[j] / (n * ref_norm) - s * row[j] / (n * n));
                                }
                            }
                            parents[0].accumulate_grad(&dv);
                        }
                        if parents[1].requires_grad() {
                            let mut dc = vec![0.0f32; d];
                            for p in 0..t {
                                let n = norms[p];
                                if n == 0.0 || ref_norm == 0.0 {
                                    continue;
                                }
                                let s = saved[p];
                                let gp = g[p];
                                let row = &v[p * d..(p + 1) * d];
                                for j in 0..d {
                                    dc[j] += gp
                                        * (row[j] / (n * ref_norm) - s * c[j] / (ref_norm * ref_norm));
                                }
                            }
                            parents[1].accumulate_grad(&dc);
                        }
                    })
                });
            }),
        )
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape element count mismatch"
        );
        Tensor::op(
            shape.to_vec(),
            self.values(),
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accumulate_grad(g)),
        )
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let k = g.ci * g.kh * g.kw;
    let p = g.oh * g.ow;
    let mut cols = vec![0.0f32; k * p];
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let row = ((c * g.kh + di) * g.kw + dj) * p;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + di) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + dj) as isize - g.pad as isize;
                        if xx < 0 || xx >= g.w as isize {
                            continue;
                        }
                        cols[row + oy * g.ow + ox] = plane[y as usize * g.w + xx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0f32; g.ci * g.h * g.w];
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let row = ((c * g.kh + di) * g.kw + dj) * p;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + di) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + dj) as isize - g.pad as isize;
                        if xx < 0 || xx >= g.w as isize {
                            continue;
                        }
                        plane[y as usize * g.w + xx as usize] += cols[row + oy * g.ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Source indices and fractional weight per output position for
/// align-corners-off bilinear interpolation.
fn interp_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|o| {
            let pos = (o as f32 + 0.5) * scale - 0.5;
            let pos = pos.max(0.0);
            let i0 = (pos as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = (pos - i0 as f32).clamp(0.0, 1.0);
            (i0, i1, frac)
        })
        .collect()
}

/// Convolution on plain buffers (no graph); shared with data-path code that
/// never differentiates.
pub fn conv2d_raw(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let geom = ConvGeom {
        ci,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    };
    let cols = im2col(x, &geom);
    let out = matmul_raw(weight, &cols, co, ci * kh * kw, geom.oh * geom.ow);
    (out, geom.oh, geom.ow)
}


#[cfg(test)]
mod tests {
    use super::testutil::numeric_grad;
    use super::*;
    use crate::rng::Rng;

    fn assert_close(a: &[f32], b: &[f32], tol: f32, what: &str) {
        assert_eq!(a.len(), b.len(), "{what}: length");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "{what}[{i}]: {x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_known_values() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.values(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = Rng::from_seed(1);
        let a = Tensor::param(&[3, 4], rng.normal_vec(12));
        let b = Tensor::param(&[4, 2], rng.normal_vec(8));
        let loss = a.matmul(&b).mul(&a.matmul(&b)).sum_all();
        loss.backward();
        let want_a = numeric_grad(&a, |t| {
            let y = t.matmul(&b);
            y.mul(&y).sum_all().item()
        });
        assert_close(&a.grad().unwrap(), &want_a, 2e-2, "matmul grad a");
        let want_b = numeric_grad(&b, |t| {
            let y = a.matmul(t);
            y.mul(&y).sum_all().item()
        });
        assert_close(&b.grad().unwrap(), &want_b, 2e-2, "matmul grad b");
    }

    #[test]
    fn softmax_rows_sums_to_one_and_gradchecks() {
        let mut rng = Rng::from_seed(2);
        let x = Tensor::param(&[3, 5], rng.normal_vec(15));
        let y = x.softmax_rows();
        for i in 0..3 {
            let s: f32 = y.values()[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        // weighted sum so the gradient is nontrivial
        let wts = Tensor::from_vec(&[3, 5], (0..15).map(|i| i as f32 * 0.3 - 2.0).collect());
        y.mul(&wts).sum_all().backward();
        let want = numeric_grad(&x, |t| t.softmax_rows().mul(&wts).sum_all().item());
        assert_close(&x.grad().unwrap(), &want, 2e-2, "softmax grad");
    }

    #[test]
    fn layer_norm_rows_gradchecks() {
        let mut rng = Rng::from_seed(3);
        let x = Tensor::param(&[2, 6], rng.normal_vec(12));
        let gamma = Tensor::param(&[6], rng.normal_vec(6));
        let beta = Tensor::param(&[6], rng.normal_vec(6));
        let wts = Tensor::from_vec(&[2, 6], rng.normal_vec(12));
        x.layer_norm_rows(&gamma, &beta, 1e-5)
            .mul(&wts)
            .sum_all()
            .backward();
        let want_x = numeric_grad(&x, |t| {
            t.layer_norm_rows(&gamma, &beta, 1e-5)
                .mul(&wts)
                .sum_all()
                .item()
        });
        assert_close(&x.grad().unwrap(), &want_x, 3e-2, "ln grad x");
        let want_g = numeric_grad(&gamma, |t| {
            x.layer_norm_rows(t, &beta, 1e-5).mul(&wts).sum_all().item()
        });
        assert_close(&gamma.grad().unwrap(), &want_g, 3e-2, "ln grad gamma");
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = Rng::from_seed(4);
        let x = Tensor::from_vec(&[2, 5, 5], rng.normal_vec(50));
        let wt = Tensor::from_vec(&[3, 2, 3, 3], rng.normal_vec(54));
        let bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]);
        let y = x.conv2d(&wt, &bias, 1, 1);
        assert_eq!(y.shape(), &[3, 5, 5]);
        // direct nested-loop reference
        let xv = x.values();
        let wv = wt.values();
        let bv = bias.values();
        let mut want = vec![0.0f32; 3 * 25];
        for o in 0..3 {
            for oy in 0..5i32 {
                for ox in 0..5i32 {
                    let mut acc = bv[o];
                    for c in 0..2usize {
                        for di in 0..3i32 {
                            for dj in 0..3i32 {
                                let y_ = oy + di - 1;
                                let x_ = ox + dj - 1;
                                if y_ < 0 || y_ >= 5 || x_ < 0 || x_ >= 5 {
                                    continue;
                                }
                                acc += xv[c * 25 + (y_ * 5 + x_) as usize]
                                    * wv[((o * 2 + c) * 3 + di as usize) * 3 + dj as usize];
                            }
                        }
                    }
                    want[o * 25 + (oy * 5 + ox) as usize] = acc;
                }
            }
        }
        assert_close(&y.values(), &want, 1e-5, "conv2d forward");
    }

    #[test]
    fn conv2d_gradcheck() {
        let mut rng = Rng::from_seed(5);
        let x = Tensor::param(&[2, 4, 4], rng.normal_vec(32));
        let wt = Tensor::param(&[2, 2, 3, 3], rng.normal_vec(36));
        let bias = Tensor::param(&[2], rng.normal_vec(2));
        let wts = Tensor::from_vec(&[2, 4, 4], rng.normal_vec(32));
        x.conv2d(&wt, &bias, 1, 1).mul(&wts).sum_all().backward();
        let want_x =
            numeric_grad(&x, |t| t.conv2d(&wt, &bias, 1, 1).mul(&wts).sum_all().item());
        assert_close(&x.grad().unwrap(), &want_x, 2e-2, "conv grad x");
        let want_w =
            numeric_grad(&wt, |t| x.conv2d(t, &bias, 1, 1).mul(&wts).sum_all().item());
        assert_close(&wt.grad().unwrap(), &want_w, 2e-2, "conv grad w");
        let want_b =
            numeric_grad(&bias, |t| x.conv2d(&wt, t, 1, 1).mul(&wts).sum_all().item());
        assert_close(&bias.grad().unwrap(), &want_b, 2e-2, "conv grad b");
    }

    #[test]
    fn strided_conv_halves_even_dims() {
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| i as f32).collect());
        let wt = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]);
        let bias = Tensor::zeros(&[1]);
        let y = x.conv2d(&wt, &bias, 2, 1);
        assert_eq!(y.shape(), &[1, 4, 4]);
    }

    #[test]
    fn resize_bilinear_constant_preserved_and_gradchecks() {
        let x = Tensor::from_vec(&[1, 3, 3], vec![2.5; 9]);
        let y = x.resize_bilinear(6, 6);
        assert!(y.values().iter().all(|&v| (v - 2.5).abs() < 1e-6));

        let mut rng = Rng::from_seed(6);
        let x = Tensor::param(&[2, 3, 3], rng.normal_vec(18));
        let wts = Tensor::from_vec(&[2, 6, 6], rng.normal_vec(72));
        x.resize_bilinear(6, 6).mul(&wts).sum_all().backward();
        let want = numeric_grad(&x, |t| t.resize_bilinear(6, 6).mul(&wts).sum_all().item());
        assert_close(&x.grad().unwrap(), &want, 2e-2, "resize grad");
    }

    #[test]
    fn token_roundtrip_is_exact() {
        let mut rng = Rng::from_seed(7);
        let x = Tensor::from_vec(&[3, 4, 5], rng.normal_vec(60));
        let back = x.chw_to_tokens().tokens_to_chw(4, 5);
        assert_eq!(x.values(), back.values());
    }

    #[test]
    fn cosine_map_identities() {
        let v = Tensor::from_vec(&[3, 2], vec![2.0, 0.0, -3.0, 0.0, 0.0, 5.0]);
        let c = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let s = v.cosine_map(&c).values();
        assert!((s[0] - 1.0).abs() < 1e-6, "parallel");
        assert!((s[1] + 1.0).abs() < 1e-6, "antiparallel");
        assert!(s[2].abs() < 1e-6, "orthogonal");
        // zero-norm token reads as similarity 0
        let z = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert_eq!(z.cosine_map(&c).values(), vec![0.0]);
    }

    #[test]
    fn cosine_map_gradcheck() {
        let mut rng = Rng::from_seed(8);
        let v = Tensor::param(&[4, 3], rng.normal_vec(12));
        let c = Tensor::param(&[3], rng.normal_vec(3));
        let wts = Tensor::from_vec(&[4], rng.normal_vec(4));
        v.cosine_map(&c).mul(&wts).sum_all().backward();
        let want_v = numeric_grad(&v, |t| t.cosine_map(&c).mul(&wts).sum_all().item());
        assert_close(&v.grad().unwrap(), &want_v, 3e-2, "cosine grad v");
        let want_c = numeric_grad(&c, |t| v.cosine_map(t).mul(&wts).sum_all().item());
        assert_close(&c.grad().unwrap(), &want_c, 3e-2, "cosine grad c");
    }

    #[test]
    fn cosine_map_scale_invariant_in_tokens() {
        let mut rng = Rng::from_seed(9);
        let vals = rng.normal_vec(12);
        let v = Tensor::from_vec(&[4, 3], vals.clone());
        let scaled = Tensor::from_vec(&[4, 3], vals.iter().map(|x| x * 7.25).collect());
        let c = Tensor::from_vec(&[3], rng.normal_vec(3));
        assert_close(
            &v.cosine_map(&c).values(),
            &scaled.cosine_map(&c).values(),
            1e-5,
            "scale invariance",
        );
    }

    #[test]
    fn concat_and_slice_are_inverses() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let cat = Tensor::concat_cols(&[a.clone(), b.clone()]);
        assert_eq!(cat.shape(), &[2, 5]);
        assert_eq!(cat.slice_cols(0, 2).values(), a.values());
        assert_eq!(cat.slice_cols(2, 3).values(), b.values());
    }

    #[test]
    fn scale_rows_gradcheck() {
        let mut rng = Rng::from_seed(10);
        let x = Tensor::param(&[3, 4], rng.normal_vec(12));
        let s = Tensor::param(&[3], rng.normal_vec(3));
        let wts = Tensor::from_vec(&[3, 4], rng.normal_vec(12));
        x.scale_rows(&s).mul(&wts).sum_all().backward();
        let want_x = numeric_grad(&x, |t| t.scale_rows(&s).mul(&wts).sum_all().item());
        assert_close(&x.grad().unwrap(), &want_x, 2e-2, "scale_rows grad x");
        let want_s = numeric_grad(&s, |t| x.scale_rows(t).mul(&wts).sum_all().item());
        assert_close(&s.grad().unwrap(), &want_s, 2e-2, "scale_rows grad s");
    }
}
