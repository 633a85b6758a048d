//! Differentiable tensor operations on [`Var`].
//!
//! Spatial operations take `[c, h, w]` inputs. Every op validates shapes with
//! asserts; user-facing argument checking happens one layer up.

use std::rc::Rc;

use crate::autograd::Var;
use crate::linalg::gemm;
use crate::tensor::Tensor;

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(value, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(value, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op(value, &[self, other], move |g| {
            vec![
                Some(g.zip_map(b.value(), |g, b| g * b)),
                Some(g.zip_map(a.value(), |g, a| g * a)),
            ]
        })
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::from_op(self.value().scale(k), &[self], move |g| vec![Some(g.scale(k))])
    }

    /// Add a constant tensor of the same shape.
    pub fn add_const(&self, c: &Tensor) -> Var {
        let value = self.value().zip_map(c, |a, b| a + b);
        Var::from_op(value, &[self], |g| vec![Some(g.clone())])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        let x = self.clone();
        Var::from_op(value, &[self], move |g| {
            vec![Some(g.zip_map(x.value(), |g, v| if v > 0.0 { g } else { slope * g }))]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let y = value.clone();
        Var::from_op(value, &[self], move |g| {
            vec![Some(g.zip_map(&y, |g, s| g * s * (1.0 - s)))]
        })
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().map(|v| v.clamp(lo, hi));
        let x = self.clone();
        Var::from_op(value, &[self], move |g| {
            vec![Some(g.zip_map(x.value(), |g, v| if v < lo || v > hi { 0.0 } else { g }))]
        })
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        Var::from_op(Tensor::scalar(self.value().sum()), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Quotient of two scalars.
    pub fn div_scalar(&self, den: &Var) -> Var {
        let (a, b) = (self.item(), den.item());
        Var::from_op(Tensor::scalar(a / b), &[self, den], move |g| {
            let g = g.item();
            vec![
                Some(Tensor::scalar(g / b)),
                Some(Tensor::scalar(-g * a / (b * b))),
            ]
        })
    }

    /// Sum of same-shaped vars with fixed coefficients.
    pub fn weighted_sum(terms: &[(f64, &Var)]) -> Var {
        let mut value = Tensor::zeros(terms[0].1.shape());
        for (k, v) in terms {
            value.add_assign(&v.value().scale(*k));
        }
        let ks: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let parents: Vec<&Var> = terms.iter().map(|t| t.1).collect();
        Var::from_op(value, &parents, move |g| ks.iter().map(|&k| Some(g.scale(k))).collect())
    }

    /// Concatenate along the channel axis.
    pub fn concat(parts: &[&Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat_channels(&values);
        let sizes: Vec<usize> = parts.iter().map(|p| p.dims3().0).collect();
        Var::from_op(value, parts, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&c| {
                    let part = g.narrow_channels(start, c);
                    start += c;
                    Some(part)
                })
                .collect()
        })
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Var {
        let (c, h, w) = self.dims3();
        let value = self.value().narrow_channels(start, len);
        Var::from_op(value, &[self], move |g| {
            let mut full = Tensor::zeros(&[c, h, w]);
            full.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
            vec![Some(full)]
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Var {
        let (c, h, w) = self.dims3();
        let value = self.value().crop(y0, x0, ch, cw);
        Var::from_op(value, &[self], move |g| {
            let mut full = Tensor::zeros(&[c, h, w]);
            let fd = full.data_mut();
            let gd = g.data();
            for ci in 0..c {
                for y in 0..ch {
                    let dst = (ci * h + y0 + y) * w + x0;
                    let src = (ci * ch + y) * cw;
                    fd[dst..dst + cw].copy_from_slice(&gd[src..src + cw]);
                }
            }
            vec![Some(full)]
        })
    }

    /// `[c * r * r, h, w] -> [c, h * r, w * r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Var {
        let (cin, h, w) = self.dims3();
        assert_eq!(cin % (r * r), 0, "pixel_shuffle channels");
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let src_index = move |co: usize, oy: usize, ox: usize| {
            let ci = co * r * r + (oy % r) * r + ox % r;
            (ci * h + oy / r) * w + ox / r
        };
        let x = self.value().data();
        let mut out = vec![0.0; c * oh * ow];
        for co in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(co * oh + oy) * ow + ox] = x[src_index(co, oy, ox)];
                }
            }
        }
        Var::from_op(Tensor::from_vec(&[c, oh, ow], out), &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; cin * h * w];
            for co in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gx[src_index(co, oy, ox)] = gd[(co * oh + oy) * ow + ox];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[cin, h, w], gx))]
        })
    }

    /// Non-overlapping `k x k` average pooling (trailing rows/cols dropped).
    pub fn avg_pool(&self, k: usize) -> Var {
        let (c, h, w) = self.dims3();
        let (oh, ow) = (h / k, w / k);
        assert!(oh > 0 && ow > 0, "avg_pool window larger than input");
        let norm = 1.0 / (k * k) as f64;
        let x = self.value().data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh * k {
                for xx in 0..ow * k {
                    out[(ci * oh + y / k) * ow + xx / k] += x[(ci * h + y) * w + xx] * norm;
                }
            }
        }
        Var::from_op(Tensor::from_vec(&[c, oh, ow], out), &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..oh * k {
                    for xx in 0..ow * k {
                        gx[(ci * h + y) * w + xx] = gd[(ci * oh + y / k) * ow + xx / k] * norm;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[c, h, w], gx))]
        })
    }

    /// Mean of `sqrt((a - b)^2 + eps^2)`.
    pub fn charbonnier_mean(&self, target: &Var, eps: f64) -> Var {
        let n = self.value().len() as f64;
        let eps2 = eps * eps;
        let diff = self.value().zip_map(target.value(), |a, b| a - b);
        let value = diff.data().iter().map(|d| (d * d + eps2).sqrt()).sum::<f64>() / n;
        Var::from_op(Tensor::scalar(value), &[self, target], move |g| {
            let k = g.item() / n;
            let ga = diff.map(|d| k * d / (d * d + eps2).sqrt());
            let gb = ga.scale(-1.0);
            vec![Some(ga), Some(gb)]
        })
    }

    /// Mean absolute difference. The subgradient at zero is taken as 0.
    pub fn l1_mean(&self, target: &Var) -> Var {
        let n = self.value().len() as f64;
        let diff = self.value().zip_map(target.value(), |a, b| a - b);
        let value = diff.data().iter().map(|d| d.abs()).sum::<f64>() / n;
        Var::from_op(Tensor::scalar(value), &[self, target], move |g| {
            let k = g.item() / n;
            let ga = diff.map(|d| k * sign(d));
            let gb = ga.scale(-1.0);
            vec![Some(ga), Some(gb)]
        })
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unfold `k x k` zero-padded neighborhoods into a `[c * k * k, h * w]`
/// column matrix (stride 1, "same" output size).
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `[c, h, w]`.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            plane[base + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with zero "same" padding.
///
/// `weight` is `[c_out, c_in, k, k]` with odd `k`; `bias` is `[c_out]`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let (cin, h, w) = x.dims3();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight rank");
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], cin, "conv input channels: weight {ws:?}, input {cin}");
    assert_eq!(ws[3], k);
    assert_eq!(k % 2, 1, "odd kernel");
    let hw = h * w;
    let kk = cin * k * k;

    let cols = if k == 1 {
        None
    } else {
        let mut cols = vec![0.0; kk * hw];
        im2col(x.value().data(), cin, h, w, k, &mut cols);
        Some(cols)
    };
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = bias {
        for (co, &bv) in b.value().data().iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(bv);
        }
    }
    let rhs = cols.as_deref().unwrap_or(x.value().data());
    gemm(cout, kk, hw, weight.value().data(), false, rhs, false, 1.0, &mut out);
    drop(cols);

    let value = Tensor::from_vec(&[cout, h, w], out);
    let (xv, wv) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Var::from_op(value, &parents, move |g| {
        let gd = g.data();
        let cols = if k == 1 {
            None
        } else {
            let mut cols = vec![0.0; kk * hw];
            im2col(xv.value().data(), cin, h, w, k, &mut cols);
            Some(cols)
        };
        let rhs = cols.as_deref().unwrap_or(xv.value().data());

        let gx = if xv.requires_grad() {
            let mut gcols = vec![0.0; kk * hw];
            gemm(kk, cout, hw, wv.value().data(), true, gd, false, 0.0, &mut gcols);
            if k == 1 {
                Some(Tensor::from_vec(&[cin, h, w], gcols))
            } else {
                let mut gx = vec![0.0; cin * hw];
                col2im(&gcols, cin, h, w, k, &mut gx);
                Some(Tensor::from_vec(&[cin, h, w], gx))
            }
        } else {
            None
        };
        let gw = if wv.requires_grad() {
            let mut gw = vec![0.0; cout * kk];
            gemm(cout, hw, kk, gd, false, rhs, true, 0.0, &mut gw);
            Some(Tensor::from_vec(&[cout, cin, k, k], gw))
        } else {
            None
        };
        let mut grads = vec![gx, gw];
        if has_bias {
            let gb: Vec<f64> = (0..cout).map(|co| gd[co * hw..(co + 1) * hw].iter().sum()).collect();
            grads.push(Some(Tensor::from_vec(&[cout], gb)));
        }
        grads
    })
}

/// A sparse 1-D linear map: output sample `i` is `sum(w * input[j])` over
/// `taps[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear1d {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Linear1d {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    fn apply(&self, src: &[f64], stride: usize, dst: &mut [f64], dst_stride: usize) {
        for (i, taps) in self.taps.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, wgt) in taps {
                acc += wgt * src[j * stride];
            }
            dst[i * dst_stride] = acc;
        }
    }

    fn apply_transpose(&self, src: &[f64], stride: usize, dst: &mut [f64], dst_stride: usize) {
        for (i, taps) in self.taps.iter().enumerate() {
            let g = src[i * stride];
            for &(j, wgt) in taps {
                dst[j * dst_stride] += wgt * g;
            }
        }
    }
}

/// Apply `rows` along the height axis and `cols` along the width axis of
/// every channel.
pub fn separable_apply(x: &Tensor, rows: &Linear1d, cols: &Linear1d) -> Tensor {
    let (c, h, w) = x.dims3();
    assert_eq!(rows.in_len, h, "separable rows");
    assert_eq!(cols.in_len, w, "separable cols");
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let plane = x.channel(ci);
        for y in 0..h {
            cols.apply(&plane[y * w..], 1, &mut tmp[y * ow..], 1);
        }
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for xo in 0..ow {
            rows.apply(&tmp[xo..], ow, &mut dst[xo..], ow);
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

fn separable_apply_transpose(g: &Tensor, rows: &Linear1d, cols: &Linear1d) -> Tensor {
    let (c, _oh, ow) = g.dims3();
    let (h, w) = (rows.in_len, cols.in_len);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let gp = g.channel(ci);
        let mut tmp = vec![0.0; h * ow];
        for xo in 0..ow {
            rows.apply_transpose(&gp[xo..], ow, &mut tmp[xo..], ow);
        }
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            cols.apply_transpose(&tmp[y * ow..], 1, &mut dst[y * w..], 1);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Differentiable separable linear map (resampling, blurring).
pub fn separable(x: &Var, rows: Rc<Linear1d>, cols: Rc<Linear1d>) -> Var {
    let value = separable_apply(x.value(), &rows, &cols);
    Var::from_op(value, &[x], move |g| {
        vec![Some(separable_apply_transpose(g, &rows, &cols))]
    })
}
