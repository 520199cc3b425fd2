use std::ops::Range;

use rand::Rng;

use super::{gemm, init_normal, sigmoid, Act, MatRef, ParamLayout, Real};

/// 2-D convolution with "same" zero padding, stride 1 and optional dilation.
/// A 1×1 convolution over `H = W = 1` activations doubles as a dense layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dil: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Saved im2col matrix from a forward pass.
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, dil: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let weight = layout.push(format!("{name}.weight"), &[cout, cin, k, k]);
        let bias = layout.push(format!("{name}.bias"), &[cout]);
        Self {
            cin,
            cout,
            k,
            dil,
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f32], rng: &mut R, gain: f64) {
        let std = gain * (2.0 / self.fan_in() as f64).sqrt();
        init_normal(rng, &mut params[self.weight.clone()], std);
        params[self.bias.clone()].fill(0.0);
    }

    fn pad(&self) -> isize {
        (self.dil * (self.k / 2)) as isize
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Act<T>) -> (Act<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let cols = self.im2col(x);
        let n = x.plane();
        let kk = self.fan_in();
        let mut y = Act::zeros(self.cout, x.b, x.h, x.w);
        let bias = &params[self.bias.clone()];
        for (co, row) in y.data.chunks_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        gemm(
            MatRef::new(&params[self.weight.clone()], self.cout, kk),
            MatRef::new(&cols, kk, n),
            T::one(),
            &mut y.data,
        );
        (
            y,
            ConvCache {
                cols,
                in_shape: x.shape(),
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &ConvCache<T>,
        dy: &Act<T>,
        need_dx: bool,
    ) -> Option<Act<T>> {
        let [_, b, h, w] = cache.in_shape;
        let n = b * h * w;
        let kk = self.fan_in();
        assert_eq!(dy.shape(), [self.cout, b, h, w], "conv output gradient shape");
        {
            let gb = &mut grads[self.bias.clone()];
            for (co, row) in dy.data.chunks(n).enumerate() {
                let mut s = T::zero();
                for &v in row {
                    s = s + v;
                }
                gb[co] = gb[co] + s;
            }
        }
        gemm(
            MatRef::new(&dy.data, self.cout, n),
            MatRef::new(&cache.cols, kk, n).t(),
            T::one(),
            &mut grads[self.weight.clone()],
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * n];
        gemm(
            MatRef::new(&params[self.weight.clone()], self.cout, kk).t(),
            MatRef::new(&dy.data, self.cout, n),
            T::zero(),
            &mut dcols,
        );
        Some(self.col2im(&dcols, cache.in_shape))
    }

    fn im2col<T: Real>(&self, x: &Act<T>) -> Vec<T> {
        let (b, h, w) = (x.b, x.h, x.w);
        let n = b * h * w;
        let k = self.k;
        if k == 1 {
            return x.data.clone();
        }
        let pad = self.pad();
        let mut cols = vec![T::zero(); self.fan_in() * n];
        for ci in 0..self.cin {
            for ky in 0..k {
                let dy = (ky * self.dil) as isize - pad;
                for kx in 0..k {
                    let dx = (kx * self.dil) as isize - pad;
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (x0, x1) = valid_range(w, dx);
                    for bi in 0..b {
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = x.idx(ci, bi, sy as usize, 0);
                            let d = (bi * h + y) * w;
                            for xx in x0..x1 {
                                dst[d + xx] = x.data[src + (xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, dcols: &[T], in_shape: [usize; 4]) -> Act<T> {
        let [c, b, h, w] = in_shape;
        let k = self.k;
        let n = b * h * w;
        if k == 1 {
            return Act {
                c,
                b,
                h,
                w,
                data: dcols.to_vec(),
            };
        }
        let pad = self.pad();
        let mut dx_act = Act::zeros(c, b, h, w);
        for ci in 0..c {
            for ky in 0..k {
                let dy = (ky * self.dil) as isize - pad;
                for kx in 0..k {
                    let dx = (kx * self.dil) as isize - pad;
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * n..(row + 1) * n];
                    let (x0, x1) = valid_range(w, dx);
                    for bi in 0..b {
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst = dx_act.idx(ci, bi, sy as usize, 0);
                            let s = (bi * h + y) * w;
                            for xx in x0..x1 {
                                let t = dst + (xx as isize + dx) as usize;
                                dx_act.data[t] = dx_act.data[t] + src[s + xx];
                            }
                        }
                    }
                }
            }
        }
        dx_act
    }
}

/// Output columns `x` for which `x + dx` lies inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

pub fn silu<T: Real>(x: &Act<T>) -> Act<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = *v * sigmoid(*v);
    }
    y
}

/// Gradient of SiLU given its pre-activation input.
pub fn silu_backward<T: Real>(pre: &Act<T>, dy: &Act<T>) -> Act<T> {
    let mut dx = dy.clone();
    for (g, &x) in dx.data.iter_mut().zip(&pre.data) {
        let s = sigmoid(x);
        *g = *g * s * (T::one() + x * (T::one() - s));
    }
    dx
}

pub fn avg_pool2<T: Real>(x: &Act<T>) -> Act<T> {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even spatial dims");
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.b, h2, w2);
    let q = T::of(0.25);
    for c in 0..x.c {
        for b in 0..x.b {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    let i = x.idx(c, b, 2 * yy, 2 * xx);
                    let s = x.data[i] + x.data[i + 1] + x.data[i + x.w] + x.data[i + x.w + 1];
                    let o = y.idx(c, b, yy, xx);
                    y.data[o] = s * q;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let mut dx = Act::zeros(dy.c, dy.b, dy.h * 2, dy.w * 2);
    let q = T::of(0.25);
    for c in 0..dy.c {
        for b in 0..dy.b {
            for yy in 0..dy.h {
                for xx in 0..dy.w {
                    let g = dy.data[dy.idx(c, b, yy, xx)] * q;
                    let i = dx.idx(c, b, 2 * yy, 2 * xx);
                    let w = dx.w;
                    dx.data[i] = g;
                    dx.data[i + 1] = g;
                    dx.data[i + w] = g;
                    dx.data[i + w + 1] = g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Act<T>) -> Act<T> {
    let mut y = Act::zeros(x.c, x.b, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for b in 0..x.b {
            for yy in 0..y.h {
                for xx in 0..y.w {
                    let o = y.idx(c, b, yy, xx);
                    y.data[o] = x.data[x.idx(c, b, yy / 2, xx / 2)];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let mut dx = Act::zeros(dy.c, dy.b, dy.h / 2, dy.w / 2);
    for c in 0..dy.c {
        for b in 0..dy.b {
            for yy in 0..dy.h {
                for xx in 0..dy.w {
                    let o = dx.idx(c, b, yy / 2, xx / 2);
                    dx.data[o] = dx.data[o] + dy.data[dy.idx(c, b, yy, xx)];
                }
            }
        }
    }
    dx
}

/// Channel concatenation; with channel-major storage this is a plain append.
pub fn concat_channels<T: Real>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    assert_eq!((a.b, a.h, a.w), (b.b, b.h, b.w), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        b: a.b,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split_channels<T: Real>(x: &Act<T>, first: usize) -> (Act<T>, Act<T>) {
    let cut = first * x.plane();
    let a = Act {
        c: first,
        b: x.b,
        h: x.h,
        w: x.w,
        data: x.data[..cut].to_vec(),
    };
    let b = Act {
        c: x.c - first,
        b: x.b,
        h: x.h,
        w: x.w,
        data: x.data[cut..].to_vec(),
    };
    (a, b)
}

/// Adds a per-(channel, batch item) offset `e` (shape `C×B×1×1`) to `y`.
pub fn add_channel_bias<T: Real>(y: &mut Act<T>, e: &Act<T>) {
    assert_eq!((e.c, e.b, e.h, e.w), (y.c, y.b, 1, 1), "channel bias shape");
    let hw = y.h * y.w;
    for c in 0..y.c {
        for b in 0..y.b {
            let off = e.data[c * e.b + b];
            let start = (c * y.b + b) * hw;
            for v in &mut y.data[start..start + hw] {
                *v = *v + off;
            }
        }
    }
}

pub fn channel_bias_grad<T: Real>(dy: &Act<T>) -> Act<T> {
    let hw = dy.h * dy.w;
    let mut g = Act::zeros(dy.c, dy.b, 1, 1);
    for c in 0..dy.c {
        for b in 0..dy.b {
            let start = (c * dy.b + b) * hw;
            let mut s = T::zero();
            for &v in &dy.data[start..start + hw] {
                s = s + v;
            }
            g.data[c * dy.b + b] = s;
        }
    }
    g
}
