//! Forward/backward kernels. Weights are read from and gradients written to
//! flat parameter slices at fixed offsets.

use crate::numerics::Tensor3;

/// Output size and leading pad for "same" padding: `ceil(n / stride)` outputs.
pub(crate) fn same_padding(n: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(n);
    (out, total / 2)
}

/// 2-D cross-correlation, zero "same" padding, optional ReLU.
///
/// Weight layout is `[kh][kw][c_in][c_out]`, followed by `c_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvOp {
    pub in_shape: (usize, usize, usize),
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_c: usize,
    pub relu: bool,
    pub offset: usize,
    out_h: usize,
    out_w: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvOp {
    pub fn new(in_shape: (usize, usize, usize), kh: usize, kw: usize, stride: usize, out_c: usize, relu: bool, offset: usize) -> Self {
        let (out_h, pad_t) = same_padding(in_shape.0, kh, stride);
        let (out_w, pad_l) = same_padding(in_shape.1, kw, stride);
        Self {
            in_shape,
            kh,
            kw,
            stride,
            out_c,
            relu,
            offset,
            out_h,
            out_w,
            pad_t,
            pad_l,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.kh * self.kw * self.in_shape.2 * self.out_c
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_c
    }

    pub fn fan_in(&self) -> usize {
        self.kh * self.kw * self.in_shape.2
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        (self.out_h, self.out_w, self.out_c)
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, n: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(pad)?;
        (p < n).then_some(p)
    }

    pub fn forward(&self, params: &[f64], input: &Tensor3) -> Tensor3 {
        let (h, w, cin) = self.in_shape;
        let cout = self.out_c;
        let weights = &params[self.offset..self.offset + self.weight_count()];
        let bias = &params[self.offset + self.weight_count()..self.offset + self.param_count()];
        let mut out = Tensor3::zeros(self.out_h, self.out_w, cout);
        let x = input.data();
        let od = out.data_mut();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let base = (oy * self.out_w + ox) * cout;
                let acc = &mut od[base..base + cout];
                acc.copy_from_slice(bias);
                for ky in 0..self.kh {
                    let Some(iy) = self.src(oy, ky, self.pad_t, h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.src(ox, kx, self.pad_l, w) else { continue };
                        let px = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let wbase = (ky * self.kw + kx) * cin * cout;
                        for (c, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let wr = &weights[wbase + c * cout..wbase + (c + 1) * cout];
                            for (a, &wk) in acc.iter_mut().zip(wr) {
                                *a += v * wk;
                            }
                        }
                    }
                }
                if self.relu {
                    for a in acc.iter_mut() {
                        if *a < 0.0 {
                            *a = 0.0;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        input: &Tensor3,
        output: &Tensor3,
        grad_out: &Tensor3,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor3> {
        let (h, w, cin) = self.in_shape;
        let cout = self.out_c;
        let wc = self.weight_count();
        let weights = &params[self.offset..self.offset + wc];
        let (gw, gb) = grads[self.offset..self.offset + self.param_count()].split_at_mut(wc);
        let mut grad_in = want_input.then(|| Tensor3::zeros(h, w, cin));
        let x = input.data();
        let y = output.data();
        let g = grad_out.data();
        let mut go = vec![0.0; cout];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let base = (oy * self.out_w + ox) * cout;
                let mut any = false;
                for k in 0..cout {
                    let v = if self.relu && y[base + k] <= 0.0 { 0.0 } else { g[base + k] };
                    go[k] = v;
                    any |= v != 0.0;
                }
                if !any {
                    continue;
                }
                for (b, &v) in gb.iter_mut().zip(&go) {
                    *b += v;
                }
                for ky in 0..self.kh {
                    let Some(iy) = self.src(oy, ky, self.pad_t, h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.src(ox, kx, self.pad_l, w) else { continue };
                        let pbase = (iy * w + ix) * cin;
                        let wbase = (ky * self.kw + kx) * cin * cout;
                        for c in 0..cin {
                            let v = x[pbase + c];
                            let wr = &weights[wbase + c * cout..wbase + (c + 1) * cout];
                            let gwr = &mut gw[wbase + c * cout..wbase + (c + 1) * cout];
                            let mut s = 0.0;
                            for k in 0..cout {
                                s += go[k] * wr[k];
                                gwr[k] += v * go[k];
                            }
                            if let Some(gi) = grad_in.as_mut() {
                                gi.data_mut()[pbase + c] += s;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Max pooling with "same" padding; padded cells never win.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PoolOp {
    pub in_shape: (usize, usize, usize),
    pub kernel: usize,
    pub stride: usize,
    out_h: usize,
    out_w: usize,
    pad_t: usize,
    pad_l: usize,
}

impl PoolOp {
    pub fn new(in_shape: (usize, usize, usize), kernel: usize, stride: usize) -> Self {
        let (out_h, pad_t) = same_padding(in_shape.0, kernel, stride);
        let (out_w, pad_l) = same_padding(in_shape.1, kernel, stride);
        Self {
            in_shape,
            kernel,
            stride,
            out_h,
            out_w,
            pad_t,
            pad_l,
        }
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        (self.out_h, self.out_w, self.in_shape.2)
    }

    /// Returns the pooled tensor and, per output cell, the flat input index of the winner.
    pub fn forward(&self, input: &Tensor3) -> (Tensor3, Vec<usize>) {
        let (h, w, ch) = self.in_shape;
        let mut out = Tensor3::zeros(self.out_h, self.out_w, ch);
        let mut argmax = vec![0usize; self.out_h * self.out_w * ch];
        let x = input.data();
        for oy in 0..self.out_h {
            let y0 = (oy * self.stride).saturating_sub(self.pad_t);
            let y1 = (oy * self.stride + self.kernel).saturating_sub(self.pad_t).min(h);
            for ox in 0..self.out_w {
                let x0 = (ox * self.stride).saturating_sub(self.pad_l);
                let x1 = (ox * self.stride + self.kernel).saturating_sub(self.pad_l).min(w);
                let obase = (oy * self.out_w + ox) * ch;
                for c in 0..ch {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let i = (iy * w + ix) * ch + c;
                            if x[i] > best {
                                best = x[i];
                                arg = i;
                            }
                        }
                    }
                    out.data_mut()[obase + c] = best;
                    argmax[obase + c] = arg;
                }
            }
        }
        (out, argmax)
    }

    pub fn backward(&self, argmax: &[usize], grad_out: &Tensor3) -> Tensor3 {
        let (h, w, ch) = self.in_shape;
        let mut gi = Tensor3::zeros(h, w, ch);
        let d = gi.data_mut();
        for (&a, &g) in argmax.iter().zip(grad_out.data()) {
            d[a] += g;
        }
        gi
    }
}

/// Fully connected layer; weights `[out][in]` then `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseOp {
    pub inputs: usize,
    pub units: usize,
    pub relu: bool,
    pub offset: usize,
}

impl DenseOp {
    pub fn param_count(&self) -> usize {
        self.inputs * self.units + self.units
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let n = self.inputs;
        let w = &params[self.offset..self.offset + n * self.units];
        let b = &params[self.offset + n * self.units..self.offset + self.param_count()];
        (0..self.units)
            .map(|o| {
                let z = b[o] + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if self.relu && z < 0.0 {
                    0.0
                } else {
                    z
                }
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], y: &[f64], grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let n = self.inputs;
        let w = &params[self.offset..self.offset + n * self.units];
        let (gw, gb) = grads[self.offset..self.offset + self.param_count()].split_at_mut(n * self.units);
        let mut gi = vec![0.0; n];
        for o in 0..self.units {
            let g = if self.relu && y[o] <= 0.0 { 0.0 } else { grad_out[o] };
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let wr = &w[o * n..(o + 1) * n];
            let gwr = &mut gw[o * n..(o + 1) * n];
            for i in 0..n {
                gwr[i] += g * x[i];
                gi[i] += g * wr[i];
            }
        }
        gi
    }
}

pub(crate) fn global_avg_pool(input: &Tensor3) -> Vec<f64> {
    let (h, w, ch) = input.shape();
    let mut out = vec![0.0; ch];
    for px in input.data().chunks(ch) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub(crate) fn global_avg_pool_backward(shape: (usize, usize, usize), grad: &[f64]) -> Tensor3 {
    let (h, w, ch) = shape;
    let n = (h * w) as f64;
    let mut gi = Tensor3::zeros(h, w, ch);
    for px in gi.data_mut().chunks_mut(ch) {
        for (p, g) in px.iter_mut().zip(grad) {
            *p = g / n;
        }
    }
    gi
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Four-path inception block: 1x1; 1x1 -> 3x3; 1x1 -> 5x5; 3x3 max pool -> 1x1.
/// Each reduce convolution has the same width as its path.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct InceptionOp {
    pub in_shape: (usize, usize, usize),
    pub p1: ConvOp,
    pub p2_reduce: ConvOp,
    pub p2: ConvOp,
    pub p3_reduce: ConvOp,
    pub p3: ConvOp,
    pub pool: PoolOp,
    pub p4: ConvOp,
}

#[derive(Debug, Clone)]
pub(crate) struct InceptionCache {
    o1: Tensor3,
    r2: Tensor3,
    o2: Tensor3,
    r3: Tensor3,
    o3: Tensor3,
    pooled: Tensor3,
    argmax: Vec<usize>,
    o4: Tensor3,
}

impl InceptionOp {
    pub fn new(in_shape: (usize, usize, usize), widths: [usize; 4], offset: usize) -> Self {
        let (h, w, _) = in_shape;
        let mut off = offset;
        let mut conv = |shape, k, out| {
            let c = ConvOp::new(shape, k, k, 1, out, true, off);
            off += c.param_count();
            c
        };
        let p1 = conv(in_shape, 1, widths[0]);
        let p2_reduce = conv(in_shape, 1, widths[1]);
        let p2 = conv((h, w, widths[1]), 3, widths[1]);
        let p3_reduce = conv(in_shape, 1, widths[2]);
        let p3 = conv((h, w, widths[2]), 5, widths[2]);
        let p4 = conv(in_shape, 1, widths[3]);
        Self {
            in_shape,
            p1,
            p2_reduce,
            p2,
            p3_reduce,
            p3,
            pool: PoolOp::new(in_shape, 3, 1),
            p4,
        }
    }

    pub fn convs(&self) -> [&ConvOp; 6] {
        [&self.p1, &self.p2_reduce, &self.p2, &self.p3_reduce, &self.p3, &self.p4]
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.p1.out_c + self.p2.out_c + self.p3.out_c + self.p4.out_c
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        (self.in_shape.0, self.in_shape.1, self.out_channels())
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> (Tensor3, InceptionCache) {
        let o1 = self.p1.forward(params, x);
        let r2 = self.p2_reduce.forward(params, x);
        let o2 = self.p2.forward(params, &r2);
        let r3 = self.p3_reduce.forward(params, x);
        let o3 = self.p3.forward(params, &r3);
        let (pooled, argmax) = self.pool.forward(x);
        let o4 = self.p4.forward(params, &pooled);
        let out = o1
            .concat_channels(&o2)
            .and_then(|t| t.concat_channels(&o3))
            .and_then(|t| t.concat_channels(&o4))
            .expect("paths share spatial dims");
        (
            out,
            InceptionCache {
                o1,
                r2,
                o2,
                r3,
                o3,
                pooled,
                argmax,
                o4,
            },
        )
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor3,
        cache: &InceptionCache,
        grad_out: &Tensor3,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor3> {
        let widths = [self.p1.out_c, self.p2.out_c, self.p3.out_c, self.p4.out_c];
        let parts = split_channels(grad_out, &widths);
        let mut gx = self.p1.backward(params, x, &cache.o1, &parts[0], grads, want_input);
        let g2 = self.p2.backward(params, &cache.r2, &cache.o2, &parts[1], grads, true).expect("requested");
        let gx2 = self.p2_reduce.backward(params, x, &cache.r2, &g2, grads, want_input);
        let g3 = self.p3.backward(params, &cache.r3, &cache.o3, &parts[2], grads, true).expect("requested");
        let gx3 = self.p3_reduce.backward(params, x, &cache.r3, &g3, grads, want_input);
        let gp = self.p4.backward(params, &cache.pooled, &cache.o4, &parts[3], grads, true).expect("requested");
        if let Some(gx) = gx.as_mut() {
            let gx4 = self.pool.backward(&cache.argmax, &gp);
            for other in [gx2.as_ref(), gx3.as_ref(), Some(&gx4)].into_iter().flatten() {
                for (a, b) in gx.data_mut().iter_mut().zip(other.data()) {
                    *a += b;
                }
            }
        }
        gx
    }
}

fn split_channels(t: &Tensor3, widths: &[usize]) -> Vec<Tensor3> {
    let (h, w, ch) = t.shape();
    let mut parts: Vec<Tensor3> = widths.iter().map(|&c| Tensor3::zeros(h, w, c)).collect();
    for p in 0..h * w {
        let px = &t.data()[p * ch..(p + 1) * ch];
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.data_mut()[p * c..(p + 1) * c].copy_from_slice(&px[start..start + c]);
            start += c;
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_shapes() {
        assert_eq!(same_padding(6, 3, 2), (3, 0));
        assert_eq!(same_padding(5, 3, 1), (5, 1));
        assert_eq!(same_padding(32, 3, 2), (16, 0));
        assert_eq!(same_padding(5, 5, 1), (5, 2));
    }

    #[test]
    fn split_round_trip() {
        let t = Tensor3::from_data(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let parts = split_channels(&t, &[1, 2]);
        assert_eq!(parts[0].data(), &[1.0, 4.0]);
        assert_eq!(parts[1].data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(parts[0].concat_channels(&parts[1]).unwrap(), t);
    }
}
