//! Minimal convolutional network engine for the encoder-decoder models:
//! batched NCHW tensors, same-padding convolutions, stride-2 pooling,
//! nearest-neighbour upsampling, manual backprop and Adam.
//!
//! Parallelism only ever writes disjoint output planes, and reductions run
//! in a fixed order, so training is bit-reproducible for a given seed.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Negative slope of the leaky ReLU used after every searched convolution.
const LEAK: f32 = 0.1;

/// Batched NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let s = (n * self.c + c) * self.h * self.w;
        &self.data[s..s + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let s = (n * self.c + c) * self.h * self.w;
        &mut self.data[s..s + self.h * self.w]
    }
}

/// Pooling operator choice at the stage boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// One convolution with same padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// [cout][cin][k][k]
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(k % 2 == 1, "kernels must be odd, got {k}");
        let fan_in = (cin * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..cout * cin * k * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Conv2d {
            cin,
            cout,
            k,
            weight,
            bias: vec![0.0; cout],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradients with the same layout as a [`Conv2d`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrads {
    fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrads {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

pub fn conv_forward(x: &Tensor, conv: &Conv2d) -> Tensor {
    assert_eq!(x.c, conv.cin);
    let (h, w, k) = (x.h, x.w, conv.k);
    let p = k / 2;
    let mut y = Tensor::zeros(x.n, conv.cout, h, w);
    let hw = h * w;
    let x_data = &x.data;
    y.data
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(plane, out)| {
            let b = plane / conv.cout;
            let co = plane % conv.cout;
            out.fill(conv.bias[co]);
            for ci in 0..conv.cin {
                let xp = &x_data[(b * x.c + ci) * hw..(b * x.c + ci + 1) * hw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = conv.weight[((co * conv.cin + ci) * k + ky) * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        // y[yo][xo] += w * x[yo + ky - p][xo + kx - p]
                        let ylo = p.saturating_sub(ky);
                        let yhi = (h + p - ky).min(h);
                        let xlo = p.saturating_sub(kx);
                        let xhi = (w + p - kx).min(w);
                        for yo in ylo..yhi {
                            let yi = yo + ky - p;
                            let orow = &mut out[yo * w + xlo..yo * w + xhi];
                            let irow = &xp[yi * w + (xlo + kx - p)..yi * w + (xhi + kx - p)];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wgt * i;
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Input gradient of the convolution.
pub fn conv_backward_input(dy: &Tensor, conv: &Conv2d) -> Tensor {
    let (h, w, k) = (dy.h, dy.w, conv.k);
    let p = k / 2;
    let mut dx = Tensor::zeros(dy.n, conv.cin, h, w);
    let hw = h * w;
    let dy_data = &dy.data;
    dx.data
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(plane, out)| {
            let b = plane / conv.cin;
            let ci = plane % conv.cin;
            for co in 0..conv.cout {
                let dyp = &dy_data[(b * conv.cout + co) * hw..(b * conv.cout + co + 1) * hw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = conv.weight[((co * conv.cin + ci) * k + ky) * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        // dx[yi][xi] += w * dy[yi - ky + p][xi - kx + p]
                        let ylo = ky.saturating_sub(p);
                        let yhi = (h + ky).min(h + p) - p;
                        let xlo = kx.saturating_sub(p);
                        let xhi = (w + kx).min(w + p) - p;
                        for yi in ylo..yhi {
                            let yo = yi + p - ky;
                            let orow = &mut out[yi * w + xlo..yi * w + xhi];
                            let drow = &dyp[yo * w + (xlo + p - kx)..yo * w + (xhi + p - kx)];
                            for (o, &d) in orow.iter_mut().zip(drow) {
                                *o += wgt * d;
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Weight and bias gradients, summed over the batch.
pub fn conv_backward_params(x: &Tensor, dy: &Tensor, conv: &Conv2d) -> ConvGrads {
    let (h, w, k) = (x.h, x.w, conv.k);
    let p = k / 2;
    let hw = h * w;
    let mut grads = ConvGrads::zeros_like(conv);
    let x_data = &x.data;
    let dy_data = &dy.data;
    let per_co = conv.cin * k * k;
    let bias: Vec<f32> = (0..conv.cout)
        .into_par_iter()
        .map(|co| {
            let mut acc = 0.0f32;
            for b in 0..x.n {
                let dyp = &dy_data[(b * conv.cout + co) * hw..(b * conv.cout + co + 1) * hw];
                acc += dyp.iter().sum::<f32>();
            }
            acc
        })
        .collect();
    grads.bias = bias;
    grads
        .weight
        .par_chunks_mut(per_co)
        .enumerate()
        .for_each(|(co, wslice)| {
            for b in 0..x.n {
                let dyp = &dy_data[(b * conv.cout + co) * hw..(b * conv.cout + co + 1) * hw];
                for ci in 0..conv.cin {
                    let xp = &x_data[(b * x.c + ci) * hw..(b * x.c + ci + 1) * hw];
                    for ky in 0..k {
                        for kx in 0..k {
                            // dw = sum_yo_xo dy[yo][xo] * x[yo + ky - p][xo + kx - p]
                            let ylo = p.saturating_sub(ky);
                            let yhi = (h + p - ky).min(h);
                            let xlo = p.saturating_sub(kx);
                            let xhi = (w + p - kx).min(w);
                            let mut acc = 0.0f32;
                            for yo in ylo..yhi {
                                let yi = yo + ky - p;
                                let drow = &dyp[yo * w + xlo..yo * w + xhi];
                                let irow = &xp[yi * w + (xlo + kx - p)..yi * w + (xhi + kx - p)];
                                for (d, i) in drow.iter().zip(irow) {
                                    acc += d * i;
                                }
                            }
                            wslice[(ci * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });
    grads
}

pub fn leaky_relu_forward(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v *= LEAK;
        }
    }
}

/// Backward through leaky ReLU given the layer *output*.
pub fn leaky_relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v < 0.0 {
            *d *= LEAK;
        }
    }
}

/// Pool with kernel 4, stride 2, padding 1: halves the spatial size.
/// For max pooling the chosen flat input index per output cell is recorded.
pub fn pool_forward(x: &Tensor, kind: PoolKind) -> (Tensor, Option<Vec<u32>>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "pooling needs even input size");
    let (h, w) = (x.h, x.w);
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    let mut arg = match kind {
        PoolKind::Max => Some(vec![0u32; y.data.len()]),
        PoolKind::Avg => None,
    };
    let hw_out = ho * wo;
    let x_data = &x.data;
    match kind {
        PoolKind::Avg => {
            y.data.par_chunks_mut(hw_out).enumerate().for_each(|(plane, out)| {
                let xp = &x_data[plane * h * w..(plane + 1) * h * w];
                for yo in 0..ho {
                    for xo in 0..wo {
                        let y0 = (2 * yo).saturating_sub(1);
                        let y1 = (2 * yo + 3).min(h);
                        let x0 = (2 * xo).saturating_sub(1);
                        let x1 = (2 * xo + 3).min(w);
                        let mut acc = 0.0f32;
                        for yi in y0..y1 {
                            for xi in x0..x1 {
                                acc += xp[yi * w + xi];
                            }
                        }
                        out[yo * wo + xo] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                    }
                }
            });
        }
        PoolKind::Max => {
            let arg_slice = arg.as_mut().unwrap();
            y.data
                .par_chunks_mut(hw_out)
                .zip(arg_slice.par_chunks_mut(hw_out))
                .enumerate()
                .for_each(|(plane, (out, args))| {
                    let xp = &x_data[plane * h * w..(plane + 1) * h * w];
                    for yo in 0..ho {
                        for xo in 0..wo {
                            let y0 = (2 * yo).saturating_sub(1);
                            let y1 = (2 * yo + 3).min(h);
                            let x0 = (2 * xo).saturating_sub(1);
                            let x1 = (2 * xo + 3).min(w);
                            let mut best = f32::NEG_INFINITY;
                            let mut best_i = 0u32;
                            for yi in y0..y1 {
                                for xi in x0..x1 {
                                    let v = xp[yi * w + xi];
                                    if v > best {
                                        best = v;
                                        best_i = (yi * w + xi) as u32;
                                    }
                                }
                            }
                            out[yo * wo + xo] = best;
                            args[yo * wo + xo] = best_i;
                        }
                    }
                });
        }
    }
    (y, arg)
}

pub fn pool_backward(
    x: &Tensor,
    dy: &Tensor,
    kind: PoolKind,
    argmax: Option<&[u32]>,
) -> Tensor {
    let (h, w) = (x.h, x.w);
    let (ho, wo) = (dy.h, dy.w);
    let mut dx = Tensor::zeros(x.n, x.c, h, w);
    let hw_out = ho * wo;
    let dy_data = &dy.data;
    match kind {
        PoolKind::Avg => {
            dx.data.par_chunks_mut(h * w).enumerate().for_each(|(plane, out)| {
                let dyp = &dy_data[plane * hw_out..(plane + 1) * hw_out];
                for yo in 0..ho {
                    for xo in 0..wo {
                        let y0 = (2 * yo).saturating_sub(1);
                        let y1 = (2 * yo + 3).min(h);
                        let x0 = (2 * xo).saturating_sub(1);
                        let x1 = (2 * xo + 3).min(w);
                        let g = dyp[yo * wo + xo] / ((y1 - y0) * (x1 - x0)) as f32;
                        for yi in y0..y1 {
                            for xi in x0..x1 {
                                out[yi * w + xi] += g;
                            }
                        }
                    }
                }
            });
        }
        PoolKind::Max => {
            let args = argmax.expect("max pool backward needs the argmax trace");
            dx.data.par_chunks_mut(h * w).enumerate().for_each(|(plane, out)| {
                let dyp = &dy_data[plane * hw_out..(plane + 1) * hw_out];
                let argp = &args[plane * hw_out..(plane + 1) * hw_out];
                for i in 0..hw_out {
                    out[argp[i] as usize] += dyp[i];
                }
            });
        }
    }
    dx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (h, w) = (x.h, x.w);
    let mut y = Tensor::zeros(x.n, x.c, h * 2, w * 2);
    let x_data = &x.data;
    y.data.par_chunks_mut(4 * h * w).enumerate().for_each(|(plane, out)| {
        let xp = &x_data[plane * h * w..(plane + 1) * h * w];
        let wo = w * 2;
        for yo in 0..h * 2 {
            for xo in 0..wo {
                out[yo * wo + xo] = xp[(yo / 2) * w + (xo / 2)];
            }
        }
    });
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (ho, wo) = (dy.h, dy.w);
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let dy_data = &dy.data;
    dx.data.par_chunks_mut(h * w).enumerate().for_each(|(plane, out)| {
        let dyp = &dy_data[plane * ho * wo..(plane + 1) * ho * wo];
        for yo in 0..ho {
            for xo in 0..wo {
                out[(yo / 2) * w + (xo / 2)] += dyp[yo * wo + xo];
            }
        }
    });
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w);
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c {
            y.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
        for c in 0..b.c {
            y.plane_mut(n, a.c + c).copy_from_slice(b.plane(n, c));
        }
    }
    y
}

pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cb = dy.c - ca;
    let mut da = Tensor::zeros(dy.n, ca, dy.h, dy.w);
    let mut db = Tensor::zeros(dy.n, cb, dy.h, dy.w);
    for n in 0..dy.n {
        for c in 0..ca {
            da.plane_mut(n, c).copy_from_slice(dy.plane(n, c));
        }
        for c in 0..cb {
            db.plane_mut(n, c).copy_from_slice(dy.plane(n, ca + c));
        }
    }
    (da, db)
}

// ---------------------------------------------------------------------------
// The encoder-decoder model
// ---------------------------------------------------------------------------

/// Spatial downsampling factor across the four encoder stages.
pub const DOWNSAMPLE_FACTOR: usize = 16;

/// UNet-style model: four encoder stages (searched conv + searched pool),
/// a mirrored decoder (fixed x2 nearest upsample + skip concat + searched
/// conv) and a linear 1x1 head.
#[derive(Debug, Clone)]
pub struct UNetModel {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub enc: [Conv2d; 4],
    pub pools: [PoolKind; 4],
    pub dec: [Conv2d; 4],
    pub head: Conv2d,
}

/// All per-layer gradients of a [`UNetModel`].
#[derive(Debug, Clone)]
pub struct UNetGrads {
    pub enc: [ConvGrads; 4],
    pub dec: [ConvGrads; 4],
    pub head: ConvGrads,
}

/// Saved activations from a training forward pass.
pub struct ForwardTrace {
    input: Tensor,
    enc_out: [Tensor; 4],
    pool_out: [Tensor; 4],
    pool_arg: [Option<Vec<u32>>; 4],
    up_out: [Tensor; 4],
    cat_out: [Tensor; 4],
    dec_out: [Tensor; 4],
    pub prediction: Tensor,
}

impl UNetModel {
    pub fn new(
        in_channels: usize,
        widths: [usize; 4],
        enc_kernels: [usize; 4],
        pools: [PoolKind; 4],
        dec_kernels: [usize; 4],
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let [w0, w1, w2, w3] = widths;
        let enc = [
            Conv2d::new(in_channels, w0, enc_kernels[0], rng),
            Conv2d::new(w0, w1, enc_kernels[1], rng),
            Conv2d::new(w1, w2, enc_kernels[2], rng),
            Conv2d::new(w2, w3, enc_kernels[3], rng),
        ];
        let dec = [
            Conv2d::new(w3 + w3, w2, dec_kernels[0], rng),
            Conv2d::new(w2 + w2, w1, dec_kernels[1], rng),
            Conv2d::new(w1 + w1, w0, dec_kernels[2], rng),
            Conv2d::new(w0 + w0, w0, dec_kernels[3], rng),
        ];
        let head = Conv2d::new(w0, 1, 1, rng);
        UNetModel {
            in_channels,
            widths,
            enc,
            pools,
            dec,
            head,
        }
    }

    pub fn param_count(&self) -> usize {
        self.enc.iter().map(Conv2d::param_count).sum::<usize>()
            + self.dec.iter().map(Conv2d::param_count).sum::<usize>()
            + self.head.param_count()
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(x.c, self.in_channels, "channel mismatch");
        assert!(
            x.h % DOWNSAMPLE_FACTOR == 0 && x.w % DOWNSAMPLE_FACTOR == 0,
            "input size {}x{} must be a multiple of {DOWNSAMPLE_FACTOR}",
            x.h,
            x.w
        );
    }

    /// Forward pass keeping every intermediate needed for backprop.
    pub fn forward_trace(&self, x: &Tensor) -> ForwardTrace {
        self.check_input(x);
        let mut enc_out: Vec<Tensor> = Vec::with_capacity(4);
        let mut pool_out: Vec<Tensor> = Vec::with_capacity(4);
        let mut pool_arg: Vec<Option<Vec<u32>>> = Vec::with_capacity(4);
        let mut cur = x.clone();
        for s in 0..4 {
            let mut a = conv_forward(&cur, &self.enc[s]);
            leaky_relu_forward(&mut a);
            let (p, arg) = pool_forward(&a, self.pools[s]);
            enc_out.push(a);
            pool_arg.push(arg);
            cur = p.clone();
            pool_out.push(p);
        }
        let mut up_out: Vec<Tensor> = Vec::with_capacity(4);
        let mut cat_out: Vec<Tensor> = Vec::with_capacity(4);
        let mut dec_out: Vec<Tensor> = Vec::with_capacity(4);
        for s in 0..4 {
            let up = upsample2_forward(&cur);
            let skip = &enc_out[3 - s];
            let cat = concat_channels(&up, skip);
            let mut d = conv_forward(&cat, &self.dec[s]);
            leaky_relu_forward(&mut d);
            cur = d.clone();
            up_out.push(up);
            cat_out.push(cat);
            dec_out.push(d);
        }
        let prediction = conv_forward(&cur, &self.head);
        ForwardTrace {
            input: x.clone(),
            enc_out: enc_out.try_into().unwrap(),
            pool_out: pool_out.try_into().unwrap(),
            pool_arg: pool_arg.try_into().unwrap(),
            up_out: up_out.try_into().unwrap(),
            cat_out: cat_out.try_into().unwrap(),
            dec_out: dec_out.try_into().unwrap(),
            prediction,
        }
    }

    /// Inference-only forward.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_trace(x).prediction
    }

    /// Backprop from the prediction gradient; returns parameter gradients.
    pub fn backward(&self, trace: &ForwardTrace, dpred: &Tensor) -> UNetGrads {
        let head_grads = conv_backward_params(&trace.dec_out[3], dpred, &self.head);
        let mut d = conv_backward_input(dpred, &self.head);

        let mut dec_grads: Vec<ConvGrads> = Vec::with_capacity(4);
        let mut skip_grads: Vec<Option<Tensor>> = vec![None, None, None, None];
        for s in (0..4).rev() {
            leaky_relu_backward(&trace.dec_out[s], &mut d);
            dec_grads.push(conv_backward_params(&trace.cat_out[s], &d, &self.dec[s]));
            let dcat = conv_backward_input(&d, &self.dec[s]);
            let up_c = trace.up_out[s].c;
            let (dup, dskip) = split_channels(&dcat, up_c);
            skip_grads[3 - s] = Some(dskip);
            d = upsample2_backward(&dup);
        }
        dec_grads.reverse();

        let mut enc_grads: Vec<ConvGrads> = Vec::with_capacity(4);
        for s in (0..4).rev() {
            let mut da = pool_backward(
                &trace.enc_out[s],
                &d,
                self.pools[s],
                trace.pool_arg[s].as_deref(),
            );
            if let Some(dskip) = skip_grads[s].take() {
                for (a, b) in da.data.iter_mut().zip(&dskip.data) {
                    *a += b;
                }
            }
            leaky_relu_backward(&trace.enc_out[s], &mut da);
            let x = if s == 0 { &trace.input } else { &trace.pool_out[s - 1] };
            enc_grads.push(conv_backward_params(x, &da, &self.enc[s]));
            d = conv_backward_input(&da, &self.enc[s]);
        }
        enc_grads.reverse();

        UNetGrads {
            enc: enc_grads.try_into().map_err(|_| ()).unwrap(),
            dec: dec_grads.try_into().map_err(|_| ()).unwrap(),
            head: head_grads,
        }
    }

    /// Parameter slices in a fixed order, paired with the matching gradient
    /// slices.
    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out: Vec<&mut Conv2d> = Vec::with_capacity(9);
        out.extend(self.enc.iter_mut());
        out.extend(self.dec.iter_mut());
        out.push(&mut self.head);
        out
    }
}

impl UNetGrads {
    fn layers(&self) -> Vec<&ConvGrads> {
        let mut out: Vec<&ConvGrads> = Vec::with_capacity(9);
        out.extend(self.enc.iter());
        out.extend(self.dec.iter());
        out.push(&self.head);
        out
    }

    pub fn scale(&mut self, f: f32) {
        for g in self.enc.iter_mut().chain(self.dec.iter_mut()).chain([&mut self.head]) {
            for v in g.weight.iter_mut() {
                *v *= f;
            }
            for v in g.bias.iter_mut() {
                *v *= f;
            }
        }
    }

    pub fn add(&mut self, other: &UNetGrads) {
        let add_one = |a: &mut ConvGrads, b: &ConvGrads| {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        };
        for (a, b) in self.enc.iter_mut().zip(&other.enc) {
            add_one(a, b);
        }
        for (a, b) in self.dec.iter_mut().zip(&other.dec) {
            add_one(a, b);
        }
        add_one(&mut self.head, &other.head);
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|g| g.weight.iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite()))
    }
}

/// Adam with decoupled state per parameter tensor.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &UNetModel, lr: f32) -> Self {
        let mut m = Vec::new();
        for conv in model.enc.iter().chain(model.dec.iter()).chain([&model.head]) {
            m.push(vec![0.0; conv.weight.len()]);
            m.push(vec![0.0; conv.bias.len()]);
        }
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, model: &mut UNetModel, grads: &UNetGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let g_layers = grads.layers();
        let mut slot = 0;
        for (layer, conv) in model.layers_mut().into_iter().enumerate() {
            let g = g_layers[layer];
            for (params, grad) in [(&mut conv.weight, &g.weight), (&mut conv.bias, &g.bias)] {
                let m = &mut self.m[slot];
                let v = &mut self.v[slot];
                slot += 1;
                for i in 0..params.len() {
                    let gi = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Weight (de)serialization for checkpoints
// ---------------------------------------------------------------------------

pub fn flatten_params(model: &UNetModel) -> Vec<f32> {
    let mut out = Vec::with_capacity(model.param_count());
    for conv in model.enc.iter().chain(model.dec.iter()).chain([&model.head]) {
        out.extend_from_slice(&conv.weight);
        out.extend_from_slice(&conv.bias);
    }
    out
}

pub fn load_params(model: &mut UNetModel, flat: &[f32]) -> Result<(), String> {
    if flat.len() != model.param_count() {
        return Err(format!(
            "weight blob has {} values, model needs {}",
            flat.len(),
            model.param_count()
        ));
    }
    let mut off = 0;
    for conv in model.layers_mut() {
        let wn = conv.weight.len();
        conv.weight.copy_from_slice(&flat[off..off + wn]);
        off += wn;
        let bn = conv.bias.len();
        conv.bias.copy_from_slice(&flat[off..off + bn]);
        off += bn;
    }
    Ok(())
}
