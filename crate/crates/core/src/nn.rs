//! Minimal convolutional network toolkit with explicit reverse mode.
//!
//! Activations are `C × H × W` tensors. Every network keeps a same-shaped
//! gradient twin, so optimizers and checkpoints can walk parameters by name
//! in a fixed order.

use rand::Rng;

use crate::error::{Error, Result};

/// `C × H × W` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::invalid(format!("tensor data has {} values, expected {c}x{h}x{w}", data.len())));
        }
        Ok(Tensor { c, h, w, data })
    }

    /// From row-major `H × W × C` data.
    pub fn from_hwc(h: usize, w: usize, c: usize, hwc: &[f64]) -> Self {
        let mut t = Tensor::zeros(c, h, w);
        for p in 0..h * w {
            for k in 0..c {
                t.data[k * h * w + p] = hwc[p * c + k];
            }
        }
        t
    }

    pub fn to_hwc(&self) -> Vec<f64> {
        let hw = self.h * self.w;
        let mut out = vec![0.0; hw * self.c];
        for k in 0..self.c {
            for p in 0..hw {
                out[p * self.c + k] = self.data[k * hw + p];
            }
        }
        out
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Channel-wise concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.h != b.h || a.w != b.w {
            return Err(Error::invalid("cannot concatenate tensors of different spatial size"));
        }
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// Splits off channels `[start, start + count)`.
    pub fn channels(&self, start: usize, count: usize) -> Tensor {
        let hw = self.h * self.w;
        Tensor {
            c: count,
            h: self.h,
            w: self.w,
            data: self.data[start * hw..(start + count) * hw].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// 2D convolution with square kernel, "same"-style padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    /// `cout × cin × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

const LEAK: f64 = 0.2;

impl Conv2d {
    /// He-uniform initialization for a leaky-ReLU network, scaled by `gain`.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = gain * (6.0 / ((1.0 + LEAK * LEAK) * fan_in)).sqrt();
        Conv2d {
            cin,
            cout,
            k,
            stride,
            weight: (0..cout * cin * k * k).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: vec![0.0; cout],
        }
    }

    pub fn zeroed(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            cin,
            cout,
            k,
            stride,
            weight: vec![0.0; cout * cin * k * k],
            bias: vec![0.0; cout],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d::zeroed(self.cin, self.cout, self.k, self.stride)
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let n = oh * ow;
        let mut cols = vec![0.0; self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let n = oh * ow;
        let mut gx = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut gx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input has {} channels, expected {}", x.c, self.cin);
        let (oh, ow) = self.out_size(x.h, x.w);
        let n = oh * ow;
        let ckk = self.cin * self.k * self.k;
        let mut y = Tensor::zeros(self.cout, oh, ow);
        for co in 0..self.cout {
            y.data[co * n..(co + 1) * n].fill(self.bias[co]);
        }
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        gemm(self.cout, ckk, n, &self.weight, false, cols, false, &mut y.data);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, grad: &mut Conv2d) -> Tensor {
        let (oh, ow) = (gy.h, gy.w);
        let n = oh * ow;
        let ckk = self.cin * self.k * self.k;
        for co in 0..self.cout {
            grad.bias[co] += gy.data[co * n..(co + 1) * n].iter().sum::<f64>();
        }
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        // dW += dY · colsᵀ
        gemm(self.cout, n, ckk, &gy.data, false, cols, true, &mut grad.weight);
        // dcols = Wᵀ · dY
        let mut gcols = vec![0.0; ckk * n];
        gemm(ckk, self.cout, n, &self.weight, true, &gy.data, false, &mut gcols);
        if self.is_pointwise() {
            Tensor {
                c: self.cin,
                h: x.h,
                w: x.w,
                data: gcols,
            }
        } else {
            self.col2im(&gcols, x.h, x.w, oh, ow)
        }
    }
}

// C (m×n) += op(A) (m×k) · op(B) (k×n), all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index implied by the strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|v| if *v > 0.0 { *v } else { LEAK * v }).collect(),
        ..*x
    }
}

pub fn leaky_relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    Tensor {
        data: x
            .data
            .iter()
            .zip(&gy.data)
            .map(|(v, g)| if *v > 0.0 { *g } else { LEAK * g })
            .collect(),
        ..*x
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut y.data[c * h2 * w2..(c + 1) * h2 * w2];
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[yy * w2 + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    let (h, w) = (gy.h / 2, gy.w / 2);
    let mut gx = Tensor::zeros(gy.c, h, w);
    for c in 0..gy.c {
        let src = gy.plane(c);
        let dst = &mut gx.data[c * h * w..(c + 1) * h * w];
        for yy in 0..gy.h {
            for xx in 0..gy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * gy.w + xx];
            }
        }
    }
    gx
}

/// One stage of a [`Net`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    LeakyRelu,
    Upsample,
    /// `x + conv_b(lrelu(conv_a(lrelu(x))))`.
    Residual(Conv2d, Conv2d),
}

/// A sequential stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub layers: Vec<Layer>,
}

/// Intermediate values recorded by [`Net::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Tensor>,
    inner: Vec<Option<(Tensor, Tensor, Tensor)>>,
}

impl Net {
    pub fn new(layers: Vec<Layer>) -> Self {
        Net { layers }
    }

    pub fn zeros_like(&self) -> Net {
        Net {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(c.zeros_like()),
                    Layer::Residual(a, b) => Layer::Residual(a.zeros_like(), b.zeros_like()),
                    Layer::LeakyRelu => Layer::LeakyRelu,
                    Layer::Upsample => Layer::Upsample,
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            inner: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, inner) = match layer {
                Layer::Conv(c) => (c.forward(&cur), None),
                Layer::LeakyRelu => (leaky_relu(&cur), None),
                Layer::Upsample => (upsample2(&cur), None),
                Layer::Residual(a, b) => {
                    let r0 = leaky_relu(&cur);
                    let h = a.forward(&r0);
                    let r1 = leaky_relu(&h);
                    let mut out = b.forward(&r1);
                    out.add_assign(&cur);
                    (out, Some((r0, h, r1)))
                }
            };
            tape.inputs.push(std::mem::replace(&mut cur, next));
            tape.inner.push(inner);
        }
        (cur, tape)
    }

    /// Inference without recording a tape.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.forward(x).0
    }

    pub fn backward(&self, tape: &Tape, gy: &Tensor, grad: &mut Net) -> Tensor {
        let mut g = gy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            g = match (layer, &mut grad.layers[i]) {
                (Layer::Conv(c), Layer::Conv(gc)) => c.backward(x, &g, gc),
                (Layer::LeakyRelu, _) => leaky_relu_backward(x, &g),
                (Layer::Upsample, _) => upsample2_backward(&g),
                (Layer::Residual(a, b), Layer::Residual(ga, gb)) => {
                    let (r0, h, r1) = tape.inner[i].as_ref().expect("residual tape");
                    let g_r1 = b.backward(r1, &g, gb);
                    let g_h = leaky_relu_backward(h, &g_r1);
                    let g_r0 = a.backward(r0, &g_h, ga);
                    let mut gx = leaky_relu_backward(x, &g_r0);
                    gx.add_assign(&g);
                    gx
                }
                _ => unreachable!("gradient twin does not match the network"),
            };
        }
        g
    }

    /// Calls `f(name, values)` for every parameter array in a fixed order.
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    f(format!("{prefix}.{i}.weight"), &c.weight);
                    f(format!("{prefix}.{i}.bias"), &c.bias);
                }
                Layer::Residual(a, b) => {
                    f(format!("{prefix}.{i}.a.weight"), &a.weight);
                    f(format!("{prefix}.{i}.a.bias"), &a.bias);
                    f(format!("{prefix}.{i}.b.weight"), &b.weight);
                    f(format!("{prefix}.{i}.b.bias"), &b.bias);
                }
                _ => {}
            }
        }
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv(c) => {
                    f(format!("{prefix}.{i}.weight"), &mut c.weight);
                    f(format!("{prefix}.{i}.bias"), &mut c.bias);
                }
                Layer::Residual(a, b) => {
                    f(format!("{prefix}.{i}.a.weight"), &mut a.weight);
                    f(format!("{prefix}.{i}.a.bias"), &mut a.bias);
                    f(format!("{prefix}.{i}.b.weight"), &mut b.weight);
                    f(format!("{prefix}.{i}.b.bias"), &mut b.bias);
                }
                _ => {}
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    /// Zeroes the last convolution (weights and bias).
    pub fn zero_last_conv(&mut self) {
        if let Some(Layer::Conv(c)) = self.layers.iter_mut().rev().find(|l| matches!(l, Layer::Conv(_))) {
            c.weight.fill(0.0);
            c.bias.fill(0.0);
        }
    }
}
