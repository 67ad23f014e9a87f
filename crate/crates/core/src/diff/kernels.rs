//! Raw numeric kernels shared by forward and backward passes.

use super::DiffError;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// NHWC convolution geometry. For depthwise kernels `cout == cin`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize, depthwise: bool) -> Result<Self, DiffError> {
        let bad = |detail: String| DiffError::ShapeMismatch {
            op: if depthwise { "depthwise_conv2d" } else { "conv2d" },
            detail,
        };
        let [n, h, w, cin] = *x else {
            return Err(bad(format!("input must be n×h×w×c, got {x:?}")));
        };
        let (kh, kw, cout) = match (depthwise, k) {
            (false, &[kh, kw, ci, co]) if ci == cin => (kh, kw, co),
            (true, &[kh, kw, c]) if c == cin => (kh, kw, c),
            _ => return Err(bad(format!("kernel {k:?} incompatible with input {x:?}"))),
        };
        if stride == 0 || kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(bad(format!("kernel {kh}x{kw} does not fit {h}x{w} with padding {pad}")));
        }
        Ok(ConvGeometry {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.cout]
    }

    pub fn out_len(&self) -> usize {
        self.n * self.oh * self.ow * self.cout
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t).checked_sub(self.pad)?;
        (i < extent).then_some(i)
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (ci, co) = (g.cin, g.cout);
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((b * g.oh + oy) * g.ow + ox) * co;
                let opx = &mut out[obase..obase + co];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xbase = ((b * g.h + iy) * g.w + ix) * ci;
                        let kbase = (ky * g.kw + kx) * ci * co;
                        for c in 0..ci {
                            let xv = x[xbase + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k[kbase + c * co..kbase + (c + 1) * co];
                            for (o, kv) in opx.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (ci, co) = (g.cin, g.cout);
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((b * g.oh + oy) * g.ow + ox) * co;
                let gpx = &dout[obase..obase + co];
                if gpx.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xbase = ((b * g.h + iy) * g.w + ix) * ci;
                        let kbase = (ky * g.kw + kx) * ci * co;
                        for c in 0..ci {
                            let kr = kbase + c * co..kbase + (c + 1) * co;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xbase + c] += k[kr.clone()].iter().zip(gpx).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dk) = dk.as_deref_mut() {
                                let xv = x[xbase + c];
                                if xv != 0.0 {
                                    for (d, gv) in dk[kr].iter_mut().zip(gpx) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn depthwise_forward(g: &ConvGeometry, x: &[f64], k: &[f64], out: &mut [f64]) {
    let c = g.cin;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((b * g.oh + oy) * g.ow + ox) * c;
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xbase = ((b * g.h + iy) * g.w + ix) * c;
                        let kbase = (ky * g.kw + kx) * c;
                        for j in 0..c {
                            out[obase + j] += x[xbase + j] * k[kbase + j];
                        }
                    }
                }
            }
        }
    }
}

pub fn depthwise_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let c = g.cin;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((b * g.oh + oy) * g.ow + ox) * c;
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xbase = ((b * g.h + iy) * g.w + ix) * c;
                        let kbase = (ky * g.kw + kx) * c;
                        for j in 0..c {
                            let gv = dout[obase + j];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xbase + j] += gv * k[kbase + j];
                            }
                            if let Some(dk) = dk.as_deref_mut() {
                                dk[kbase + j] += gv * x[xbase + j];
                            }
                        }
                    }
                }
            }
        }
    }
}
