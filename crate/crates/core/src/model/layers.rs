//! Channel-major (`C × H × W`) tensor kernels with explicit backward passes.

use serde::{Deserialize, Serialize};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is `m × k` and
/// `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices have exactly the extents described by the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `op(a) * op(b)` into a fresh buffer.
fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0, dgemm writes every element of the m × n output without reading
    // it, so the buffer is fully initialised before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Square convolution with stride 1 and "same" zero padding (`k` odd).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `cout × (cin · k · k)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            weight: vec![0.0; cout * cin * k * k],
            bias: vec![0.0; cout],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cin, self.cout, self.k)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Returns the output and the cached patch matrix needed by [`Conv::backward`].
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let n = h * w;
        let cols = if self.k == 1 {
            x.to_vec()
        } else {
            im2col(x, self.cin, h, w, self.k)
        };
        let mut y = gemm_new(
            self.cout,
            self.patch(),
            n,
            &self.weight,
            false,
            &cols,
            false,
        );
        for (o, b) in self.bias.iter().enumerate() {
            y[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
        }
        (y, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient if requested.
    pub fn backward(
        &self,
        grad: &mut Conv,
        cols: &[f64],
        dy: &[f64],
        h: usize,
        w: usize,
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let n = h * w;
        let p = self.patch();
        gemm(
            self.cout,
            n,
            p,
            dy,
            false,
            cols,
            true,
            1.0,
            &mut grad.weight,
        );
        for (o, gb) in grad.bias.iter_mut().enumerate() {
            *gb += dy[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        if !need_input_grad {
            return None;
        }
        let dcols = gemm_new(p, self.cout, n, &self.weight, true, dy, false);
        Some(if self.k == 1 {
            dcols
        } else {
            col2im(&dcols, self.cin, h, w, self.k)
        })
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let n = h * w;
    let mut cols = Vec::with_capacity(c * k * k * n);
    for ci in 0..c {
        let plane = &x[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = ((-dx).max(0) as usize).min(w);
                let x1 = ((w as isize - dx).min(w as isize).max(0) as usize).max(x0);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        cols.resize(cols.len() + w, 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    cols.resize(cols.len() + x0, 0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    cols.extend_from_slice(&src[s0..s0 + (x1 - x0)]);
                    cols.resize(cols.len() + (w - x1), 0.0);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let n = h * w;
    let mut x = vec![0.0; c * n];
    for ci in 0..c {
        let plane = &mut x[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by the positive entries of the ReLU output.
pub fn relu_backward(out: &[f64], dy: &mut [f64]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling; also returns the flat argmax index of each window.
pub fn maxpool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    let mut idx = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                y[o] = x[best];
                idx[o] = best as u32;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(idx: &[u32], dy: &[f64], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &g) in idx.iter().zip(dy) {
        dx[i as usize] += g;
    }
    dx
}

pub fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let j = ci * h * w + 2 * oy * w + 2 * ox;
                y[(ci * oh + oy) * ow + ox] = 0.25 * (x[j] + x[j + 1] + x[j + w] + x[j + w + 1]);
            }
        }
    }
    y
}

pub fn avgpool2_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * dy[(ci * oh + oy) * ow + ox];
                let j = ci * h * w + 2 * oy * w + 2 * ox;
                dx[j] += g;
                dx[j + 1] += g;
                dx[j + w] += g;
                dx[j + w + 1] += g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling of an `h × w` input.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                y[(ci * oh + oy) * ow + ox] = x[(ci * h + oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]; `h × w` is the size of the (small) input.
pub fn upsample2_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(ci * h + oy / 2) * w + ox / 2] += dy[(ci * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn conv_naive(conv: &Conv, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let pad = (conv.k / 2) as isize;
        let mut y = vec![0.0; conv.cout * h * w];
        for o in 0..conv.cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = conv.bias[o];
                    for ci in 0..conv.cin {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let sy = yy as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((o * conv.cin + ci) * conv.k + ky) * conv.k + kx;
                                acc +=
                                    conv.weight[wi] * x[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    y[(o * h + yy) * w + xx] = acc;
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * scale)
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1, 3] {
            let mut conv = Conv::zeros(3, 2, k);
            conv.weight = ramp(conv.weight.len(), 0.1);
            conv.bias = vec![0.5, -0.25];
            let x = ramp(3 * 5 * 4, 0.3);
            let (y, _) = conv.forward(&x, 5, 4);
            let y_ref = conv_naive(&conv, &x, 5, 4);
            for (a, b) in y.iter().zip(&y_ref) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 3, 3);
        let x = ramp(c * h * w, 0.7);
        let cols_dir = ramp(c * k * k * h * w, 0.2);
        let lhs: f64 = im2col(&x, c, h, w, k)
            .iter()
            .zip(&cols_dir)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(&col2im(&cols_dir, c, h, w, k))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_adjoint() {
        let x = ramp(2 * 3 * 2, 1.0);
        let dy = ramp(2 * 6 * 4, 0.5);
        let lhs: f64 = upsample2(&x, 2, 3, 2)
            .iter()
            .zip(&dy)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(&upsample2_backward(&dy, 2, 3, 2))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pooling() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (y, idx) = maxpool2(&x, 1, 2, 4);
        assert_eq!(y, vec![6.0, 8.0]);
        assert_eq!(idx, vec![5, 7]);
        assert_eq!(avgpool2(&x, 1, 2, 4), vec![3.5, 5.5]);
        let dx = maxpool2_backward(&idx, &[1.0, 2.0], 8);
        assert_eq!(dx, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
    }
}
